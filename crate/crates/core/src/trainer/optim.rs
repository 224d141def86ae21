use crate::autodiff::ParamSet;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// First and second moments plus the step counter.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState<T> {
    pub step: u64,
    pub m: ParamSet<T>,
    pub v: ParamSet<T>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new() -> Self {
        Self {
            step: 0,
            m: ParamSet::new(),
            v: ParamSet::new(),
        }
    }
}

/// One AdamW update with decoupled weight decay:
/// `p ← p − lr·m̂/(√v̂ + ε) − lr·wd·p`. Parameters without a gradient entry
/// are treated as having zero gradient.
pub fn optimizer_step<T: Scalar>(
    params: &mut ParamSet<T>,
    grads: &ParamSet<T>,
    state: &mut AdamState<T>,
    lr: f64,
    weight_decay: f64,
) -> Result<()> {
    if let Some(name) = grads.keys().find(|k| !params.contains_key(*k)) {
        return Err(Error::UnknownParameter(name.clone()));
    }
    for (name, p) in params.iter() {
        if let Some(g) = grads.get(name) {
            if g.shape() != p.shape() {
                return Err(Error::ShapeMismatch(format!(
                    "gradient for {name}: {:?} vs {:?}",
                    g.shape(),
                    p.shape()
                )));
            }
        }
    }
    state.step += 1;
    let t = state.step as f64;
    let (b1, b2) = (T::lit(BETA1), T::lit(BETA2));
    let c1 = T::lit(1.0 - BETA1.powf(t));
    let c2 = T::lit(1.0 - BETA2.powf(t));
    let (lr, wd, eps) = (T::lit(lr), T::lit(weight_decay), T::lit(ADAM_EPS));
    let one = T::one();
    for (name, p) in params.iter_mut() {
        let m = state
            .m
            .entry(name.clone())
            .or_insert_with(|| Tensor::zeros(p.shape()));
        let v = state
            .v
            .entry(name.clone())
            .or_insert_with(|| Tensor::zeros(p.shape()));
        let g = grads.get(name);
        for i in 0..p.len() {
            let gi = g.map_or(T::zero(), |g| g.data()[i]);
            let mi = b1 * m.data()[i] + (one - b1) * gi;
            let vi = b2 * v.data()[i] + (one - b2) * gi * gi;
            m.data_mut()[i] = mi;
            v.data_mut()[i] = vi;
            let update = (mi / c1) / ((vi / c2).sqrt() + eps);
            let old = p.data()[i];
            p.data_mut()[i] = old - lr * update - lr * wd * old;
        }
    }
    Ok(())
}

/// Global L2 norm over every gradient tensor.
pub fn global_norm<T: Scalar>(grads: &ParamSet<T>) -> T {
    grads.values().map(Tensor::sq_norm).sum::<T>().sqrt()
}

/// Rescales `grads` in place so their global norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm<T: Scalar>(grads: &mut ParamSet<T>, max_norm: f64) -> T {
    let norm = global_norm(grads);
    let max = T::lit(max_norm);
    if norm > max {
        let s = max / norm;
        for g in grads.values_mut() {
            g.scale_assign(s);
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(name: &str, v: &[f64]) -> ParamSet<f64> {
        let mut p = ParamSet::new();
        p.insert(name.into(), Tensor::vector(v.to_vec()));
        p
    }

    #[test]
    fn zero_gradient_is_identity() {
        let mut p = set("w", &[1.0, -2.0, 3.0]);
        let before = p.clone();
        let mut st = AdamState::new();
        for _ in 0..5 {
            optimizer_step(&mut p, &set("w", &[0.0; 3]), &mut st, 0.1, 0.0).unwrap();
        }
        assert_eq!(p, before);
    }

    #[test]
    fn pure_decoupled_decay() {
        let mut p = set("w", &[1.0]);
        let mut st = AdamState::new();
        optimizer_step(&mut p, &ParamSet::new(), &mut st, 1.0, 0.1).unwrap();
        assert!((p["w"].data()[0] - 0.9).abs() < 1e-15);
    }

    #[test]
    fn quadratic_bowl_converges() {
        let target = [0.5, -1.5, 2.0];
        let mut p = set("w", &[0.0; 3]);
        let mut st = AdamState::new();
        for step in 0..200 {
            let g: Vec<f64> = p["w"].data().iter().zip(&target).map(|(x, t)| 2.0 * (x - t)).collect();
            let lr = 0.1 * (1.0 - step as f64 / 200.0);
            optimizer_step(&mut p, &set("w", &g), &mut st, lr, 0.0).unwrap();
        }
        for (x, t) in p["w"].data().iter().zip(&target) {
            assert!((x - t).abs() < 1e-3, "{x} vs {t}");
        }
    }

    #[test]
    fn shape_and_name_errors() {
        let mut p = set("w", &[1.0, 2.0]);
        let mut st = AdamState::new();
        assert!(matches!(
            optimizer_step(&mut p, &set("w", &[1.0]), &mut st, 0.1, 0.0),
            Err(Error::ShapeMismatch(_))
        ));
        assert!(matches!(
            optimizer_step(&mut p, &set("u", &[1.0]), &mut st, 0.1, 0.0),
            Err(Error::UnknownParameter(_))
        ));
    }

    #[test]
    fn clipping() {
        let mut g = set("a", &[3.0, 4.0]);
        let n = clip_global_norm(&mut g, 1.0);
        assert_eq!(n, 5.0);
        assert!((global_norm(&g) - 1.0).abs() < 1e-15);
        let mut small = set("a", &[0.3, 0.4]);
        clip_global_norm(&mut small, 1.0);
        assert_eq!(small["a"].data(), &[0.3, 0.4]);
    }
}
