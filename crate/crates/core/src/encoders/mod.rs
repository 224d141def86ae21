//! Modality encoders mapping raw payloads to `d`-dimensional embeddings.
//!
//! Each encoder owns its named parameters and records its forward pass on a
//! [`Graph`], so parameter gradients come from the same code that produces
//! the embedding.

mod crystal;
mod density;
mod dos;
mod head;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, ParamSet, Var};
use crate::embedding::Vector;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub use crystal::{CrystalEncoder, CrystalEncoderConfig};
pub use density::{DensityEncoder, DensityEncoderConfig};
pub use dos::{DosEncoder, DosEncoderConfig};
pub use head::{linear_head, LinearHead};

use crate::synthdata::{CrystalGraph, DensityGrid, DosCurve};

/// Common surface of the modality encoders.
pub trait Encoder<T: Scalar> {
    type Input: ?Sized;

    fn embed_dim(&self) -> usize;

    fn params(&self) -> &ParamSet<T>;

    fn params_mut(&mut self) -> &mut ParamSet<T>;

    /// Records the forward pass on `g` and returns a `[1, d]` node.
    fn forward(&self, g: &mut Graph<T>, input: &Self::Input) -> Result<Var>;

    fn encode(&self, input: &Self::Input) -> Result<Vector<T>> {
        let mut g = Graph::new();
        let out = self.forward(&mut g, input)?;
        Vector::new(g.value(out).data().to_vec())
    }
}

pub fn encode_crystal<T: Scalar>(g: &CrystalGraph, enc: &CrystalEncoder<T>) -> Result<Vector<T>> {
    enc.encode(g)
}

pub fn encode_dos<T: Scalar>(c: &DosCurve, enc: &DosEncoder<T>) -> Result<Vector<T>> {
    enc.encode(c)
}

pub fn encode_density<T: Scalar>(v: &DensityGrid, enc: &DensityEncoder<T>) -> Result<Vector<T>> {
    enc.encode(v)
}

/// Deterministic initializer: uniform in `±1/√fan_in`.
pub(crate) struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    pub(crate) fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub(crate) fn uniform<T: Scalar>(&mut self, shape: &[usize], fan_in: usize) -> Tensor<T> {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| T::lit(self.rng.random_range(-bound..bound)))
            .collect();
        Tensor::new(shape.to_vec(), data).expect("shape")
    }

    /// Adds `{name}.w` `[fan_in, fan_out]` and `{name}.b` `[fan_out]`.
    pub(crate) fn linear<T: Scalar>(&mut self, p: &mut ParamSet<T>, name: &str, fan_in: usize, fan_out: usize) {
        p.insert(format!("{name}.w"), self.uniform(&[fan_in, fan_out], fan_in));
        p.insert(format!("{name}.b"), self.uniform(&[fan_out], fan_in));
    }
}

pub(crate) fn get<'a, T: Scalar>(p: &'a ParamSet<T>, name: &str) -> Result<&'a Tensor<T>> {
    p.get(name)
        .ok_or_else(|| Error::UnknownParameter(name.to_string()))
}

/// `x · W + b` with parameters `{name}.w`, `{name}.b`.
pub(crate) fn linear<T: Scalar>(g: &mut Graph<T>, p: &ParamSet<T>, name: &str, x: Var) -> Result<Var> {
    let w = g.param(&format!("{name}.w"), get(p, &format!("{name}.w"))?);
    let b = g.param(&format!("{name}.b"), get(p, &format!("{name}.b"))?);
    let xw = g.matmul(x, w)?;
    g.add_row(xw, b)
}

/// Checks that `p` holds exactly the expected names with the expected shapes.
pub(crate) fn check_params<T: Scalar>(p: &ParamSet<T>, expected: &ParamSet<T>) -> Result<()> {
    for (name, t) in expected {
        let got = get(p, name)?;
        if got.shape() != t.shape() {
            return Err(Error::ShapeMismatch(format!(
                "parameter {name}: expected {:?}, got {:?}",
                t.shape(),
                got.shape()
            )));
        }
    }
    if let Some(extra) = p.keys().find(|k| !expected.contains_key(*k)) {
        return Err(Error::UnknownParameter(extra.clone()));
    }
    Ok(())
}

#[cfg(test)]
pub(crate) mod gradcheck {
    use super::*;
    use crate::testutil::{central_difference, rel_err, seeded_tensor};

    /// Compares analytic parameter gradients of `probe · f(params)` against
    /// central differences, returning the worst relative error.
    pub fn worst_param_error<E: Encoder<f64>>(enc: &mut E, input: &E::Input) -> f64 {
        let d = enc.embed_dim();
        let probe = seeded_tensor::<f64>(&[1, d], 99, 1.0);
        let objective = |enc: &E| -> f64 {
            let v = enc.encode(input).unwrap();
            v.values().iter().zip(probe.data()).map(|(a, b)| a * b).sum()
        };
        let mut g = Graph::new();
        let out = enc.forward(&mut g, input).unwrap();
        g.backward_with_seed(out, probe.clone()).unwrap();
        let grads = g.param_grads().unwrap();
        let names: Vec<String> = enc.params().keys().cloned().collect();
        let mut worst = 0.0f64;
        for name in names {
            let analytic = grads.get(&name).cloned().unwrap_or_else(|| Tensor::zeros(enc.params()[&name].shape()));
            let base = enc.params()[&name].clone();
            let fd = central_difference(&base, 1e-4, |t| {
                enc.params_mut().insert(name.clone(), t.clone());
                let v = objective(enc);
                v
            });
            enc.params_mut().insert(name.clone(), base);
            let err = rel_err(&analytic, &fd);
            worst = worst.max(err);
        }
        worst
    }
}
