use crate::autodiff::{Graph, ParamSet, Var};
use crate::embedding::Vector;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

use super::{linear, Init};

/// `w[..d] · e + w[d]`.
pub fn linear_head<T: Scalar>(e: &Vector<T>, w: &[T]) -> Result<T> {
    let d = e.dim();
    if w.len() != d + 1 {
        return Err(Error::DimMismatch {
            expected: d + 1,
            got: w.len(),
        });
    }
    let dot: T = e.values().iter().zip(w).map(|(&a, &b)| a * b).sum();
    Ok(dot + w[d])
}

/// Trainable scalar head; parameters `head.w` `[d, 1]` and `head.b` `[1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearHead<T> {
    params: ParamSet<T>,
    dim: usize,
}

impl<T: Scalar> LinearHead<T> {
    pub const NAME: &'static str = "head";

    pub fn new(dim: usize, seed: u64) -> Self {
        let mut p = ParamSet::new();
        Init::new(seed).linear(&mut p, Self::NAME, dim, 1);
        Self { params: p, dim }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn params(&self) -> &ParamSet<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<T> {
        &mut self.params
    }

    /// Flattened `[w..., b]` weights for [`linear_head`].
    pub fn weights(&self) -> Vec<T> {
        let mut w = self.params["head.w"].data().to_vec();
        w.extend_from_slice(self.params["head.b"].data());
        w
    }

    pub fn predict(&self, e: &Vector<T>) -> Result<T> {
        linear_head(e, &self.weights())
    }

    /// `[n, d] → [n, 1]`.
    pub fn forward(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        linear(g, &self.params, Self::NAME, x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn zero_weights() {
        let e = Vector::from_f64(&[3.0, -1.0, 2.0]).unwrap();
        assert_eq!(linear_head(&e, &[0.0; 4]).unwrap(), 0.0);
    }

    #[test]
    fn unit_weight() {
        let e = Vector::from_f64(&[5.0, 7.0, 9.0]).unwrap();
        assert_eq!(linear_head(&e, &[1.0, 0.0, 0.0, 0.0]).unwrap(), 5.0);
    }

    #[test]
    fn bad_weight_length() {
        let e = Vector::from_f64(&[1.0, 2.0]).unwrap();
        assert!(matches!(
            linear_head(&e, &[1.0, 2.0]),
            Err(Error::DimMismatch { expected: 3, got: 2 })
        ));
    }

    #[test]
    fn graph_matches_direct() {
        let head = LinearHead::<f64>::new(4, 9);
        let e = Vector::from_f64(&[0.5, -1.0, 2.0, 0.25]).unwrap();
        let mut g = Graph::new();
        let x = g.input(Tensor::new(vec![1, 4], e.values().to_vec()).unwrap());
        let y = head.forward(&mut g, x).unwrap();
        let direct = head.predict(&e).unwrap();
        assert!((g.value(y).data()[0] - direct).abs() < 1e-12);
    }
}
