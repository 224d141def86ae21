//! Embedding vectors, batches of them, and the similarity measures used by
//! the alignment objectives.

use crate::error::{Error, Result};
use crate::scalar::{Scalar, NORM_EPS};
use crate::tensor::Tensor;

/// A finite, non-empty real vector.
#[derive(Clone, Debug, PartialEq)]
pub struct Vector<T>(Vec<T>);

impl<T: Scalar> Vector<T> {
    pub fn new(values: Vec<T>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::DimMismatch {
                expected: 1,
                got: 0,
            });
        }
        if !values.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("vector"));
        }
        Ok(Self(values))
    }

    pub fn from_f64(values: &[f64]) -> Result<Self> {
        Self::new(values.iter().map(|&v| T::lit(v)).collect())
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn values(&self) -> &[T] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<T> {
        self.0
    }

    pub fn norm(&self) -> T {
        norm(&self.0)
    }
}

impl<T> AsRef<[T]> for Vector<T> {
    fn as_ref(&self) -> &[T] {
        &self.0
    }
}

/// `N` embeddings of a shared dimension `d`, stored as an `[N, d]` matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingBatch<T> {
    matrix: Tensor<T>,
}

impl<T: Scalar> EmbeddingBatch<T> {
    pub fn from_tensor(matrix: Tensor<T>) -> Result<Self> {
        if matrix.shape().len() != 2 {
            return Err(Error::ShapeMismatch(format!(
                "embedding batch must be 2-D, got {:?}",
                matrix.shape()
            )));
        }
        if matrix.rows() == 0 {
            return Err(Error::BatchTooSmall(0));
        }
        if matrix.cols() == 0 {
            return Err(Error::DimMismatch {
                expected: 1,
                got: 0,
            });
        }
        if !matrix.is_finite() {
            return Err(Error::NonFinite("embedding batch"));
        }
        Ok(Self { matrix })
    }

    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        Self::from_tensor(Tensor::from_rows(rows)?)
    }

    pub fn from_vectors(rows: &[Vector<T>]) -> Result<Self> {
        let rows: Vec<Vec<T>> = rows.iter().map(|v| v.values().to_vec()).collect();
        Self::from_rows(&rows)
    }

    pub fn from_f64_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let rows: Vec<Vec<T>> = rows
            .iter()
            .map(|r| r.iter().map(|&v| T::lit(v)).collect())
            .collect();
        Self::from_rows(&rows)
    }

    /// Batch size `N`.
    pub fn n(&self) -> usize {
        self.matrix.rows()
    }

    /// Embedding dimension `d`.
    pub fn d(&self) -> usize {
        self.matrix.cols()
    }

    pub fn row(&self, i: usize) -> &[T] {
        self.matrix.row(i)
    }

    pub fn as_tensor(&self) -> &Tensor<T> {
        &self.matrix
    }

    pub fn into_tensor(self) -> Tensor<T> {
        self.matrix
    }

    /// Rows reordered so that row `i` of the result is row `perm[i]` here.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let rows: Vec<Vec<T>> = perm.iter().map(|&p| self.row(p).to_vec()).collect();
        Self::from_rows(&rows).expect("permutation preserves shape")
    }

    pub fn subset(&self, idx: &[usize]) -> Result<Self> {
        let rows: Vec<Vec<T>> = idx.iter().map(|&p| self.row(p).to_vec()).collect();
        Self::from_rows(&rows)
    }

    pub(crate) fn check_same_shape(&self, other: &Self) -> Result<()> {
        if self.d() != other.d() {
            return Err(Error::DimMismatch {
                expected: self.d(),
                got: other.d(),
            });
        }
        if self.n() != other.n() {
            return Err(Error::BatchMismatch {
                expected: self.n(),
                got: other.n(),
            });
        }
        Ok(())
    }
}

pub(crate) fn norm<T: Scalar>(v: &[T]) -> T {
    v.iter().map(|&x| x * x).sum::<T>().sqrt()
}

fn checked_norm<T: Scalar>(v: &[T]) -> Result<T> {
    let n = norm(v);
    if n.as_f64() <= NORM_EPS {
        return Err(Error::ZeroNorm);
    }
    Ok(n)
}

fn check_dims(dims: &[usize]) -> Result<()> {
    let first = dims[0];
    for &d in &dims[1..] {
        if d != first {
            return Err(Error::DimMismatch {
                expected: first,
                got: d,
            });
        }
    }
    Ok(())
}

pub fn l2_normalize<T: Scalar>(v: &Vector<T>) -> Result<Vector<T>> {
    let n = checked_norm(v.values())?;
    Ok(Vector(v.values().iter().map(|&x| x / n).collect()))
}

pub fn cosine_sim<T: Scalar>(a: &Vector<T>, b: &Vector<T>) -> Result<T> {
    check_dims(&[a.dim(), b.dim()])?;
    cosine_slices(a.values(), b.values())
}

pub(crate) fn cosine_slices<T: Scalar>(a: &[T], b: &[T]) -> Result<T> {
    let na = checked_norm(a)?;
    let nb = checked_norm(b)?;
    let dot: T = a.iter().zip(b).map(|(&x, &y)| x * y).sum();
    Ok((dot / (na * nb)).max(-T::one()).min(T::one()))
}

/// Normalized three-way product `Σ_l a_l b_l c_l / (‖a‖‖b‖‖c‖)`.
pub fn threeway_sim<T: Scalar>(a: &Vector<T>, b: &Vector<T>, c: &Vector<T>) -> Result<T> {
    check_dims(&[a.dim(), b.dim(), c.dim()])?;
    let na = checked_norm(a.values())?;
    let nb = checked_norm(b.values())?;
    let nc = checked_norm(c.values())?;
    // Sort the norms so the denominator does not depend on argument order.
    let mut norms = [na, nb, nc];
    norms.sort_by(|x, y| x.partial_cmp(y).expect("finite norms"));
    let prod: T = a
        .values()
        .iter()
        .zip(b.values())
        .zip(c.values())
        .map(|((&x, &y), &z)| x * y * z)
        .sum();
    Ok(prod / (norms[0] * norms[1] * norms[2]))
}

/// Subtracts each feature column's batch mean.
pub fn mean_center<T: Scalar>(z: &EmbeddingBatch<T>) -> Result<EmbeddingBatch<T>> {
    let (n, d) = (z.n(), z.d());
    if n < 2 {
        return Err(Error::BatchTooSmall(n));
    }
    let mut means = vec![T::zero(); d];
    for i in 0..n {
        for (m, &v) in means.iter_mut().zip(z.row(i)) {
            *m += v;
        }
    }
    let inv = T::one() / T::from_usize_lossy(n);
    for m in &mut means {
        *m *= inv;
    }
    let rows: Vec<Vec<T>> = (0..n)
        .map(|i| z.row(i).iter().zip(&means).map(|(&v, &m)| v - m).collect())
        .collect();
    EmbeddingBatch::from_rows(&rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn v(x: &[f64]) -> Vector<f64> {
        Vector::from_f64(x).unwrap()
    }

    #[test]
    fn normalize_examples() {
        assert_eq!(l2_normalize(&v(&[3., 4.])).unwrap().values(), &[0.6, 0.8]);
        assert_eq!(l2_normalize(&v(&[1., 0., 0.])).unwrap().values(), &[1., 0., 0.]);
        let h = 1.0 / 2f64.sqrt();
        let u = l2_normalize(&v(&[1., 1.])).unwrap();
        assert!((u.values()[0] - h).abs() < 1e-15 && (u.values()[1] - h).abs() < 1e-15);
        assert!((u.values()[0] - 0.707107).abs() < 1e-6);
        assert!(matches!(l2_normalize(&v(&[0., 0.])), Err(Error::ZeroNorm)));
        assert!(matches!(l2_normalize(&v(&[1e-13, 0.])), Err(Error::ZeroNorm)));
    }

    #[test]
    fn cosine_examples() {
        assert_eq!(cosine_sim(&v(&[1., 0.]), &v(&[1., 0.])).unwrap(), 1.0);
        assert_eq!(cosine_sim(&v(&[1., 0.]), &v(&[0., 1.])).unwrap(), 0.0);
        let c = cosine_sim(&v(&[1., 1.]), &v(&[1., 0.])).unwrap();
        assert!((c - 1.0 / 2f64.sqrt()).abs() < 1e-15);
        assert!(matches!(
            cosine_sim(&v(&[1., 0.]), &v(&[1., 0., 0.])),
            Err(Error::DimMismatch { .. })
        ));
        assert!(matches!(
            cosine_sim(&v(&[0., 0.]), &v(&[1., 0.])),
            Err(Error::ZeroNorm)
        ));
    }

    #[test]
    fn threeway_examples() {
        let e1 = v(&[1., 0.]);
        let e2 = v(&[0., 1.]);
        assert_eq!(threeway_sim(&e1, &e1, &e1).unwrap(), 1.0);
        assert_eq!(threeway_sim(&e1, &e1, &e2).unwrap(), 0.0);
        let u = v(&[1., 1.]);
        // 2 · (1/√2)³
        let expected = 2.0 * (1.0 / 2f64.sqrt()).powi(3);
        let got = threeway_sim(&u, &u, &u).unwrap();
        assert!((got - expected).abs() < 1e-15);
        assert!((got - 0.707107).abs() < 1e-6);
    }

    #[test]
    fn mean_center_examples() {
        let col = |xs: &[f64]| {
            EmbeddingBatch::<f64>::from_f64_rows(&xs.iter().map(|&x| vec![x]).collect::<Vec<_>>())
                .unwrap()
        };
        let c = mean_center(&col(&[1., 2., 3.])).unwrap();
        assert_eq!(c.as_tensor().data(), &[-1., 0., 1.]);
        let c = mean_center(&col(&[1., -1.])).unwrap();
        assert_eq!(c.as_tensor().data(), &[1., -1.]);
        let c = mean_center(&col(&[2., -1., -1.])).unwrap();
        assert_eq!(c.as_tensor().data(), &[2., -1., -1.]);
        assert!(matches!(mean_center(&col(&[1.])), Err(Error::BatchTooSmall(1))));
    }

    fn arb_vec(d: usize) -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(-3.0f64..3.0, d).prop_filter("norm", |v| norm(v) > 0.1)
    }

    proptest! {
        #[test]
        fn cosine_scale_invariant(a in arb_vec(6), b in arb_vec(6), s in 0.01f64..100.0, t in 0.01f64..100.0) {
            let base = cosine_sim(&v(&a), &v(&b)).unwrap();
            let sa: Vec<f64> = a.iter().map(|x| x * s).collect();
            let tb: Vec<f64> = b.iter().map(|x| x * t).collect();
            let scaled = cosine_sim(&v(&sa), &v(&tb)).unwrap();
            prop_assert!((base - scaled).abs() < 1e-9);
            prop_assert!((-1.0..=1.0).contains(&base));
            prop_assert_eq!(base, cosine_sim(&v(&b), &v(&a)).unwrap());
        }

        #[test]
        fn threeway_permutation_invariant(a in arb_vec(5), b in arb_vec(5), c in arb_vec(5)) {
            let (a, b, c) = (v(&a), v(&b), v(&c));
            let base = threeway_sim(&a, &b, &c).unwrap();
            for (x, y, z) in [(&a, &c, &b), (&b, &a, &c), (&b, &c, &a), (&c, &a, &b), (&c, &b, &a)] {
                prop_assert!((threeway_sim(x, y, z).unwrap() - base).abs() < 1e-12);
            }
            prop_assert!(base.abs() <= 1.0 + 1e-12);
        }

        #[test]
        fn mean_center_idempotent(rows in prop::collection::vec(prop::collection::vec(-5.0f64..5.0, 3), 2..8)) {
            let z = EmbeddingBatch::<f64>::from_f64_rows(&rows).unwrap();
            let once = mean_center(&z).unwrap();
            let twice = mean_center(&once).unwrap();
            prop_assert!(once.as_tensor().max_abs_diff(twice.as_tensor()) < 1e-9);
            for j in 0..3 {
                let s: f64 = (0..once.n()).map(|i| once.row(i)[j]).sum();
                prop_assert!(s.abs() < 1e-9);
            }
        }
    }
}
