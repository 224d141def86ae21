//! Multimodal alignment objectives.
//!
//! Every loss is built on a [`Graph`] so that the same code path yields the
//! value and the gradients with respect to the embeddings. Losses are sums
//! over the batch, not per-sample means.

use crate::autodiff::{Graph, Var};
use crate::embedding::EmbeddingBatch;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const DEFAULT_TAU: f64 = 0.07;
pub const DEFAULT_LAMBDA: f64 = 0.005;
/// Bounds applied to a learnable temperature.
pub const TAU_MIN: f64 = 0.01;
pub const TAU_MAX: f64 = 1.0;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClipParams<T> {
    tau: T,
}

impl<T: Scalar> ClipParams<T> {
    pub fn new(tau: T) -> Result<Self> {
        if !(tau > T::zero()) || !tau.is_finite() {
            return Err(Error::Config(format!("temperature must be positive, got {tau}")));
        }
        Ok(Self { tau })
    }

    pub fn tau(&self) -> T {
        self.tau
    }
}

impl<T: Scalar> Default for ClipParams<T> {
    fn default() -> Self {
        Self {
            tau: T::lit(DEFAULT_TAU),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BarlowParams<T> {
    lambda: T,
}

impl<T: Scalar> BarlowParams<T> {
    pub fn new(lambda: T) -> Result<Self> {
        if !(lambda >= T::zero()) || !lambda.is_finite() {
            return Err(Error::Config(format!("lambda must be nonnegative, got {lambda}")));
        }
        Ok(Self { lambda })
    }

    pub fn lambda(&self) -> T {
        self.lambda
    }
}

impl<T: Scalar> Default for BarlowParams<T> {
    fn default() -> Self {
        Self {
            lambda: T::lit(DEFAULT_LAMBDA),
        }
    }
}

/// Unordered modality pairs summed by the all-pairs objective.
pub fn allpairs_terms(n: usize) -> Vec<(usize, usize)> {
    (0..n)
        .flat_map(|i| (i + 1..n).map(move |j| (i, j)))
        .collect()
}

/// Anchor-to-other pairs; modality 0 is the anchor.
pub fn anchored_terms(n: usize) -> Vec<(usize, usize)> {
    (1..n).map(|j| (0, j)).collect()
}

fn check_same(g: &Graph<impl Scalar>, vars: &[Var]) -> Result<()> {
    let first = g.value(vars[0]);
    for &v in &vars[1..] {
        let t = g.value(v);
        if t.cols() != first.cols() {
            return Err(Error::DimMismatch {
                expected: first.cols(),
                got: t.cols(),
            });
        }
        if t.rows() != first.rows() {
            return Err(Error::BatchMismatch {
                expected: first.rows(),
                got: t.rows(),
            });
        }
    }
    Ok(())
}

/// `−Σ_i log softmax(logits_i)[target_i]`
fn info_nce<T: Scalar>(g: &mut Graph<T>, logits: Var, targets: &[usize]) -> Result<Var> {
    let ls = g.log_softmax_rows(logits);
    let picked = g.pick_cols(ls, targets)?;
    let s = g.sum(picked);
    Ok(g.scale(s, -T::one()))
}

/// Symmetrized contrastive loss between two `[N,d]` embedding nodes.
/// `inv_tau` is a one-element node holding `1/τ`.
pub fn clip_graph<T: Scalar>(g: &mut Graph<T>, a: Var, b: Var, inv_tau: Var) -> Result<Var> {
    check_same(g, &[a, b])?;
    let an = g.normalize_rows(a)?;
    let bn = g.normalize_rows(b)?;
    let bt = g.transpose(bn);
    let sims = g.matmul(an, bt)?;
    let logits = g.mul_scalar(sims, inv_tau)?;
    let n = g.value(a).rows();
    let diag: Vec<usize> = (0..n).collect();
    let l_ab = info_nce(g, logits, &diag)?;
    let logits_t = g.transpose(logits);
    let l_ba = info_nce(g, logits_t, &diag)?;
    let total = g.add(l_ab, l_ba)?;
    Ok(g.scale(total, T::lit(0.5)))
}

pub fn allpairs_graph<T: Scalar>(g: &mut Graph<T>, mods: &[Var], inv_tau: Var) -> Result<Var> {
    if mods.len() < 2 {
        return Err(Error::TooFewModalities(mods.len()));
    }
    check_same(g, mods)?;
    sum_terms(g, &allpairs_terms(mods.len()), mods, inv_tau)
}

pub fn anchored_graph<T: Scalar>(
    g: &mut Graph<T>,
    anchor: Var,
    others: &[Var],
    inv_tau: Var,
) -> Result<Var> {
    if others.is_empty() {
        return Err(Error::NoOtherModalities);
    }
    let mut mods = vec![anchor];
    mods.extend_from_slice(others);
    check_same(g, &mods)?;
    sum_terms(g, &anchored_terms(mods.len()), &mods, inv_tau)
}

fn sum_terms<T: Scalar>(
    g: &mut Graph<T>,
    pairs: &[(usize, usize)],
    mods: &[Var],
    inv_tau: Var,
) -> Result<Var> {
    let mut total: Option<Var> = None;
    for &(i, j) in pairs {
        let term = clip_graph(g, mods[i], mods[j], inv_tau)?;
        total = Some(match total {
            None => term,
            Some(t) => g.add(t, term)?,
        });
    }
    Ok(total.expect("at least one pair"))
}

/// Three-modality contrastive loss over normalized three-way products. For
/// query row `i` of one modality the softmax runs over all `N²` row pairs of
/// the other two.
pub fn tensor_clip_graph<T: Scalar>(
    g: &mut Graph<T>,
    a: Var,
    b: Var,
    c: Var,
    inv_tau: Var,
) -> Result<Var> {
    check_same(g, &[a, b, c])?;
    let an = g.normalize_rows(a)?;
    let bn = g.normalize_rows(b)?;
    let cn = g.normalize_rows(c)?;
    let n = g.value(a).rows();
    let matched: Vec<usize> = (0..n).map(|i| i * n + i).collect();
    let mut terms = Vec::with_capacity(3);
    for (q, r, s) in [(an, bn, cn), (bn, an, cn), (cn, an, bn)] {
        let sims = g.threeway(q, r, s)?;
        let logits = g.mul_scalar(sims, inv_tau)?;
        terms.push(info_nce(g, logits, &matched)?);
    }
    let s = g.add(terms[0], terms[1])?;
    let s = g.add(s, terms[2])?;
    Ok(g.scale(s, T::one() / T::lit(3.0)))
}

/// Builds `C[i, j·d + k]` from three `[N,d]` embedding nodes: columns are
/// mean-centered over the batch then scaled to unit norm.
pub fn cross_correlation_graph<T: Scalar>(g: &mut Graph<T>, z: [Var; 3]) -> Result<Var> {
    check_same(g, &z)?;
    let mut cols = Vec::with_capacity(3);
    for v in z {
        let centered = g.center_cols(v)?;
        let normed = g.normalize_cols(centered)?;
        cols.push(g.transpose(normed));
    }
    g.threeway(cols[0], cols[1], cols[2])
}

/// Index classes of the `d×d×d` cube: all equal, exactly two equal, all
/// distinct.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum IndexClass {
    HyperDiagonal,
    PartialMatch,
    Distinct,
}

pub fn classify(i: usize, j: usize, k: usize) -> IndexClass {
    match (i == j, j == k, i == k) {
        (true, true, _) => IndexClass::HyperDiagonal,
        (false, false, false) => IndexClass::Distinct,
        _ => IndexClass::PartialMatch,
    }
}

pub fn barlow3d_graph<T: Scalar>(
    g: &mut Graph<T>,
    z: [Var; 3],
    params: &BarlowParams<T>,
) -> Result<Var> {
    let c = cross_correlation_graph(g, z)?;
    let d = g.value(z[0]).cols();
    let mut target = Tensor::zeros(&[d, d * d]);
    let mut weight = Tensor::zeros(&[d, d * d]);
    for i in 0..d {
        for j in 0..d {
            for k in 0..d {
                let idx = i * d * d + j * d + k;
                let (t, w) = match classify(i, j, k) {
                    IndexClass::HyperDiagonal => (T::one(), T::one()),
                    IndexClass::PartialMatch => (T::lit(0.5), T::one()),
                    IndexClass::Distinct => (T::zero(), params.lambda()),
                };
                target.data_mut()[idx] = -t;
                weight.data_mut()[idx] = w;
            }
        }
    }
    let diff = g.add_const(c, &target)?;
    let sq = g.square(diff);
    let weighted = g.mul_const(sq, &weight)?;
    Ok(g.sum(weighted))
}

/// An alignment objective together with its hyperparameters. Batches are
/// passed in modality order; for [`Objective::Anchored`] the first batch is
/// the anchor.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Objective<T> {
    Clip(ClipParams<T>),
    AllPairs(ClipParams<T>),
    Anchored(ClipParams<T>),
    TensorClip(ClipParams<T>),
    Barlow3d(BarlowParams<T>),
}

impl<T: Scalar> Objective<T> {
    /// Adds this objective to `g`. `inv_tau` is ignored by the Barlow loss.
    pub fn build(&self, g: &mut Graph<T>, mods: &[Var], inv_tau: Option<Var>) -> Result<Var> {
        let tau_node = |g: &mut Graph<T>, p: &ClipParams<T>| {
            inv_tau.unwrap_or_else(|| g.input(Tensor::scalar(T::one() / p.tau())))
        };
        let need = |k: usize| {
            if mods.len() != k {
                Err(Error::TooFewModalities(mods.len()))
            } else {
                Ok(())
            }
        };
        match self {
            Objective::Clip(p) => {
                need(2)?;
                let t = tau_node(g, p);
                clip_graph(g, mods[0], mods[1], t)
            }
            Objective::AllPairs(p) => {
                let t = tau_node(g, p);
                allpairs_graph(g, mods, t)
            }
            Objective::Anchored(p) => {
                let t = tau_node(g, p);
                if mods.is_empty() {
                    return Err(Error::NoOtherModalities);
                }
                anchored_graph(g, mods[0], &mods[1..], t)
            }
            Objective::TensorClip(p) => {
                need(3)?;
                let t = tau_node(g, p);
                tensor_clip_graph(g, mods[0], mods[1], mods[2], t)
            }
            Objective::Barlow3d(p) => {
                need(3)?;
                barlow3d_graph(g, [mods[0], mods[1], mods[2]], p)
            }
        }
    }

    /// Loss value and its gradient with respect to every batch.
    pub fn value_and_grads(&self, batches: &[&EmbeddingBatch<T>]) -> Result<(T, Vec<Tensor<T>>)> {
        check_batches(batches)?;
        let mut g = Graph::new();
        let vars: Vec<Var> = batches.iter().map(|b| g.leaf(b.as_tensor().clone())).collect();
        let loss = self.build(&mut g, &vars, None)?;
        g.backward(loss)?;
        let grads = vars.iter().map(|&v| g.grad(v)).collect::<Result<_>>()?;
        Ok((g.value(loss).data()[0], grads))
    }

    pub fn value(&self, batches: &[&EmbeddingBatch<T>]) -> Result<T> {
        check_batches(batches)?;
        let mut g = Graph::new();
        let vars: Vec<Var> = batches.iter().map(|b| g.input(b.as_tensor().clone())).collect();
        let loss = self.build(&mut g, &vars, None)?;
        Ok(g.value(loss).data()[0])
    }
}

fn check_batches<T: Scalar>(batches: &[&EmbeddingBatch<T>]) -> Result<()> {
    if let Some(first) = batches.first() {
        for b in &batches[1..] {
            first.check_same_shape(b)?;
        }
    }
    Ok(())
}

pub fn clip_loss<T: Scalar>(
    a: &EmbeddingBatch<T>,
    b: &EmbeddingBatch<T>,
    p: &ClipParams<T>,
) -> Result<T> {
    Objective::Clip(*p).value(&[a, b])
}

pub fn allpairs_clip_loss<T: Scalar>(batches: &[EmbeddingBatch<T>], p: &ClipParams<T>) -> Result<T> {
    if batches.len() < 2 {
        return Err(Error::TooFewModalities(batches.len()));
    }
    let refs: Vec<&EmbeddingBatch<T>> = batches.iter().collect();
    Objective::AllPairs(*p).value(&refs)
}

pub fn anchored_clip_loss<T: Scalar>(
    anchor: &EmbeddingBatch<T>,
    others: &[EmbeddingBatch<T>],
    p: &ClipParams<T>,
) -> Result<T> {
    if others.is_empty() {
        return Err(Error::NoOtherModalities);
    }
    let mut refs = vec![anchor];
    refs.extend(others.iter());
    Objective::Anchored(*p).value(&refs)
}

pub fn tensor_clip_loss<T: Scalar>(
    a: &EmbeddingBatch<T>,
    b: &EmbeddingBatch<T>,
    c: &EmbeddingBatch<T>,
    p: &ClipParams<T>,
) -> Result<T> {
    Objective::TensorClip(*p).value(&[a, b, c])
}

pub fn barlow3d_loss<T: Scalar>(
    z1: &EmbeddingBatch<T>,
    z2: &EmbeddingBatch<T>,
    z3: &EmbeddingBatch<T>,
    p: &BarlowParams<T>,
) -> Result<T> {
    Objective::Barlow3d(*p).value(&[z1, z2, z3])
}

/// Generalized cross-correlation tensor of three modalities.
#[derive(Clone, Debug, PartialEq)]
pub struct CrossCorrTensor<T> {
    d: usize,
    entries: Vec<T>,
}

impl<T: Scalar> CrossCorrTensor<T> {
    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn get(&self, i: usize, j: usize, k: usize) -> T {
        self.entries[(i * self.d + j) * self.d + k]
    }

    pub fn entries(&self) -> &[T] {
        &self.entries
    }
}

pub fn cross_correlation_tensor<T: Scalar>(
    z1: &EmbeddingBatch<T>,
    z2: &EmbeddingBatch<T>,
    z3: &EmbeddingBatch<T>,
) -> Result<CrossCorrTensor<T>> {
    check_batches(&[z1, z2, z3])?;
    if z1.n() < 2 {
        return Err(Error::BatchTooSmall(z1.n()));
    }
    let mut g = Graph::new();
    let vars = [z1, z2, z3].map(|z| g.input(z.as_tensor().clone()));
    let c = cross_correlation_graph(&mut g, vars)?;
    Ok(CrossCorrTensor {
        d: z1.d(),
        entries: g.value(c).data().to_vec(),
    })
}

/// Contrastive loss over `n ≥ 2` modalities using the `n`-way normalized
/// product as similarity. Forward only; for `n = 3` it coincides with
/// [`tensor_clip_loss`] and for `n = 2` with [`clip_loss`].
pub fn multiway_clip_loss<T: Scalar>(batches: &[EmbeddingBatch<T>], p: &ClipParams<T>) -> Result<T> {
    let m = batches.len();
    if m < 2 {
        return Err(Error::TooFewModalities(m));
    }
    check_batches(&batches.iter().collect::<Vec<_>>())?;
    let (n, d) = (batches[0].n(), batches[0].d());
    let normed: Vec<Vec<Vec<T>>> = batches
        .iter()
        .map(|b| {
            (0..b.n())
                .map(|i| {
                    let r = b.row(i);
                    let nr = crate::embedding::norm(r);
                    if nr.as_f64() <= crate::scalar::NORM_EPS {
                        Err(Error::ZeroNorm)
                    } else {
                        Ok(r.iter().map(|&x| x / nr).collect())
                    }
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;
    let inv_tau = T::one() / p.tau();
    let combos = n.pow((m - 1) as u32);
    let mut total = T::zero();
    let mut logits = vec![T::zero(); combos];
    for q in 0..m {
        let others: Vec<usize> = (0..m).filter(|&o| o != q).collect();
        for i in 0..n {
            let mut matched = 0;
            for (c, logit) in logits.iter_mut().enumerate() {
                let mut rows = Vec::with_capacity(m - 1);
                let mut rem = c;
                for _ in 0..m - 1 {
                    rows.push(rem % n);
                    rem /= n;
                }
                if rows.iter().all(|&r| r == i) {
                    matched = c;
                }
                let mut s = T::zero();
                for l in 0..d {
                    let mut prod = normed[q][i][l];
                    for (slot, &o) in others.iter().enumerate() {
                        prod *= normed[o][rows[slot]][l];
                    }
                    s += prod;
                }
                *logit = s * inv_tau;
            }
            total += crate::tensor::log_sum_exp(&logits) - logits[matched];
        }
    }
    Ok(total / T::from_usize_lossy(m))
}

/// Cross-correlation loss over `n ≥ 2` modalities on the `dⁿ` correlation
/// tensor: target 1 where all indices agree, ½ where some but not all agree
/// and 0 (weighted by λ) where all differ. Forward only; for `n = 3` it
/// coincides with [`barlow3d_loss`].
pub fn multiway_barlow_loss<T: Scalar>(
    batches: &[EmbeddingBatch<T>],
    p: &BarlowParams<T>,
) -> Result<T> {
    let m = batches.len();
    if m < 2 {
        return Err(Error::TooFewModalities(m));
    }
    check_batches(&batches.iter().collect::<Vec<_>>())?;
    let (n, d) = (batches[0].n(), batches[0].d());
    let cols: Vec<Vec<Vec<T>>> = batches
        .iter()
        .map(|b| {
            let centered = crate::embedding::mean_center(b)?;
            (0..d)
                .map(|j| {
                    let col: Vec<T> = (0..n).map(|r| centered.row(r)[j]).collect();
                    let nc = crate::embedding::norm(&col);
                    if nc.as_f64() <= crate::scalar::NORM_EPS {
                        return Err(Error::DegenerateColumn(j));
                    }
                    Ok(col.into_iter().map(|x| x / nc).collect())
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;
    let mut total = T::zero();
    let mut idx = vec![0usize; m];
    for flat in 0..d.pow(m as u32) {
        let mut rem = flat;
        for slot in idx.iter_mut() {
            *slot = rem % d;
            rem /= d;
        }
        let mut c = T::zero();
        for r in 0..n {
            let mut prod = T::one();
            for (mo, &f) in idx.iter().enumerate() {
                prod *= cols[mo][f][r];
            }
            c += prod;
        }
        let mut distinct = idx.clone();
        distinct.sort_unstable();
        distinct.dedup();
        total += if distinct.len() == 1 {
            (T::one() - c) * (T::one() - c)
        } else if distinct.len() == m {
            p.lambda() * c * c
        } else {
            (T::lit(0.5) - c) * (T::lit(0.5) - c)
        };
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn onehot2() -> EmbeddingBatch<f64> {
        EmbeddingBatch::from_f64_rows(&[vec![1., 0.], vec![0., 1.]]).unwrap()
    }

    fn col(xs: &[f64]) -> EmbeddingBatch<f64> {
        EmbeddingBatch::from_f64_rows(&xs.iter().map(|&x| vec![x]).collect::<Vec<_>>()).unwrap()
    }

    fn tau(t: f64) -> ClipParams<f64> {
        ClipParams::new(t).unwrap()
    }

    #[test]
    fn clip_single_pair_is_zero() {
        let a = EmbeddingBatch::from_f64_rows(&[vec![0.3, -1.0, 2.0]]).unwrap();
        let b = EmbeddingBatch::from_f64_rows(&[vec![-5.0, 1.0, 0.1]]).unwrap();
        assert_eq!(clip_loss(&a, &b, &tau(0.07)).unwrap(), 0.0);
    }

    #[test]
    fn clip_onehot_closed_form() {
        let v = clip_loss(&onehot2(), &onehot2(), &tau(1.0)).unwrap();
        let e = std::f64::consts::E;
        let expected = -2.0 * (e / (e + 1.0)).ln();
        assert!((v - expected).abs() < 1e-12);
        assert!((v - 0.626523).abs() < 1e-6);
    }

    #[test]
    fn clip_uniform_limit() {
        let eye: Vec<Vec<f64>> = (0..4)
            .map(|i| (0..4).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
            .collect();
        let a = EmbeddingBatch::from_f64_rows(&eye).unwrap();
        // Summed over 4 rows, each term tends to log 4 as τ grows.
        let v = clip_loss(&a, &a, &tau(1e3)).unwrap() / 4.0;
        assert!((v - 4f64.ln()).abs() < 1e-3);
    }

    #[test]
    fn aggregate_counts() {
        assert_eq!(allpairs_terms(2).len(), 1);
        assert_eq!(allpairs_terms(4).len(), 6);
        for n in 2..=5 {
            assert_eq!(allpairs_terms(n).len(), (n * n - n) / 2);
            assert_eq!(anchored_terms(n).len(), n - 1);
        }
        let three = vec![onehot2(), onehot2(), onehot2()];
        let v = allpairs_clip_loss(&three, &tau(1.0)).unwrap();
        assert!((v - 1.879570).abs() < 1e-6);
        let v = anchored_clip_loss(&onehot2(), &three[1..], &tau(1.0)).unwrap();
        assert!((v - 1.253046).abs() < 1e-6);
        let two = vec![onehot2(), onehot2()];
        assert_eq!(
            allpairs_clip_loss(&two, &tau(1.0)).unwrap(),
            clip_loss(&two[0], &two[1], &tau(1.0)).unwrap()
        );
        assert!(matches!(
            allpairs_clip_loss(&two[..1], &tau(1.0)),
            Err(Error::TooFewModalities(1))
        ));
        assert!(matches!(
            anchored_clip_loss(&two[0], &[], &tau(1.0)),
            Err(Error::NoOtherModalities)
        ));
    }

    #[test]
    fn tensor_clip_examples() {
        let one = EmbeddingBatch::from_f64_rows(&[vec![1.0, 2.0]]).unwrap();
        assert_eq!(tensor_clip_loss(&one, &one, &one, &tau(0.5)).unwrap(), 0.0);
        let v = tensor_clip_loss(&onehot2(), &onehot2(), &onehot2(), &tau(1.0)).unwrap();
        let e = std::f64::consts::E;
        assert!((v + 2.0 * (e / (e + 3.0)).ln()).abs() < 1e-12);
        assert!((v - 1.4873368).abs() < 1e-6);
    }

    #[test]
    fn cross_correlation_examples() {
        let c = cross_correlation_tensor(&col(&[1., -1.]), &col(&[1., -1.]), &col(&[1., -1.])).unwrap();
        assert_eq!(c.entries(), &[0.0]);
        let z = col(&[2., -1., -1.]);
        let c = cross_correlation_tensor(&z, &z, &z).unwrap();
        assert!((c.get(0, 0, 0) - 6.0 / 6f64.powf(1.5)).abs() < 1e-12);
        let z2 = EmbeddingBatch::<f64>::from_f64_rows(&[vec![1., 1.], vec![-1., -1.]]).unwrap();
        let c = cross_correlation_tensor(&z2, &z2, &z2).unwrap();
        assert!(c.entries().iter().all(|&x| x == 0.0) && c.entries().len() == 8);
        let flat = col(&[1., 1.]);
        assert!(matches!(
            cross_correlation_tensor(&flat, &flat, &flat),
            Err(Error::DegenerateColumn(0))
        ));
    }

    #[test]
    fn barlow_examples() {
        let z = col(&[1., -1.]);
        for l in [0.0, 0.005, 3.0] {
            let p = BarlowParams::new(l).unwrap();
            assert_eq!(barlow3d_loss(&z, &z, &z, &p).unwrap(), 1.0);
        }
        let z = col(&[2., -1., -1.]);
        let v = barlow3d_loss(&z, &z, &z, &BarlowParams::default()).unwrap();
        assert!((v - (1.0 - 1.0 / 6f64.sqrt()).powi(2)).abs() < 1e-12);
        assert!((v - 0.350170).abs() < 1e-6);
    }

    #[test]
    fn index_classes_partition_cube() {
        let d = 4;
        let mut counts = [0usize; 3];
        for i in 0..d {
            for j in 0..d {
                for k in 0..d {
                    counts[classify(i, j, k) as usize] += 1;
                }
            }
        }
        assert_eq!(counts, [d, 3 * d * (d - 1), d * (d - 1) * (d - 2)]);
    }

    #[test]
    fn errors_propagate() {
        let a = onehot2();
        let b = EmbeddingBatch::from_f64_rows(&[vec![1., 0., 0.], vec![0., 1., 0.]]).unwrap();
        assert!(matches!(clip_loss(&a, &b, &tau(1.0)), Err(Error::DimMismatch { .. })));
        let c = EmbeddingBatch::from_f64_rows(&[vec![1., 0.]]).unwrap();
        assert!(matches!(clip_loss(&a, &c, &tau(1.0)), Err(Error::BatchMismatch { .. })));
        let z = EmbeddingBatch::from_f64_rows(&[vec![1., 0.], vec![0., 0.]]).unwrap();
        assert!(matches!(clip_loss(&a, &z, &tau(1.0)), Err(Error::ZeroNorm)));
        assert!(ClipParams::new(0.0).is_err());
        assert!(BarlowParams::new(-1.0).is_err());
    }

    #[test]
    fn multiway_generalizations_agree_at_three() {
        let mk = |s: u64| {
            EmbeddingBatch::from_tensor(crate::testutil::seeded_tensor::<f64>(&[4, 3], s, 1.0)).unwrap()
        };
        let (a, b, c) = (mk(1), mk(2), mk(3));
        let p = tau(0.5);
        let direct = tensor_clip_loss(&a, &b, &c, &p).unwrap();
        let general = multiway_clip_loss(&[a.clone(), b.clone(), c.clone()], &p).unwrap();
        assert!((direct - general).abs() < 1e-10 * direct.abs().max(1.0));
        let pair = multiway_clip_loss(&[a.clone(), b.clone()], &p).unwrap();
        assert!((pair - clip_loss(&a, &b, &p).unwrap()).abs() < 1e-10);
        let bp = BarlowParams::new(0.1).unwrap();
        let direct = barlow3d_loss(&a, &b, &c, &bp).unwrap();
        let general = multiway_barlow_loss(&[a, b, c], &bp).unwrap();
        assert!((direct - general).abs() < 1e-10 * direct.abs().max(1.0));
    }
}
