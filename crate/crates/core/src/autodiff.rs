//! Reverse-mode differentiation over a fixed set of dense operations.
//!
//! A [`Graph`] records every operation of a forward pass as a node holding
//! its output value. [`Graph::backward`] walks the nodes in reverse and
//! accumulates adjoints. The op set covers what the encoders and alignment
//! losses use and nothing more.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::scalar::{Scalar, NORM_EPS};
use crate::tensor::{matmul_acc, matmul_nt_acc, matmul_tn_acc, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Named parameter tensors, iterated in name order.
pub type ParamSet<T> = BTreeMap<String, Tensor<T>>;

#[derive(Clone, Debug)]
enum Op<T> {
    Input,
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    AddConst(Var),
    MulConst(Var, Tensor<T>),
    Scale(Var, T),
    MulScalar(Var, Var),
    Square(Var),
    Exp(Var),
    Silu(Var),
    Tanh(Var),
    Clamp(Var, T, T),
    Sum(Var),
    MeanRows(Var),
    Transpose(Var),
    Reshape(Var),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    GatherRows(Var, Vec<usize>),
    ScatterMean(Var, Vec<usize>, Vec<usize>),
    NormalizeRows(Var),
    NormalizeCols(Var),
    CenterCols(Var),
    LayerNormRows(Var),
    LogSoftmaxRows(Var),
    SoftmaxRows(Var),
    PickCols(Var, Vec<usize>),
    ThreeWay(Var, Var, Var),
    Conv3d(Var, Var, Var),
    AvgPool3d(Var),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    tracked: bool,
}

pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
    params: Vec<(String, Var)>,
    grads: Option<Vec<Option<Tensor<T>>>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err(msg: impl Into<String>) -> Error {
    Error::ShapeMismatch(msg.into())
}

const LAYER_NORM_EPS: f64 = 1e-5;

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: Vec::new(),
            grads: None,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, tracked: bool) -> Var {
        self.grads = None;
        self.nodes.push(Node { value, op, tracked });
        Var(self.nodes.len() - 1)
    }

    fn unary(&mut self, value: Tensor<T>, op: Op<T>, a: Var) -> Var {
        let tracked = self.nodes[a.0].tracked;
        self.push(value, op, tracked)
    }

    fn tracked_any(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].tracked)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    /// Constant input; no gradient flows into it.
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Input, false)
    }

    /// Unnamed differentiable leaf (e.g. embeddings fed to a loss).
    pub fn leaf(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Named differentiable leaf. Registering the same name twice returns
    /// the existing node.
    pub fn param(&mut self, name: &str, t: &Tensor<T>) -> Var {
        if let Some((_, v)) = self.params.iter().find(|(n, _)| n == name) {
            return *v;
        }
        let v = self.push(t.clone(), Op::Leaf, true);
        self.params.push((name.to_string(), v));
        v
    }

    pub fn param_var(&self, name: &str) -> Option<Var> {
        self.params.iter().find(|(n, _)| n == name).map(|(_, v)| *v)
    }

    pub fn param_names(&self) -> impl Iterator<Item = &str> {
        self.params.iter().map(|(n, _)| n.as_str())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (m, k, k2, n) = (av.rows(), av.cols(), bv.rows(), bv.cols());
        if k != k2 || av.shape().len() != 2 || bv.shape().len() != 2 {
            return Err(shape_err(format!(
                "matmul {:?} x {:?}",
                av.shape(),
                bv.shape()
            )));
        }
        let mut out = Tensor::zeros(&[m, n]);
        matmul_acc(av.data(), bv.data(), out.data_mut(), m, k, n);
        let t = self.tracked_any(&[a, b]);
        Ok(self.push(out, Op::MatMul(a, b), t))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(shape_err(format!(
                "{what}: {:?} vs {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        Ok(())
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let (av, bv) = (self.value(a), self.value(b));
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(av.shape().to_vec(), data).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let out = self.zip_with(a, b, |x, y| x + y);
        let t = self.tracked_any(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), t))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let out = self.zip_with(a, b, |x, y| x - y);
        let t = self.tracked_any(&[a, b]);
        Ok(self.push(out, Op::Sub(a, b), t))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let out = self.zip_with(a, b, |x, y| x * y);
        let t = self.tracked_any(&[a, b]);
        Ok(self.push(out, Op::Mul(a, b), t))
    }

    /// `a[m,n] + bias[n]`, bias broadcast over rows.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(bias));
        let n = av.cols();
        if bv.len() != n {
            return Err(shape_err(format!(
                "add_row {:?} + {:?}",
                av.shape(),
                bv.shape()
            )));
        }
        let mut out = av.clone();
        for (i, o) in out.data_mut().iter_mut().enumerate() {
            *o += bv.data()[i % n];
        }
        let t = self.tracked_any(&[a, bias]);
        Ok(self.push(out, Op::AddRow(a, bias), t))
    }

    pub fn add_const(&mut self, a: Var, c: &Tensor<T>) -> Result<Var> {
        if self.value(a).shape() != c.shape() {
            return Err(shape_err("add_const"));
        }
        let mut out = self.value(a).clone();
        out.add_assign(c);
        Ok(self.unary(out, Op::AddConst(a), a))
    }

    pub fn mul_const(&mut self, a: Var, c: &Tensor<T>) -> Result<Var> {
        if self.value(a).shape() != c.shape() {
            return Err(shape_err("mul_const"));
        }
        let mut out = self.value(a).clone();
        for (o, &w) in out.data_mut().iter_mut().zip(c.data()) {
            *o *= w;
        }
        Ok(self.unary(out, Op::MulConst(a, c.clone()), a))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let out = self.value(a).map(|x| x * s);
        self.unary(out, Op::Scale(a, s), a)
    }

    /// `a * s` where `s` is a one-element node.
    pub fn mul_scalar(&mut self, a: Var, s: Var) -> Result<Var> {
        if self.value(s).len() != 1 {
            return Err(shape_err("mul_scalar expects a one-element scalar"));
        }
        let sv = self.value(s).data()[0];
        let out = self.value(a).map(|x| x * sv);
        let t = self.tracked_any(&[a, s]);
        Ok(self.push(out, Op::MulScalar(a, s), t))
    }

    pub fn square(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x * x);
        self.unary(out, Op::Square(a), a)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out = self.value(a).map(T::exp);
        self.unary(out, Op::Exp(a), a)
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x * sigmoid(x));
        self.unary(out, Op::Silu(a), a)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).map(T::tanh);
        self.unary(out, Op::Tanh(a), a)
    }

    /// Clamps into `[lo, hi]`; the gradient is zero outside the interval.
    pub fn clamp(&mut self, a: Var, lo: T, hi: T) -> Var {
        let out = self.value(a).map(|x| x.max(lo).min(hi));
        self.unary(out, Op::Clamp(a, lo, hi), a)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum());
        self.unary(out, Op::Sum(a), a)
    }

    /// Column means of `[m,n]` as `[1,n]`.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let (m, n) = (av.rows(), av.cols());
        let mut out = vec![T::zero(); n];
        for i in 0..m {
            for (o, &x) in out.iter_mut().zip(av.row(i)) {
                *o += x;
            }
        }
        let inv = T::one() / T::from_usize_lossy(m);
        out.iter_mut().for_each(|o| *o *= inv);
        let out = Tensor::new(vec![1, n], out).expect("shape");
        self.unary(out, Op::MeanRows(a), a)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let out = self.value(a).transpose();
        self.unary(out, Op::Transpose(a), a)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).clone().reshaped(shape)?;
        Ok(self.unary(out, Op::Reshape(a), a))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let m = self.value(parts[0]).rows();
        if parts.iter().any(|&p| self.value(p).rows() != m) {
            return Err(shape_err("concat_cols row mismatch"));
        }
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut out = Vec::with_capacity(m * total);
        for i in 0..m {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(i));
            }
        }
        let out = Tensor::new(vec![m, total], out)?;
        let t = self.tracked_any(parts);
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), t))
    }

    /// Columns `[start, end)` of a 2-D node.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let av = self.value(a);
        if start >= end || end > av.cols() {
            return Err(shape_err(format!("slice_cols {start}..{end} of {:?}", av.shape())));
        }
        let m = av.rows();
        let mut out = Vec::with_capacity(m * (end - start));
        for i in 0..m {
            out.extend_from_slice(&av.row(i)[start..end]);
        }
        let out = Tensor::new(vec![m, end - start], out)?;
        Ok(self.unary(out, Op::SliceCols(a, start), a))
    }

    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let av = self.value(a);
        let (m, n) = (av.rows(), av.cols());
        let mut out = Vec::with_capacity(idx.len() * n);
        for &r in idx {
            if r >= m {
                return Err(shape_err(format!("gather row {r} of {m}")));
            }
            out.extend_from_slice(av.row(r));
        }
        let out = Tensor::new(vec![idx.len(), n], out)?;
        Ok(self.unary(out, Op::GatherRows(a, idx.to_vec()), a))
    }

    /// Mean of the rows of `a` grouped by `dst`, into `groups` output rows.
    /// Groups without members are zero.
    pub fn scatter_mean(&mut self, a: Var, dst: &[usize], groups: usize) -> Result<Var> {
        let av = self.value(a);
        if av.rows() != dst.len() {
            return Err(shape_err("scatter_mean index length"));
        }
        let n = av.cols();
        let mut counts = vec![0usize; groups];
        let mut out = vec![T::zero(); groups * n];
        for (e, &g) in dst.iter().enumerate() {
            if g >= groups {
                return Err(shape_err(format!("scatter target {g} of {groups}")));
            }
            counts[g] += 1;
            for (o, &x) in out[g * n..(g + 1) * n].iter_mut().zip(av.row(e)) {
                *o += x;
            }
        }
        for (g, &c) in counts.iter().enumerate() {
            if c > 1 {
                let inv = T::one() / T::from_usize_lossy(c);
                out[g * n..(g + 1) * n].iter_mut().for_each(|o| *o *= inv);
            }
        }
        let out = Tensor::new(vec![groups, n], out)?;
        Ok(self.unary(out, Op::ScatterMean(a, dst.to_vec(), counts), a))
    }

    /// Scales each row to unit Euclidean norm. Fails with `ZeroNorm`.
    pub fn normalize_rows(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        let mut out = av.clone();
        let n = av.cols();
        for row in out.data_mut().chunks_mut(n) {
            let norm = row.iter().map(|&x| x * x).sum::<T>().sqrt();
            if norm.as_f64() <= NORM_EPS {
                return Err(Error::ZeroNorm);
            }
            row.iter_mut().for_each(|x| *x /= norm);
        }
        Ok(self.unary(out, Op::NormalizeRows(a), a))
    }

    /// Scales each column to unit Euclidean norm. Fails with
    /// `DegenerateColumn`.
    pub fn normalize_cols(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        let (m, n) = (av.rows(), av.cols());
        let norms = col_norms(av);
        if let Some(j) = norms.iter().position(|c| c.as_f64() <= NORM_EPS) {
            return Err(Error::DegenerateColumn(j));
        }
        let mut out = av.clone();
        for i in 0..m {
            for j in 0..n {
                out.data_mut()[i * n + j] /= norms[j];
            }
        }
        Ok(self.unary(out, Op::NormalizeCols(a), a))
    }

    pub fn center_cols(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        if av.rows() < 2 {
            return Err(Error::BatchTooSmall(av.rows()));
        }
        let means = col_means(av);
        let n = av.cols();
        let mut out = av.clone();
        for (i, x) in out.data_mut().iter_mut().enumerate() {
            *x -= means[i % n];
        }
        Ok(self.unary(out, Op::CenterCols(a), a))
    }

    /// Per-row standardization without affine parameters.
    pub fn layer_norm_rows(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let n = av.cols();
        let mut out = av.clone();
        for row in out.data_mut().chunks_mut(n) {
            let (_, inv_std) = row_stats(row);
            let mean = row.iter().copied().sum::<T>() / T::from_usize_lossy(n);
            row.iter_mut().for_each(|x| *x = (*x - mean) * inv_std);
        }
        self.unary(out, Op::LayerNormRows(a), a)
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let n = av.cols();
        let mut out = av.clone();
        for row in out.data_mut().chunks_mut(n) {
            let lse = crate::tensor::log_sum_exp(row);
            row.iter_mut().for_each(|x| *x -= lse);
        }
        self.unary(out, Op::LogSoftmaxRows(a), a)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let n = av.cols();
        let mut out = av.clone();
        for row in out.data_mut().chunks_mut(n) {
            let lse = crate::tensor::log_sum_exp(row);
            row.iter_mut().for_each(|x| *x = (*x - lse).exp());
        }
        self.unary(out, Op::SoftmaxRows(a), a)
    }

    /// `out[i] = a[i, idx[i]]`, shape `[m]`.
    pub fn pick_cols(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let av = self.value(a);
        if idx.len() != av.rows() || idx.iter().any(|&j| j >= av.cols()) {
            return Err(shape_err("pick_cols index"));
        }
        let out: Vec<T> = idx.iter().enumerate().map(|(i, &j)| av.at(i, j)).collect();
        let out = Tensor::vector(out);
        Ok(self.unary(out, Op::PickCols(a, idx.to_vec()), a))
    }

    /// Three-way products of rows: `out[i, j·p + k] = Σ_l a[i,l] b[j,l] c[k,l]`
    /// for `a[n,d]`, `b[m,d]`, `c[p,d]`.
    pub fn threeway(&mut self, a: Var, b: Var, c: Var) -> Result<Var> {
        let (av, bv, cv) = (self.value(a), self.value(b), self.value(c));
        let d = av.cols();
        if bv.cols() != d || cv.cols() != d {
            return Err(shape_err("threeway feature dims"));
        }
        let (n, m, p) = (av.rows(), bv.rows(), cv.rows());
        let mut out = vec![T::zero(); n * m * p];
        let mut ab = vec![T::zero(); d];
        for i in 0..n {
            let ar = av.row(i);
            for j in 0..m {
                for ((o, &x), &y) in ab.iter_mut().zip(ar).zip(bv.row(j)) {
                    *o = x * y;
                }
                let base = i * m * p + j * p;
                for k in 0..p {
                    out[base + k] = ab.iter().zip(cv.row(k)).map(|(&x, &z)| x * z).sum();
                }
            }
        }
        let out = Tensor::new(vec![n, m * p], out)?;
        let t = self.tracked_any(&[a, b, c]);
        Ok(self.push(out, Op::ThreeWay(a, b, c), t))
    }

    /// Same-padded 3×3×3 convolution. `input[cin,g,g,g]`,
    /// `weight[cout,cin,3,3,3]`, `bias[cout]`.
    pub fn conv3d(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let (iv, wv, bv) = (self.value(input), self.value(weight), self.value(bias));
        let ish = iv.shape();
        let wsh = wv.shape();
        if ish.len() != 4
            || wsh.len() != 5
            || wsh[1] != ish[0]
            || wsh[2..] != [3, 3, 3]
            || bv.len() != wsh[0]
            || ish[1] != ish[2]
            || ish[2] != ish[3]
        {
            return Err(shape_err(format!("conv3d {:?} * {:?}", ish, wsh)));
        }
        let (cin, g, cout) = (ish[0], ish[1], wsh[0]);
        let mut out = vec![T::zero(); cout * g * g * g];
        conv3d_forward(iv.data(), wv.data(), bv.data(), &mut out, cin, cout, g);
        let out = Tensor::new(vec![cout, g, g, g], out)?;
        let t = self.tracked_any(&[input, weight, bias]);
        Ok(self.push(out, Op::Conv3d(input, weight, bias), t))
    }

    /// 2×2×2 average pooling of `[c,g,g,g]`; `g` must be even.
    pub fn avg_pool3d(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        let sh = av.shape();
        if sh.len() != 4 || sh[1] % 2 != 0 || sh[1] != sh[2] || sh[2] != sh[3] {
            return Err(shape_err(format!("avg_pool3d {:?}", sh)));
        }
        let (c, g) = (sh[0], sh[1]);
        let h = g / 2;
        let mut out = vec![T::zero(); c * h * h * h];
        let eighth = T::lit(0.125);
        for ch in 0..c {
            for x in 0..g {
                for y in 0..g {
                    for z in 0..g {
                        let src = ((ch * g + x) * g + y) * g + z;
                        let dst = ((ch * h + x / 2) * h + y / 2) * h + z / 2;
                        out[dst] += av.data()[src] * eighth;
                    }
                }
            }
        }
        let out = Tensor::new(vec![c, h, h, h], out)?;
        Ok(self.unary(out, Op::AvgPool3d(a), a))
    }

    /// Runs the backward pass from a one-element output.
    pub fn backward(&mut self, out: Var) -> Result<()> {
        if self.value(out).len() != 1 {
            return Err(shape_err("backward needs a scalar output; use backward_with_seed"));
        }
        self.backward_with_seed(out, Tensor::full(self.value(out).shape(), T::one()))
    }

    /// Runs the backward pass with an explicit upstream adjoint for `out`.
    pub fn backward_with_seed(&mut self, out: Var, seed: Tensor<T>) -> Result<()> {
        if seed.shape() != self.value(out).shape() {
            return Err(shape_err("seed shape"));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[out.0] = Some(seed);
        for i in (0..=out.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if self.nodes[i].tracked {
                self.propagate(i, &g, &mut grads);
            }
            grads[i] = Some(g);
        }
        self.grads = Some(grads);
        Ok(())
    }

    /// Adjoint of any node after [`backward`](Self::backward); zeros when
    /// the node does not influence the output.
    pub fn grad(&self, v: Var) -> Result<Tensor<T>> {
        let grads = self.grads.as_ref().ok_or(Error::BackwardNotRun)?;
        Ok(grads[v.0]
            .clone()
            .unwrap_or_else(|| Tensor::zeros(self.value(v).shape())))
    }

    /// `∂loss/∂param` for a named parameter.
    pub fn grad_of(&self, name: &str) -> Result<Tensor<T>> {
        let v = self
            .param_var(name)
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))?;
        self.grad(v)
    }

    /// All named-parameter gradients.
    pub fn param_grads(&self) -> Result<ParamSet<T>> {
        self.params
            .iter()
            .map(|(n, v)| Ok((n.clone(), self.grad(*v)?)))
            .collect()
    }

    fn propagate(&self, i: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let node = &self.nodes[i];
        let y = &node.value;
        let val = |v: Var| &self.nodes[v.0].value;
        let tracked = |v: Var| self.nodes[v.0].tracked;
        macro_rules! acc {
            ($v:expr, $t:expr) => {{
                let v: Var = $v;
                if tracked(v) {
                    let t: Tensor<T> = $t;
                    accumulate(grads, v, t);
                }
            }};
        }
        match &node.op {
            Op::Input | Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                if tracked(*a) {
                    let mut da = Tensor::zeros(av.shape());
                    matmul_nt_acc(g.data(), bv.data(), da.data_mut(), m, n, k);
                    accumulate(grads, *a, da);
                }
                if tracked(*b) {
                    let mut db = Tensor::zeros(bv.shape());
                    matmul_tn_acc(av.data(), g.data(), db.data_mut(), m, k, n);
                    accumulate(grads, *b, db);
                }
            }
            Op::Add(a, b) => {
                acc!(*a, g.clone());
                acc!(*b, g.clone());
            }
            Op::Sub(a, b) => {
                acc!(*a, g.clone());
                acc!(*b, g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                acc!(*a, elementwise(g, val(*b), |x, y| x * y));
                acc!(*b, elementwise(g, val(*a), |x, y| x * y));
            }
            Op::AddRow(a, bias) => {
                acc!(*a, g.clone());
                if tracked(*bias) {
                    let n = g.cols();
                    let mut db = vec![T::zero(); n];
                    for (idx, &x) in g.data().iter().enumerate() {
                        db[idx % n] += x;
                    }
                    let db = Tensor::new(val(*bias).shape().to_vec(), db).expect("shape");
                    accumulate(grads, *bias, db);
                }
            }
            Op::AddConst(a) => acc!(*a, g.clone()),
            Op::MulConst(a, c) => acc!(*a, elementwise(g, c, |x, w| x * w)),
            Op::Scale(a, s) => {
                let s = *s;
                acc!(*a, g.map(|x| x * s));
            }
            Op::MulScalar(a, s) => {
                let sv = val(*s).data()[0];
                acc!(*a, g.map(|x| x * sv));
                if tracked(*s) {
                    let ds: T = g.data().iter().zip(val(*a).data()).map(|(&x, &y)| x * y).sum();
                    accumulate(grads, *s, Tensor::new(val(*s).shape().to_vec(), vec![ds]).expect("shape"));
                }
            }
            Op::Square(a) => acc!(*a, elementwise(g, val(*a), |x, v| x * (v + v))),
            Op::Exp(a) => acc!(*a, elementwise(g, y, |x, e| x * e)),
            Op::Silu(a) => acc!(
                *a,
                elementwise(g, val(*a), |x, v| {
                    let s = sigmoid(v);
                    x * s * (T::one() + v * (T::one() - s))
                })
            ),
            Op::Tanh(a) => acc!(*a, elementwise(g, y, |x, t| x * (T::one() - t * t))),
            Op::Clamp(a, lo, hi) => {
                let (lo, hi) = (*lo, *hi);
                acc!(
                    *a,
                    elementwise(g, val(*a), |x, v| if v < lo || v > hi { T::zero() } else { x })
                );
            }
            Op::Sum(a) => {
                let s = g.data()[0];
                acc!(*a, Tensor::full(val(*a).shape(), s));
            }
            Op::MeanRows(a) => {
                let av = val(*a);
                let (m, n) = (av.rows(), av.cols());
                let inv = T::one() / T::from_usize_lossy(m);
                let data = (0..m * n).map(|idx| g.data()[idx % n] * inv).collect();
                acc!(*a, Tensor::new(av.shape().to_vec(), data).expect("shape"));
            }
            Op::Transpose(a) => acc!(*a, g.transpose()),
            Op::Reshape(a) => acc!(*a, g.clone().reshaped(val(*a).shape()).expect("shape")),
            Op::ConcatCols(parts) => {
                let m = g.rows();
                let mut offset = 0;
                for &p in parts {
                    let w = val(p).cols();
                    if tracked(p) {
                        let mut d = Vec::with_capacity(m * w);
                        for r in 0..m {
                            d.extend_from_slice(&g.row(r)[offset..offset + w]);
                        }
                        accumulate(grads, p, Tensor::new(val(p).shape().to_vec(), d).expect("shape"));
                    }
                    offset += w;
                }
            }
            Op::SliceCols(a, start) => {
                let av = val(*a);
                let mut d = Tensor::zeros(av.shape());
                let (n, w) = (av.cols(), g.cols());
                for r in 0..g.rows() {
                    d.data_mut()[r * n + start..r * n + start + w].copy_from_slice(g.row(r));
                }
                acc!(*a, d);
            }
            Op::GatherRows(a, idx) => {
                let av = val(*a);
                let n = av.cols();
                let mut d = Tensor::zeros(av.shape());
                for (r, &src) in idx.iter().enumerate() {
                    for (o, &x) in d.data_mut()[src * n..(src + 1) * n].iter_mut().zip(g.row(r)) {
                        *o += x;
                    }
                }
                acc!(*a, d);
            }
            Op::ScatterMean(a, dst, counts) => {
                let av = val(*a);
                let n = av.cols();
                let mut d = Tensor::zeros(av.shape());
                for (e, &grp) in dst.iter().enumerate() {
                    let inv = T::one() / T::from_usize_lossy(counts[grp]);
                    for (o, &x) in d.data_mut()[e * n..(e + 1) * n].iter_mut().zip(g.row(grp)) {
                        *o = x * inv;
                    }
                }
                acc!(*a, d);
            }
            Op::NormalizeRows(a) => {
                let av = val(*a);
                let n = av.cols();
                let mut d = Tensor::zeros(av.shape());
                for r in 0..av.rows() {
                    let norm = av.row(r).iter().map(|&x| x * x).sum::<T>().sqrt();
                    let yr = y.row(r);
                    let gr = g.row(r);
                    let dot: T = yr.iter().zip(gr).map(|(&p, &q)| p * q).sum();
                    for j in 0..n {
                        d.data_mut()[r * n + j] = (gr[j] - yr[j] * dot) / norm;
                    }
                }
                acc!(*a, d);
            }
            Op::NormalizeCols(a) => {
                let av = val(*a);
                let (m, n) = (av.rows(), av.cols());
                let norms = col_norms(av);
                let mut dots = vec![T::zero(); n];
                for r in 0..m {
                    for j in 0..n {
                        dots[j] += y.at(r, j) * g.at(r, j);
                    }
                }
                let mut d = Tensor::zeros(av.shape());
                for r in 0..m {
                    for j in 0..n {
                        d.data_mut()[r * n + j] = (g.at(r, j) - y.at(r, j) * dots[j]) / norms[j];
                    }
                }
                acc!(*a, d);
            }
            Op::CenterCols(a) => {
                let means = col_means(g);
                let n = g.cols();
                let data = g.data().iter().enumerate().map(|(idx, &x)| x - means[idx % n]).collect();
                acc!(*a, Tensor::new(g.shape().to_vec(), data).expect("shape"));
            }
            Op::LayerNormRows(a) => {
                let av = val(*a);
                let n = av.cols();
                let nf = T::from_usize_lossy(n);
                let mut d = Tensor::zeros(av.shape());
                for r in 0..av.rows() {
                    let (_, inv_std) = row_stats(av.row(r));
                    let (yr, gr) = (y.row(r), g.row(r));
                    let mean_g = gr.iter().copied().sum::<T>() / nf;
                    let mean_gy = gr.iter().zip(yr).map(|(&p, &q)| p * q).sum::<T>() / nf;
                    for j in 0..n {
                        d.data_mut()[r * n + j] = inv_std * (gr[j] - mean_g - yr[j] * mean_gy);
                    }
                }
                acc!(*a, d);
            }
            Op::LogSoftmaxRows(a) => {
                let n = y.cols();
                let mut d = g.clone();
                for r in 0..y.rows() {
                    let gsum: T = g.row(r).iter().copied().sum();
                    for j in 0..n {
                        d.data_mut()[r * n + j] -= y.at(r, j).exp() * gsum;
                    }
                }
                acc!(*a, d);
            }
            Op::SoftmaxRows(a) => {
                let n = y.cols();
                let mut d = Tensor::zeros(y.shape());
                for r in 0..y.rows() {
                    let dot: T = y.row(r).iter().zip(g.row(r)).map(|(&p, &q)| p * q).sum();
                    for j in 0..n {
                        d.data_mut()[r * n + j] = y.at(r, j) * (g.at(r, j) - dot);
                    }
                }
                acc!(*a, d);
            }
            Op::PickCols(a, idx) => {
                let av = val(*a);
                let n = av.cols();
                let mut d = Tensor::zeros(av.shape());
                for (r, &j) in idx.iter().enumerate() {
                    d.data_mut()[r * n + j] = g.data()[r];
                }
                acc!(*a, d);
            }
            Op::ThreeWay(a, b, c) => {
                let (av, bv, cv) = (val(*a), val(*b), val(*c));
                let (n, m, p, dim) = (av.rows(), bv.rows(), cv.rows(), av.cols());
                let mut da = Tensor::zeros(av.shape());
                let mut db = Tensor::zeros(bv.shape());
                let mut dc = Tensor::zeros(cv.shape());
                // w_ij = Σ_k g[i,jk] c_k, so da_i = Σ_j b_j ∘ w_ij, db_j = Σ_i a_i ∘ w_ij
                let mut w = vec![T::zero(); dim];
                for i in 0..n {
                    for j in 0..m {
                        w.iter_mut().for_each(|x| *x = T::zero());
                        let base = i * m * p + j * p;
                        for k in 0..p {
                            let gv = g.data()[base + k];
                            if gv == T::zero() {
                                continue;
                            }
                            for (o, &z) in w.iter_mut().zip(cv.row(k)) {
                                *o += gv * z;
                            }
                            // dc_k += g · (a_i ∘ b_j)
                            let drow = &mut dc.data_mut()[k * dim..(k + 1) * dim];
                            for ((o, &x), &yv) in drow.iter_mut().zip(av.row(i)).zip(bv.row(j)) {
                                *o += gv * x * yv;
                            }
                        }
                        for l in 0..dim {
                            da.data_mut()[i * dim + l] += bv.at(j, l) * w[l];
                            db.data_mut()[j * dim + l] += av.at(i, l) * w[l];
                        }
                    }
                }
                acc!(*a, da);
                acc!(*b, db);
                acc!(*c, dc);
            }
            Op::Conv3d(input, weight, bias) => {
                let (iv, wv) = (val(*input), val(*weight));
                let (cin, gsz, cout) = (iv.shape()[0], iv.shape()[1], wv.shape()[0]);
                let mut di = Tensor::zeros(iv.shape());
                let mut dw = Tensor::zeros(wv.shape());
                conv3d_backward(
                    iv.data(),
                    wv.data(),
                    g.data(),
                    di.data_mut(),
                    dw.data_mut(),
                    cin,
                    cout,
                    gsz,
                );
                let vol = gsz * gsz * gsz;
                let db: Vec<T> = (0..cout)
                    .map(|o| g.data()[o * vol..(o + 1) * vol].iter().copied().sum())
                    .collect();
                acc!(*input, di);
                acc!(*weight, dw);
                acc!(*bias, Tensor::new(val(*bias).shape().to_vec(), db).expect("shape"));
            }
            Op::AvgPool3d(a) => {
                let av = val(*a);
                let (c, gsz) = (av.shape()[0], av.shape()[1]);
                let h = gsz / 2;
                let eighth = T::lit(0.125);
                let mut d = Tensor::zeros(av.shape());
                for ch in 0..c {
                    for x in 0..gsz {
                        for yy in 0..gsz {
                            for z in 0..gsz {
                                let src = ((ch * gsz + x) * gsz + yy) * gsz + z;
                                let dst = ((ch * h + x / 2) * h + yy / 2) * h + z / 2;
                                d.data_mut()[src] = g.data()[dst] * eighth;
                            }
                        }
                    }
                }
                acc!(*a, d);
            }
        }
    }
}

fn accumulate<T: Scalar>(grads: &mut [Option<Tensor<T>>], v: Var, t: Tensor<T>) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&t),
        slot => *slot = Some(t),
    }
}

fn elementwise<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape().to_vec(), data).expect("same shape")
}

pub(crate) fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn col_norms<T: Scalar>(a: &Tensor<T>) -> Vec<T> {
    let n = a.cols();
    let mut s = vec![T::zero(); n];
    for (idx, &x) in a.data().iter().enumerate() {
        s[idx % n] += x * x;
    }
    s.into_iter().map(T::sqrt).collect()
}

fn col_means<T: Scalar>(a: &Tensor<T>) -> Vec<T> {
    let n = a.cols();
    let mut s = vec![T::zero(); n];
    for (idx, &x) in a.data().iter().enumerate() {
        s[idx % n] += x;
    }
    let inv = T::one() / T::from_usize_lossy(a.rows());
    s.into_iter().map(|v| v * inv).collect()
}

fn row_stats<T: Scalar>(row: &[T]) -> (T, T) {
    let n = T::from_usize_lossy(row.len());
    let mean = row.iter().copied().sum::<T>() / n;
    let var = row.iter().map(|&x| (x - mean) * (x - mean)).sum::<T>() / n;
    (mean, T::one() / (var + T::lit(LAYER_NORM_EPS)).sqrt())
}

#[inline]
fn vidx(c: usize, x: usize, y: usize, z: usize, g: usize) -> usize {
    ((c * g + x) * g + y) * g + z
}

/// Valid source range for kernel offset `k ∈ {0,1,2}` under padding 1.
#[inline]
fn tap_range(k: usize, g: usize) -> (usize, usize) {
    match k {
        0 => (1, g),
        1 => (0, g),
        _ => (0, g - 1),
    }
}

fn conv3d_forward<T: Scalar>(
    input: &[T],
    weight: &[T],
    bias: &[T],
    out: &mut [T],
    cin: usize,
    cout: usize,
    g: usize,
) {
    let vol = g * g * g;
    for o in 0..cout {
        out[o * vol..(o + 1) * vol].iter_mut().for_each(|v| *v = bias[o]);
        for c in 0..cin {
            for kx in 0..3 {
                let (x0, x1) = tap_range(kx, g);
                for ky in 0..3 {
                    let (y0, y1) = tap_range(ky, g);
                    for kz in 0..3 {
                        let (z0, z1) = tap_range(kz, g);
                        let w = weight[(((o * cin + c) * 3 + kx) * 3 + ky) * 3 + kz];
                        if w == T::zero() {
                            continue;
                        }
                        for x in x0..x1 {
                            let sx = x + kx - 1;
                            for y in y0..y1 {
                                let sy = y + ky - 1;
                                let orow = vidx(o, x, y, 0, g);
                                let irow = vidx(c, sx, sy, 0, g);
                                for z in z0..z1 {
                                    out[orow + z] += w * input[irow + z + kz - 1];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn conv3d_backward<T: Scalar>(
    input: &[T],
    weight: &[T],
    gout: &[T],
    din: &mut [T],
    dw: &mut [T],
    cin: usize,
    cout: usize,
    g: usize,
) {
    for o in 0..cout {
        for c in 0..cin {
            for kx in 0..3 {
                let (x0, x1) = tap_range(kx, g);
                for ky in 0..3 {
                    let (y0, y1) = tap_range(ky, g);
                    for kz in 0..3 {
                        let (z0, z1) = tap_range(kz, g);
                        let widx = (((o * cin + c) * 3 + kx) * 3 + ky) * 3 + kz;
                        let w = weight[widx];
                        let mut acc = T::zero();
                        for x in x0..x1 {
                            let sx = x + kx - 1;
                            for y in y0..y1 {
                                let sy = y + ky - 1;
                                let orow = vidx(o, x, y, 0, g);
                                let irow = vidx(c, sx, sy, 0, g);
                                for z in z0..z1 {
                                    let go = gout[orow + z];
                                    let si = irow + z + kz - 1;
                                    acc += go * input[si];
                                    din[si] += go * w;
                                }
                            }
                        }
                        dw[widx] += acc;
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::{central_difference, rel_err, seeded_tensor};

    #[test]
    fn quadratic_gradient() {
        let mut g = Graph::<f64>::new();
        let p = g.param("p", &Tensor::vector(vec![1.0, 2.0]));
        let sq = g.square(p);
        let loss = g.sum(sq);
        g.backward(loss).unwrap();
        assert_eq!(g.grad_of("p").unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn constant_loss_has_zero_gradient() {
        let mut g = Graph::<f64>::new();
        let _p = g.param("p", &Tensor::vector(vec![1.0, 2.0, 3.0]));
        let c = g.input(Tensor::scalar(4.0));
        let loss = g.sum(c);
        g.backward(loss).unwrap();
        assert_eq!(g.grad_of("p").unwrap().data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn grad_errors() {
        let mut g = Graph::<f64>::new();
        let p = g.param("p", &Tensor::vector(vec![1.0]));
        assert!(matches!(g.grad_of("p"), Err(Error::BackwardNotRun)));
        let l = g.sum(p);
        g.backward(l).unwrap();
        assert!(matches!(g.grad_of("q"), Err(Error::UnknownParameter(_))));
    }

    /// Checks every op against central differences by composing it with a
    /// fixed random linear functional.
    fn check_op(shapes: &[Vec<usize>], build: impl Fn(&mut Graph<f64>, &[Var]) -> Var) {
        let inputs: Vec<Tensor<f64>> = shapes
            .iter()
            .enumerate()
            .map(|(i, s)| seeded_tensor(s, 100 + i as u64, 1.0))
            .collect();
        let eval = |xs: &[Tensor<f64>], grads: bool| {
            let mut g = Graph::new();
            let vars: Vec<Var> = xs.iter().map(|t| g.leaf(t.clone())).collect();
            let out = build(&mut g, &vars);
            let probe = seeded_tensor(g.value(out).shape(), 7, 1.0);
            let weighted = g.mul_const(out, &probe).unwrap();
            let loss = g.sum(weighted);
            let value = g.value(loss).data()[0];
            if grads {
                g.backward(loss).unwrap();
                (value, vars.iter().map(|&v| g.grad(v).unwrap()).collect())
            } else {
                (value, Vec::new())
            }
        };
        let (_, analytic) = eval(&inputs, true);
        for (k, a) in analytic.iter().enumerate() {
            let fd = central_difference(&inputs[k], 1e-5, |t| {
                let mut xs = inputs.clone();
                xs[k] = t.clone();
                eval(&xs, false).0
            });
            let err = rel_err(a, &fd);
            assert!(err < 1e-6, "input {k}: rel err {err}");
        }
    }

    #[test]
    fn op_gradients_match_finite_differences() {
        check_op(&[vec![3, 4], vec![4, 2]], |g, v| g.matmul(v[0], v[1]).unwrap());
        check_op(&[vec![3, 4], vec![4]], |g, v| g.add_row(v[0], v[1]).unwrap());
        check_op(&[vec![2, 3], vec![2, 3]], |g, v| {
            let m = g.mul(v[0], v[1]).unwrap();
            let s = g.sub(m, v[1]).unwrap();
            g.add(s, v[0]).unwrap()
        });
        check_op(&[vec![3, 3], vec![1]], |g, v| g.mul_scalar(v[0], v[1]).unwrap());
        check_op(&[vec![5]], |g, v| {
            let s = g.silu(v[0]);
            let t = g.tanh(s);
            let e = g.exp(t);
            g.square(e)
        });
        check_op(&[vec![4, 3]], |g, v| g.mean_rows(v[0]));
        check_op(&[vec![4, 3]], |g, v| g.transpose(v[0]));
        check_op(&[vec![2, 3], vec![2, 2]], |g, v| {
            let c = g.concat_cols(&[v[0], v[1]]).unwrap();
            g.slice_cols(c, 1, 4).unwrap()
        });
        check_op(&[vec![3, 2]], |g, v| {
            let r = g.gather_rows(v[0], &[2, 0, 2, 1]).unwrap();
            g.scatter_mean(r, &[0, 0, 1, 3], 4).unwrap()
        });
        check_op(&[vec![3, 4]], |g, v| g.normalize_rows(v[0]).unwrap());
        check_op(&[vec![4, 3]], |g, v| {
            let c = g.center_cols(v[0]).unwrap();
            g.normalize_cols(c).unwrap()
        });
        check_op(&[vec![3, 5]], |g, v| g.layer_norm_rows(v[0]));
        check_op(&[vec![3, 4]], |g, v| g.log_softmax_rows(v[0]));
        check_op(&[vec![3, 4]], |g, v| g.softmax_rows(v[0]));
        check_op(&[vec![3, 3]], |g, v| g.pick_cols(v[0], &[2, 0, 1]).unwrap());
        check_op(&[vec![2, 3], vec![3, 3], vec![2, 3]], |g, v| {
            g.threeway(v[0], v[1], v[2]).unwrap()
        });
        check_op(&[vec![2, 4, 4, 4], vec![3, 2, 3, 3, 3], vec![3]], |g, v| {
            g.conv3d(v[0], v[1], v[2]).unwrap()
        });
        check_op(&[vec![2, 4, 4, 4]], |g, v| g.avg_pool3d(v[0]).unwrap());
        check_op(&[vec![2, 6]], |g, v| {
            let r = g.reshape(v[0], &[3, 4]).unwrap();
            let c = g.clamp(r, -0.5, 0.5);
            g.scale(c, 3.0)
        });
    }

    #[test]
    fn threeway_matches_loops() {
        let a = seeded_tensor::<f64>(&[2, 3], 1, 1.0);
        let b = seeded_tensor::<f64>(&[3, 3], 2, 1.0);
        let c = seeded_tensor::<f64>(&[2, 3], 3, 1.0);
        let mut g = Graph::new();
        let (va, vb, vc) = (g.input(a.clone()), g.input(b.clone()), g.input(c.clone()));
        let t = g.threeway(va, vb, vc).unwrap();
        for i in 0..2 {
            for j in 0..3 {
                for k in 0..2 {
                    let mut s = 0.0;
                    for l in 0..3 {
                        s += a.at(i, l) * b.at(j, l) * c.at(k, l);
                    }
                    assert!((g.value(t).at(i, j * 2 + k) - s).abs() < 1e-14);
                }
            }
        }
    }

    #[test]
    fn conv3d_identity_kernel() {
        let x = seeded_tensor::<f64>(&[1, 4, 4, 4], 5, 1.0);
        let mut w = Tensor::zeros(&[1, 1, 3, 3, 3]);
        w.data_mut()[13] = 1.0;
        let mut g = Graph::new();
        let (vx, vw, vb) = (g.input(x.clone()), g.input(w), g.input(Tensor::zeros(&[1])));
        let y = g.conv3d(vx, vw, vb).unwrap();
        assert_eq!(g.value(y).data(), x.data());
    }

    #[test]
    fn normalize_rows_rejects_zero() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::zeros(&[2, 3]));
        assert!(matches!(g.normalize_rows(x), Err(Error::ZeroNorm)));
        let c = g.leaf(Tensor::from_f64(&[2, 2], &[1.0, 2.0, 1.0, 3.0]).unwrap());
        let cc = g.center_cols(c).unwrap();
        assert!(matches!(g.normalize_cols(cc), Err(Error::DegenerateColumn(0))));
    }
}
