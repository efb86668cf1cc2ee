//! Reverse-mode automatic differentiation over a per-forward expression tape.
//!
//! A [`Graph`] is rebuilt for every forward pass. Nodes are appended in
//! evaluation order, so the tape is already topologically sorted and the
//! backward pass is a single reverse sweep.
//!
//! Shape mismatches are programming errors and panic at construction time.
//! Non-finite values are recorded against the first operator that produced
//! them and reported by [`Graph::check_finite`] / [`Graph::backward`].

use super::param::{ParamId, ParamStore};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Clone, Debug)]
enum Op {
    Input,
    Param(ParamId),
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Tanh(Var),
    Relu(Var),
    LeakyRelu(Var, f64),
    Exp(Var),
    Log(Var),
    Square(Var),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    LayerNormRows(Var, f64),
    MeanRows(Var),
    SumCols(Var),
    Sum(Var),
    Mean(Var),
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    Gather(Var, Vec<usize>),
    Minimum(Var, Var),
    Clamp(Var, f64, f64),
    Huber(Var, f64),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Input => "input",
            Op::Param(_) => "param",
            Op::MatMul(..) => "matmul",
            Op::MatMulBt(..) => "matmul_bt",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::Tanh(_) => "tanh",
            Op::Relu(_) => "relu",
            Op::LeakyRelu(..) => "leaky_relu",
            Op::Exp(_) => "exp",
            Op::Log(_) => "log",
            Op::Square(_) => "square",
            Op::SoftmaxRows(_) => "softmax",
            Op::LogSoftmaxRows(_) => "log_softmax",
            Op::LayerNormRows(..) => "layer_norm",
            Op::MeanRows(_) => "mean_rows",
            Op::SumCols(_) => "sum_cols",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::SliceCols(..) => "slice_cols",
            Op::ConcatCols(_) => "concat_cols",
            Op::ConcatRows(_) => "concat_rows",
            Op::Gather(..) => "gather",
            Op::Minimum(..) => "minimum",
            Op::Clamp(..) => "clamp",
            Op::Huber(..) => "huber",
        }
    }
}

#[derive(Clone, Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    param_nodes: Vec<Option<Var>>,
    first_nonfinite: Option<(&'static str, usize)>,
}

/// Adjoints produced by [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: Vec<(ParamId, Var)>,
}

impl Gradients {
    /// Gradient of the loss with respect to any node, if the node influenced it.
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    /// Add parameter gradients into the store (accumulating, not overwriting).
    pub fn accumulate_into(&self, store: &mut ParamStore) {
        for &(id, var) in &self.params {
            if let Some(g) = &self.grads[var.0] {
                store.get_mut(id).grad.add_assign(g);
            }
        }
    }
}

/// Broadcast index of `b` (shape `br x bc`, each 1 or matching) at `(i, j)`.
#[inline]
fn bidx(i: usize, j: usize, br: usize, bc: usize) -> usize {
    (if br == 1 { 0 } else { i }) * bc + if bc == 1 { 0 } else { j }
}

fn check_broadcast(op: &str, a: &Tensor, b: &Tensor) {
    let ok_r = b.rows() == a.rows() || b.rows() == 1;
    let ok_c = b.cols() == a.cols() || b.cols() == 1;
    assert!(
        ok_r && ok_c,
        "{op}: cannot broadcast {}x{} onto {}x{}",
        b.rows(),
        b.cols(),
        a.rows(),
        a.cols()
    );
}

fn binary_broadcast(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let (r, c) = (a.rows(), a.cols());
    let (br, bc) = (b.rows(), b.cols());
    let mut out = Tensor::zeros(r, c);
    let (ad, bd) = (a.data(), b.data());
    let od = out.data_mut();
    for i in 0..r {
        for j in 0..c {
            od[i * c + j] = f(ad[i * c + j], bd[bidx(i, j, br, bc)]);
        }
    }
    out
}

/// Sum a full-shape adjoint down to the (possibly broadcast) shape of `b`.
fn reduce_to(g: &Tensor, br: usize, bc: usize, scale: impl Fn(usize) -> f64) -> Tensor {
    let (r, c) = (g.rows(), g.cols());
    if br == r && bc == c {
        let mut out = g.clone();
        for (k, v) in out.data_mut().iter_mut().enumerate() {
            *v *= scale(k);
        }
        return out;
    }
    let mut out = Tensor::zeros(br, bc);
    let gd = g.data();
    let od = out.data_mut();
    for i in 0..r {
        for j in 0..c {
            let k = i * c + j;
            od[bidx(i, j, br, bc)] += gd[k] * scale(k);
        }
    }
    out
}

fn softmax_rows(x: &Tensor) -> Tensor {
    let mut out = x.clone();
    let c = x.cols();
    for row in out.data_mut().chunks_mut(c.max(1)) {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            s += *v;
        }
        for v in row.iter_mut() {
            *v /= s;
        }
    }
    out
}

fn log_softmax_rows(x: &Tensor) -> Tensor {
    let mut out = x.clone();
    let c = x.cols();
    for row in out.data_mut().chunks_mut(c.max(1)) {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        for v in row.iter_mut() {
            *v -= lse;
        }
    }
    out
}

/// Numerically stable `log Σ exp(x)`.
pub fn logsumexp(x: &[f64]) -> f64 {
    let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + x.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        if self.first_nonfinite.is_none() && !value.is_finite() {
            self.first_nonfinite = Some((op.name(), self.nodes.len()));
        }
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// Error if any node so far holds a NaN or infinity, naming the operator.
    pub fn check_finite(&self) -> Result<()> {
        match self.first_nonfinite {
            None => Ok(()),
            Some((op, idx)) => Err(Error::Numerical {
                op,
                detail: format!("non-finite value produced at node {idx}"),
            }),
        }
    }

    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Input)
    }

    /// Leaf for a stored parameter. Repeated calls reuse the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if self.param_nodes.len() < store.len() {
            self.param_nodes.resize(store.len(), None);
        }
        if let Some(v) = self.param_nodes[id.index()] {
            return v;
        }
        let v = self.push(store.value(id).clone(), Op::Param(id));
        self.param_nodes[id.index()] = Some(v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).matmul(self.value(b));
        self.push(out, Op::MatMul(a, b))
    }

    /// `a · bᵀ`.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).matmul_bt(self.value(b));
        self.push(out, Op::MatMulBt(a, b))
    }

    /// Elementwise `a + b`; `b` may broadcast as a row, a column or a scalar.
    pub fn add(&mut self, a: Var, b: Var) -> Var {
        check_broadcast("add", self.value(a), self.value(b));
        let out = binary_broadcast(self.value(a), self.value(b), |x, y| x + y);
        self.push(out, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        check_broadcast("sub", self.value(a), self.value(b));
        let out = binary_broadcast(self.value(a), self.value(b), |x, y| x - y);
        self.push(out, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        check_broadcast("mul", self.value(a), self.value(b));
        let out = binary_broadcast(self.value(a), self.value(b), |x, y| x * y);
        self.push(out, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let out = self.value(a).map(|x| x * k);
        self.push(out, Op::Scale(a, k))
    }

    pub fn add_scalar(&mut self, a: Var, k: f64) -> Var {
        let out = self.value(a).map(|x| x + k);
        self.push(out, Op::AddScalar(a))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::tanh);
        self.push(out, Op::Tanh(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.max(0.0));
        self.push(out, Op::Relu(a))
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let out = self.value(a).map(|x| if x > 0.0 { x } else { slope * x });
        self.push(out, Op::LeakyRelu(a, slope))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::exp);
        self.push(out, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::ln);
        self.push(out, Op::Log(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x * x);
        self.push(out, Op::Square(a))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let out = softmax_rows(self.value(a));
        self.push(out, Op::SoftmaxRows(a))
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let out = log_softmax_rows(self.value(a));
        self.push(out, Op::LogSoftmaxRows(a))
    }

    /// Standardize each row to zero mean and unit variance (no affine part).
    pub fn layer_norm_rows(&mut self, a: Var, eps: f64) -> Var {
        let x = self.value(a);
        let c = x.cols();
        let mut out = x.clone();
        for row in out.data_mut().chunks_mut(c) {
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for v in row.iter_mut() {
                *v = (*v - mean) * inv;
            }
        }
        self.push(out, Op::LayerNormRows(a, eps))
    }

    /// Column-wise mean over rows, `r x c -> 1 x c`.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let (r, c) = (x.rows(), x.cols());
        assert!(r > 0, "mean_rows of an empty tensor");
        let mut out = Tensor::zeros(1, c);
        for row in x.data().chunks(c) {
            for (o, v) in out.data_mut().iter_mut().zip(row) {
                *o += v;
            }
        }
        out.data_mut().iter_mut().for_each(|v| *v /= r as f64);
        self.push(out, Op::MeanRows(a))
    }

    /// Row sums, `r x c -> r x 1`.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let c = x.cols();
        let sums: Vec<f64> = x.data().chunks(c).map(|r| r.iter().sum()).collect();
        self.push(Tensor::column(&sums), Op::SumCols(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        self.push(Tensor::scalar(s), Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let x = self.value(a);
        assert!(!x.is_empty(), "mean of an empty tensor");
        let s = x.sum() / x.len() as f64;
        self.push(Tensor::scalar(s), Op::Mean(a))
    }

    /// Columns `[start, start + len)`.
    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let x = self.value(a);
        assert!(
            start + len <= x.cols(),
            "slice_cols [{start}, {}) out of range for {} columns",
            start + len,
            x.cols()
        );
        let mut out = Tensor::zeros(x.rows(), len);
        for r in 0..x.rows() {
            out.data_mut()[r * len..(r + 1) * len]
                .copy_from_slice(&x.row_slice(r)[start..start + len]);
        }
        self.push(out, Op::SliceCols(a, start))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_cols of nothing");
        let rows = self.value(parts[0]).rows();
        let total: usize = parts
            .iter()
            .map(|&p| {
                assert_eq!(self.value(p).rows(), rows, "concat_cols row mismatch");
                self.value(p).cols()
            })
            .sum();
        let mut out = Tensor::zeros(rows, total);
        let mut offset = 0;
        for &p in parts {
            let x = self.value(p);
            let c = x.cols();
            for r in 0..rows {
                out.data_mut()[r * total + offset..r * total + offset + c]
                    .copy_from_slice(x.row_slice(r));
            }
            offset += c;
        }
        self.push(out, Op::ConcatCols(parts.to_vec()))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_rows of nothing");
        let cols = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let x = self.value(p);
            assert_eq!(x.cols(), cols, "concat_rows column mismatch");
            data.extend_from_slice(x.data());
            rows += x.rows();
        }
        self.push(Tensor::from_vec(rows, cols, data), Op::ConcatRows(parts.to_vec()))
    }

    /// Pick column `index[r]` of every row, `r x c -> r x 1`.
    pub fn gather(&mut self, a: Var, index: &[usize]) -> Var {
        let x = self.value(a);
        assert_eq!(index.len(), x.rows(), "gather needs one index per row");
        let vals: Vec<f64> = index
            .iter()
            .enumerate()
            .map(|(r, &c)| {
                assert!(c < x.cols(), "gather index {c} out of range");
                x.get(r, c)
            })
            .collect();
        self.push(Tensor::column(&vals), Op::Gather(a, index.to_vec()))
    }

    pub fn minimum(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).shape(), self.value(b).shape(), "minimum shape mismatch");
        let out = binary_broadcast(self.value(a), self.value(b), |x, y| if y < x { y } else { x });
        self.push(out, Op::Minimum(a, b))
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let out = self.value(a).map(|x| x.clamp(lo, hi));
        self.push(out, Op::Clamp(a, lo, hi))
    }

    /// Elementwise Huber function with threshold `zeta`.
    pub fn huber(&mut self, a: Var, zeta: f64) -> Var {
        let out = self.value(a).map(|x| huber(x, zeta));
        self.push(out, Op::Huber(a, zeta))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        self.check_finite()?;
        assert_eq!(self.value(loss).shape(), [1, 1], "backward needs a scalar loss");
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::scalar(1.0));
        let mut params = Vec::new();

        for idx in (0..=loss.0).rev() {
            let Some(gy) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            let y = &node.value;
            let acc = |v: Var, g: Tensor, grads: &mut Vec<Option<Tensor>>| match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&g),
                slot @ None => *slot = Some(g),
            };
            match &node.op {
                Op::Input => {}
                Op::Param(id) => params.push((*id, Var(idx))),
                Op::MatMul(a, b) => {
                    let ga = gy.matmul_bt(self.value(*b));
                    let gb = self.value(*a).matmul_at(&gy);
                    acc(*a, ga, &mut grads);
                    acc(*b, gb, &mut grads);
                }
                Op::MatMulBt(a, b) => {
                    let ga = gy.matmul(self.value(*b));
                    let gb = gy.matmul_at(self.value(*a));
                    acc(*a, ga, &mut grads);
                    acc(*b, gb, &mut grads);
                }
                Op::Add(a, b) | Op::Sub(a, b) => {
                    let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                    let bv = self.value(*b);
                    let gb = reduce_to(&gy, bv.rows(), bv.cols(), |_| sign);
                    acc(*b, gb, &mut grads);
                    acc(*a, gy.clone(), &mut grads);
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let ga = binary_broadcast(&gy, bv, |g, y| g * y);
                    let ad = av.data();
                    let gb = reduce_to(&gy, bv.rows(), bv.cols(), |k| ad[k]);
                    acc(*a, ga, &mut grads);
                    acc(*b, gb, &mut grads);
                }
                Op::Scale(a, k) => {
                    let k = *k;
                    acc(*a, gy.map(|g| g * k), &mut grads);
                }
                Op::AddScalar(a) => acc(*a, gy.clone(), &mut grads),
                Op::Tanh(a) => {
                    let g = zip_map(&gy, y, |g, t| g * (1.0 - t * t));
                    acc(*a, g, &mut grads);
                }
                Op::Relu(a) => {
                    let g = zip_map(&gy, self.value(*a), |g, x| if x > 0.0 { g } else { 0.0 });
                    acc(*a, g, &mut grads);
                }
                Op::LeakyRelu(a, slope) => {
                    let s = *slope;
                    let g = zip_map(&gy, self.value(*a), |g, x| if x > 0.0 { g } else { s * g });
                    acc(*a, g, &mut grads);
                }
                Op::Exp(a) => acc(*a, zip_map(&gy, y, |g, e| g * e), &mut grads),
                Op::Log(a) => acc(*a, zip_map(&gy, self.value(*a), |g, x| g / x), &mut grads),
                Op::Square(a) => {
                    acc(*a, zip_map(&gy, self.value(*a), |g, x| 2.0 * g * x), &mut grads)
                }
                Op::SoftmaxRows(a) => {
                    let c = y.cols();
                    let mut g = gy.clone();
                    for ((grow, yrow), gyrow) in g
                        .data_mut()
                        .chunks_mut(c)
                        .zip(y.data().chunks(c))
                        .zip(gy.data().chunks(c))
                    {
                        let dot: f64 = gyrow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                        for ((gv, &yv), &gyv) in grow.iter_mut().zip(yrow).zip(gyrow) {
                            *gv = yv * (gyv - dot);
                        }
                    }
                    acc(*a, g, &mut grads);
                }
                Op::LogSoftmaxRows(a) => {
                    let c = y.cols();
                    let mut g = gy.clone();
                    for (grow, yrow) in g.data_mut().chunks_mut(c).zip(y.data().chunks(c)) {
                        let s: f64 = grow.iter().sum();
                        for (gv, &ly) in grow.iter_mut().zip(yrow) {
                            *gv -= ly.exp() * s;
                        }
                    }
                    acc(*a, g, &mut grads);
                }
                Op::LayerNormRows(a, eps) => {
                    let x = self.value(*a);
                    let c = x.cols();
                    let n = c as f64;
                    let mut g = Tensor::zeros(x.rows(), c);
                    for r in 0..x.rows() {
                        let xr = x.row_slice(r);
                        let mean = xr.iter().sum::<f64>() / n;
                        let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
                        let inv = 1.0 / (var + eps).sqrt();
                        let yr = y.row_slice(r);
                        let gr = gy.row_slice(r);
                        let mean_g = gr.iter().sum::<f64>() / n;
                        let mean_gy = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / n;
                        for j in 0..c {
                            g.set(r, j, inv * (gr[j] - mean_g - yr[j] * mean_gy));
                        }
                    }
                    acc(*a, g, &mut grads);
                }
                Op::MeanRows(a) => {
                    let x = self.value(*a);
                    let r = x.rows();
                    let mut g = Tensor::zeros(r, x.cols());
                    for row in g.data_mut().chunks_mut(x.cols()) {
                        for (gv, &gyv) in row.iter_mut().zip(gy.data()) {
                            *gv = gyv / r as f64;
                        }
                    }
                    acc(*a, g, &mut grads);
                }
                Op::SumCols(a) => {
                    let x = self.value(*a);
                    let c = x.cols();
                    let mut g = Tensor::zeros(x.rows(), c);
                    for (row, &gyv) in g.data_mut().chunks_mut(c).zip(gy.data()) {
                        row.iter_mut().for_each(|v| *v = gyv);
                    }
                    acc(*a, g, &mut grads);
                }
                Op::Sum(a) => {
                    let x = self.value(*a);
                    acc(*a, Tensor::full(x.rows(), x.cols(), gy.item()), &mut grads);
                }
                Op::Mean(a) => {
                    let x = self.value(*a);
                    let v = gy.item() / x.len() as f64;
                    acc(*a, Tensor::full(x.rows(), x.cols(), v), &mut grads);
                }
                Op::SliceCols(a, start) => {
                    let x = self.value(*a);
                    let len = gy.cols();
                    let mut g = Tensor::zeros(x.rows(), x.cols());
                    for r in 0..x.rows() {
                        let c = x.cols();
                        g.data_mut()[r * c + start..r * c + start + len]
                            .copy_from_slice(gy.row_slice(r));
                    }
                    acc(*a, g, &mut grads);
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    let total = gy.cols();
                    for &p in parts {
                        let x = self.value(p);
                        let c = x.cols();
                        let mut g = Tensor::zeros(x.rows(), c);
                        for r in 0..x.rows() {
                            g.data_mut()[r * c..(r + 1) * c].copy_from_slice(
                                &gy.data()[r * total + offset..r * total + offset + c],
                            );
                        }
                        offset += c;
                        acc(p, g, &mut grads);
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let x = self.value(p);
                        let n = x.len();
                        let g = Tensor::from_vec(
                            x.rows(),
                            x.cols(),
                            gy.data()[offset..offset + n].to_vec(),
                        );
                        offset += n;
                        acc(p, g, &mut grads);
                    }
                }
                Op::Gather(a, index) => {
                    let x = self.value(*a);
                    let mut g = Tensor::zeros(x.rows(), x.cols());
                    for (r, &c) in index.iter().enumerate() {
                        g.set(r, c, gy.get(r, 0));
                    }
                    acc(*a, g, &mut grads);
                }
                Op::Minimum(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let mut ga = Tensor::zeros(av.rows(), av.cols());
                    let mut gb = Tensor::zeros(av.rows(), av.cols());
                    for k in 0..av.len() {
                        if bv.data()[k] < av.data()[k] {
                            gb.data_mut()[k] = gy.data()[k];
                        } else {
                            ga.data_mut()[k] = gy.data()[k];
                        }
                    }
                    acc(*a, ga, &mut grads);
                    acc(*b, gb, &mut grads);
                }
                Op::Clamp(a, lo, hi) => {
                    let (lo, hi) = (*lo, *hi);
                    let g = zip_map(&gy, self.value(*a), |g, x| {
                        if x >= lo && x <= hi {
                            g
                        } else {
                            0.0
                        }
                    });
                    acc(*a, g, &mut grads);
                }
                Op::Huber(a, zeta) => {
                    let z = *zeta;
                    let g = zip_map(&gy, self.value(*a), |g, x| {
                        if x.abs() <= z {
                            g * x
                        } else {
                            g * z * x.signum()
                        }
                    });
                    acc(*a, g, &mut grads);
                }
            }
            grads[idx] = Some(gy);
        }

        for (i, g) in grads.iter().enumerate() {
            if let Some(g) = g {
                if !g.is_finite() {
                    return Err(Error::Numerical {
                        op: self.nodes[i].op.name(),
                        detail: format!("non-finite gradient at node {i}"),
                    });
                }
            }
        }
        Ok(Gradients { grads, params })
    }
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::from_vec(a.rows(), a.cols(), data)
}

/// Huber function: `x²/2` inside `[-ζ, ζ]`, `ζ(|x| - ζ/2)` outside.
pub fn huber(x: f64, zeta: f64) -> f64 {
    if x.abs() <= zeta {
        0.5 * x * x
    } else {
        zeta * (x.abs() - 0.5 * zeta)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_has_unit_gradient() {
        let mut g = Graph::new();
        let x = g.input(Tensor::from_vec(2, 2, vec![1.0, -2.0, 3.0, 0.5]));
        let s = g.sum(x);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.wrt(x).unwrap().data(), &[1.0; 4]);
    }

    #[test]
    fn sum_of_squares_gradient_is_twice_input() {
        let mut g = Graph::new();
        let data = vec![1.0, -2.0, 3.0, 0.5];
        let x = g.input(Tensor::from_vec(1, 4, data.clone()));
        let xx = g.mul(x, x);
        let s = g.sum(xx);
        let grads = g.backward(s).unwrap();
        let expect: Vec<f64> = data.iter().map(|v| 2.0 * v).collect();
        assert_eq!(grads.wrt(x).unwrap().data(), expect.as_slice());
    }

    #[test]
    fn gradients_accumulate_across_backward_calls() {
        let mut store = ParamStore::new();
        let id = store.add("w", super::super::param::ParamGroup::Actor, Tensor::row(&[2.0]));
        for _ in 0..2 {
            let mut g = Graph::new();
            let w = g.param(&store, id);
            let s = g.square(w);
            let l = g.sum(s);
            g.backward(l).unwrap().accumulate_into(&mut store);
        }
        assert_eq!(store.get(id).grad.data(), &[8.0]);
    }

    #[test]
    fn non_finite_values_name_the_operator() {
        let mut g = Graph::new();
        let x = g.input(Tensor::row(&[-1.0]));
        let l = g.log(x);
        let s = g.sum(l);
        match g.backward(s) {
            Err(Error::Numerical { op, .. }) => assert_eq!(op, "log"),
            other => panic!("expected numerical error, got {other:?}"),
        }
    }

    #[test]
    #[should_panic(expected = "cannot broadcast")]
    fn shape_mismatch_panics_at_construction() {
        let mut g = Graph::new();
        let a = g.input(Tensor::zeros(2, 3));
        let b = g.input(Tensor::zeros(3, 2));
        g.add(a, b);
    }

    #[test]
    fn huber_piecewise_values() {
        let z = 1.5;
        assert!((huber(z / 2.0, z) - z * z / 8.0).abs() < 1e-15);
        assert!((huber(2.0 * z, z) - 1.5 * z * z).abs() < 1e-15);
        assert_eq!(huber(0.0, z), 0.0);
    }
}
