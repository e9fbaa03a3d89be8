//! Minimal reverse-mode autodiff over dense `f64` matrices.
//!
//! Every tensor on the tape is a 2-D array `[rows, cols]`; spatial
//! geometry (batch, height, width) is carried by the ops that need it.
//! Nodes are appended in topological order, so the backward pass is a
//! single reverse sweep. The engine is deliberately small: it supports
//! exactly the operations the segmentation decoder and toy encoders
//! are built from, each with a hand-written backward rule that is
//! checked against central finite differences in the unit tests.

mod attention;
mod conv;

pub use attention::{GroupedLinearAttention, WindowAttention};
pub use conv::{Conv3x3, PadMode, Up2x};

use ndarray::{Array2, Axis};

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(pub(crate) usize);

pub(crate) enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    AddScalar(NodeId),
    MatMul(NodeId, NodeId),
    /// Broadcast-add a `[1, n]` bias to every row of `[m, n]`.
    AddBiasRows(NodeId, NodeId),
    Sigmoid(NodeId),
    Relu(NodeId),
    /// `elu(x) + 1`: positive, smooth kernel feature map.
    EluP1(NodeId),
    Ln(NodeId),
    Sqrt(NodeId),
    Recip(NodeId),
    /// Gradient is passed through only inside the clamp range.
    Clamp(NodeId, f64, f64),
    /// Per-row sum -> `[m, 1]`.
    RowSum(NodeId),
    /// Sum of all entries -> `[1, 1]`.
    SumAll(NodeId),
    /// Scale row i of `a` by scalar `s[i, 0]`.
    RowScale(NodeId, NodeId),
    /// Elementwise product with a constant (no grad through the constant).
    MulConst(NodeId, Array2<f64>),
    ConcatCols(Vec<NodeId>, Vec<usize>),
    /// `out[i] = a[indices[i]]`; backward scatter-adds.
    GatherRows(NodeId, Vec<usize>),
    /// Row-major reinterpretation with the same element count.
    Reshape(NodeId),
    Conv3x3(Box<conv::ConvState>),
    Up2x(Box<conv::UpState>),
    WindowAttention(Box<attention::WindowState>),
    GroupedLinearAttention(Box<attention::LinAttnState>),
    LayerNorm(Box<LayerNormState>),
}

pub(crate) struct LayerNormState {
    pub x: NodeId,
    pub gamma: NodeId,
    pub beta: NodeId,
    pub normed: Array2<f64>,
    pub inv_std: Vec<f64>,
}

struct Node {
    value: Array2<f64>,
    grad: Option<Array2<f64>>,
    op: Op,
    needs_grad: bool,
}

/// The recording tape. Create one per forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Array2<f64>, op: Op, needs_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            grad: None,
            op,
            needs_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn ng(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    /// Trainable leaf (parameters).
    pub fn leaf(&mut self, value: Array2<f64>) -> NodeId {
        self.push(value, Op::Leaf, true)
    }

    /// Non-trainable leaf (inputs, targets, frozen parameters).
    pub fn constant(&mut self, value: Array2<f64>) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, id: NodeId) -> &Array2<f64> {
        &self.nodes[id.0].value
    }

    pub fn grad(&self, id: NodeId) -> Option<&Array2<f64>> {
        self.nodes[id.0].grad.as_ref()
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = &self.nodes[a.0].value + &self.nodes[b.0].value;
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = &self.nodes[a.0].value - &self.nodes[b.0].value;
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::Sub(a, b), ng)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = &self.nodes[a.0].value * &self.nodes[b.0].value;
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::Mul(a, b), ng)
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = self.nodes[a.0].value.mapv(|x| x * c);
        let ng = self.ng(a);
        self.push(v, Op::Scale(a, c), ng)
    }

    pub fn add_scalar(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = self.nodes[a.0].value.mapv(|x| x + c);
        let ng = self.ng(a);
        self.push(v, Op::AddScalar(a), ng)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.nodes[a.0].value.dot(&self.nodes[b.0].value);
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::MatMul(a, b), ng)
    }

    pub fn add_bias_rows(&mut self, a: NodeId, bias: NodeId) -> NodeId {
        let b = &self.nodes[bias.0].value;
        assert_eq!(b.nrows(), 1, "bias must be [1, n]");
        let v = &self.nodes[a.0].value + b;
        let ng = self.ng(a) || self.ng(bias);
        self.push(v, Op::AddBiasRows(a, bias), ng)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a.0].value.mapv(|x| 1.0 / (1.0 + (-x).exp()));
        let ng = self.ng(a);
        self.push(v, Op::Sigmoid(a), ng)
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a.0].value.mapv(|x| x.max(0.0));
        let ng = self.ng(a);
        self.push(v, Op::Relu(a), ng)
    }

    pub fn elu_p1(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a.0]
            .value
            .mapv(|x| if x >= 0.0 { x + 1.0 } else { x.exp() });
        let ng = self.ng(a);
        self.push(v, Op::EluP1(a), ng)
    }

    pub fn ln(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a.0].value.mapv(f64::ln);
        let ng = self.ng(a);
        self.push(v, Op::Ln(a), ng)
    }

    pub fn sqrt(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a.0].value.mapv(f64::sqrt);
        let ng = self.ng(a);
        self.push(v, Op::Sqrt(a), ng)
    }

    pub fn recip(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a.0].value.mapv(|x| 1.0 / x);
        let ng = self.ng(a);
        self.push(v, Op::Recip(a), ng)
    }

    pub fn clamp(&mut self, a: NodeId, lo: f64, hi: f64) -> NodeId {
        let v = self.nodes[a.0].value.mapv(|x| x.clamp(lo, hi));
        let ng = self.ng(a);
        self.push(v, Op::Clamp(a, lo, hi), ng)
    }

    pub fn row_sum(&mut self, a: NodeId) -> NodeId {
        let src = &self.nodes[a.0].value;
        let mut v = Array2::zeros((src.nrows(), 1));
        for (i, row) in src.rows().into_iter().enumerate() {
            v[[i, 0]] = row.sum();
        }
        let ng = self.ng(a);
        self.push(v, Op::RowSum(a), ng)
    }

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let s = self.nodes[a.0].value.sum();
        let ng = self.ng(a);
        self.push(Array2::from_elem((1, 1), s), Op::SumAll(a), ng)
    }

    pub fn row_scale(&mut self, a: NodeId, s: NodeId) -> NodeId {
        let sv = &self.nodes[s.0].value;
        assert_eq!(sv.ncols(), 1, "row scale factor must be [m, 1]");
        assert_eq!(sv.nrows(), self.nodes[a.0].value.nrows());
        let mut v = self.nodes[a.0].value.clone();
        for (i, mut row) in v.rows_mut().into_iter().enumerate() {
            let f = sv[[i, 0]];
            row.mapv_inplace(|x| x * f);
        }
        let ng = self.ng(a) || self.ng(s);
        self.push(v, Op::RowScale(a, s), ng)
    }

    pub fn mul_const(&mut self, a: NodeId, c: Array2<f64>) -> NodeId {
        let v = &self.nodes[a.0].value * &c;
        let ng = self.ng(a);
        self.push(v, Op::MulConst(a, c), ng)
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty());
        let rows = self.nodes[parts[0].0].value.nrows();
        let widths: Vec<usize> = parts
            .iter()
            .map(|p| {
                assert_eq!(self.nodes[p.0].value.nrows(), rows);
                self.nodes[p.0].value.ncols()
            })
            .collect();
        let total: usize = widths.iter().sum();
        let mut v = Array2::zeros((rows, total));
        let mut off = 0;
        for (p, w) in parts.iter().zip(&widths) {
            v.slice_mut(ndarray::s![.., off..off + w])
                .assign(&self.nodes[p.0].value);
            off += w;
        }
        let ng = parts.iter().any(|p| self.ng(*p));
        self.push(v, Op::ConcatCols(parts.to_vec(), widths), ng)
    }

    pub fn reshape(&mut self, a: NodeId, rows: usize, cols: usize) -> NodeId {
        let src = &self.nodes[a.0].value;
        assert_eq!(src.len(), rows * cols, "reshape must preserve element count");
        let v = Array2::from_shape_vec((rows, cols), src.iter().cloned().collect())
            .expect("element count checked");
        let ng = self.ng(a);
        self.push(v, Op::Reshape(a), ng)
    }

    pub fn gather_rows(&mut self, a: NodeId, indices: Vec<usize>) -> NodeId {
        let src = &self.nodes[a.0].value;
        let mut v = Array2::zeros((indices.len(), src.ncols()));
        for (i, &idx) in indices.iter().enumerate() {
            v.row_mut(i).assign(&src.row(idx));
        }
        let ng = self.ng(a);
        self.push(v, Op::GatherRows(a, indices), ng)
    }

    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, eps: f64) -> NodeId {
        let xv = &self.nodes[x.0].value;
        let n = xv.ncols() as f64;
        let mut normed = xv.clone();
        let mut inv_std = Vec::with_capacity(xv.nrows());
        for mut row in normed.rows_mut() {
            let mean = row.sum() / n;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let is = 1.0 / (var + eps).sqrt();
            inv_std.push(is);
            row.mapv_inplace(|v| (v - mean) * is);
        }
        let g = &self.nodes[gamma.0].value;
        let b = &self.nodes[beta.0].value;
        let v = &normed * g + b;
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        self.push(
            v,
            Op::LayerNorm(Box::new(LayerNormState {
                x,
                gamma,
                beta,
                normed,
                inv_std,
            })),
            ng,
        )
    }

    fn accumulate(&mut self, id: NodeId, delta: &Array2<f64>) {
        if !self.nodes[id.0].needs_grad {
            return;
        }
        match &mut self.nodes[id.0].grad {
            Some(g) => *g += delta,
            slot => {
                // normalize to row-major so ops may assume slice access
                let owned = if delta.is_standard_layout() {
                    delta.clone()
                } else {
                    Array2::from_shape_vec(delta.dim(), delta.iter().cloned().collect())
                        .expect("shape preserved")
                };
                *slot = Some(owned);
            }
        }
    }

    /// Run the reverse sweep from `loss` (must be `[1, 1]`).
    pub fn backward(&mut self, loss: NodeId) {
        assert_eq!(self.nodes[loss.0].value.dim(), (1, 1), "loss must be scalar");
        self.nodes[loss.0].grad = Some(Array2::ones((1, 1)));
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(grad) = self.nodes[i].grad.take() else {
                continue;
            };
            // Ops read parent values; the op payload is moved out and
            // restored so the borrow checker lets us mutate grads.
            let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
            self.backprop_one(&op, i, &grad);
            self.nodes[i].op = op;
            self.nodes[i].grad = Some(grad);
        }
    }

    fn backprop_one(&mut self, op: &Op, node: usize, grad: &Array2<f64>) {
        match op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(*a, grad);
                self.accumulate(*b, grad);
            }
            Op::Sub(a, b) => {
                self.accumulate(*a, grad);
                let neg = grad.mapv(|g| -g);
                self.accumulate(*b, &neg);
            }
            Op::Mul(a, b) => {
                if self.ng(*a) {
                    let da = grad * &self.nodes[b.0].value;
                    self.accumulate(*a, &da);
                }
                if self.ng(*b) {
                    let db = grad * &self.nodes[a.0].value;
                    self.accumulate(*b, &db);
                }
            }
            Op::Scale(a, c) => {
                let da = grad.mapv(|g| g * c);
                self.accumulate(*a, &da);
            }
            Op::AddScalar(a) => {
                self.accumulate(*a, grad);
            }
            Op::MatMul(a, b) => {
                if self.ng(*a) {
                    let da = grad.dot(&self.nodes[b.0].value.t());
                    self.accumulate(*a, &da);
                }
                if self.ng(*b) {
                    let db = self.nodes[a.0].value.t().dot(grad);
                    self.accumulate(*b, &db);
                }
            }
            Op::AddBiasRows(a, bias) => {
                self.accumulate(*a, grad);
                if self.ng(*bias) {
                    let db = grad.sum_axis(Axis(0)).insert_axis(Axis(0));
                    self.accumulate(*bias, &db);
                }
            }
            Op::Sigmoid(a) => {
                let y = &self.nodes[node].value;
                let da = grad * &y.mapv(|s| s * (1.0 - s));
                self.accumulate(*a, &da);
            }
            Op::Relu(a) => {
                let da = grad * &self.nodes[a.0].value.mapv(|x| if x > 0.0 { 1.0 } else { 0.0 });
                self.accumulate(*a, &da);
            }
            Op::EluP1(a) => {
                let da = grad
                    * &self.nodes[a.0]
                        .value
                        .mapv(|x| if x >= 0.0 { 1.0 } else { x.exp() });
                self.accumulate(*a, &da);
            }
            Op::Ln(a) => {
                let da = grad / &self.nodes[a.0].value;
                self.accumulate(*a, &da);
            }
            Op::Sqrt(a) => {
                let da = grad * &self.nodes[node].value.mapv(|y| 0.5 / y);
                self.accumulate(*a, &da);
            }
            Op::Recip(a) => {
                let da = grad * &self.nodes[node].value.mapv(|y| -y * y);
                self.accumulate(*a, &da);
            }
            Op::Clamp(a, lo, hi) => {
                let src = &self.nodes[a.0].value;
                let mut da = grad.clone();
                ndarray::Zip::from(&mut da).and(src).for_each(|g, &x| {
                    if x < *lo || x > *hi {
                        *g = 0.0;
                    }
                });
                self.accumulate(*a, &da);
            }
            Op::RowSum(a) => {
                let cols = self.nodes[a.0].value.ncols();
                let mut da = Array2::zeros((grad.nrows(), cols));
                for (i, mut row) in da.rows_mut().into_iter().enumerate() {
                    row.fill(grad[[i, 0]]);
                }
                self.accumulate(*a, &da);
            }
            Op::SumAll(a) => {
                let g = grad[[0, 0]];
                let da = Array2::from_elem(self.nodes[a.0].value.dim(), g);
                self.accumulate(*a, &da);
            }
            Op::RowScale(a, s) => {
                if self.ng(*a) {
                    let sv = &self.nodes[s.0].value;
                    let mut da = grad.clone();
                    for (i, mut row) in da.rows_mut().into_iter().enumerate() {
                        let f = sv[[i, 0]];
                        row.mapv_inplace(|x| x * f);
                    }
                    self.accumulate(*a, &da);
                }
                if self.ng(*s) {
                    let av = &self.nodes[a.0].value;
                    let mut ds = Array2::zeros((av.nrows(), 1));
                    for i in 0..av.nrows() {
                        ds[[i, 0]] = grad.row(i).dot(&av.row(i));
                    }
                    self.accumulate(*s, &ds);
                }
            }
            Op::MulConst(a, c) => {
                let da = grad * c;
                self.accumulate(*a, &da);
            }
            Op::ConcatCols(parts, widths) => {
                let mut off = 0;
                for (p, w) in parts.iter().zip(widths) {
                    if self.ng(*p) {
                        let dp = grad.slice(ndarray::s![.., off..off + *w]).to_owned();
                        self.accumulate(*p, &dp);
                    }
                    off += w;
                }
            }
            Op::GatherRows(a, indices) => {
                let src_rows = self.nodes[a.0].value.nrows();
                let mut da = Array2::zeros((src_rows, grad.ncols()));
                for (i, &idx) in indices.iter().enumerate() {
                    let mut dst = da.row_mut(idx);
                    dst += &grad.row(i);
                }
                self.accumulate(*a, &da);
            }
            Op::Reshape(a) => {
                let dims = self.nodes[a.0].value.dim();
                let da = Array2::from_shape_vec(dims, grad.iter().cloned().collect())
                    .expect("reshape grad has matching element count");
                self.accumulate(*a, &da);
            }
            Op::Conv3x3(state) => conv::backward_conv(self, state, grad),
            Op::Up2x(state) => conv::backward_up2x(self, state, grad),
            Op::WindowAttention(state) => attention::backward_window(self, state, grad),
            Op::GroupedLinearAttention(state) => attention::backward_linattn(self, state, grad),
            Op::LayerNorm(state) => {
                let n = state.normed.ncols() as f64;
                let gamma = self.nodes[state.gamma.0].value.clone();
                if self.ng(state.gamma) {
                    let dg = (grad * &state.normed)
                        .sum_axis(Axis(0))
                        .insert_axis(Axis(0));
                    self.accumulate(state.gamma, &dg);
                }
                if self.ng(state.beta) {
                    let db = grad.sum_axis(Axis(0)).insert_axis(Axis(0));
                    self.accumulate(state.beta, &db);
                }
                if self.ng(state.x) {
                    // dx = (1/n) * inv_std * (n*dxhat - sum(dxhat) - xhat*sum(dxhat*xhat))
                    let dxhat = grad * &gamma;
                    let mut dx = Array2::zeros(dxhat.dim());
                    for i in 0..dxhat.nrows() {
                        let dxh = dxhat.row(i);
                        let xh = state.normed.row(i);
                        let sum_dxh = dxh.sum();
                        let sum_dxh_xh = dxh.dot(&xh);
                        let is = state.inv_std[i];
                        for j in 0..dxhat.ncols() {
                            dx[[i, j]] =
                                is / n * (n * dxh[j] - sum_dxh - xh[j] * sum_dxh_xh);
                        }
                    }
                    self.accumulate(state.x, &dx);
                }
            }
        }
    }
}

#[cfg(test)]
pub(crate) mod gradcheck;
