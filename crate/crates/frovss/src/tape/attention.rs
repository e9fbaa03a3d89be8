//! Fused attention ops.
//!
//! Both ops take already-projected Q/K/V matrices and fold large batch
//! dimensions into rows, so the surrounding graph stays small.

use ndarray::{s, Array2};

use super::{NodeId, Op, Tape};

/// Non-overlapping window self-attention over a spatial grid.
///
/// Tokens are rows of `[batch*h*w, dim]` in `(batch, y, x)` order;
/// attention runs independently inside each `window x window` tile,
/// split across `heads`.
#[derive(Debug, Clone)]
pub struct WindowAttention {
    pub batch: usize,
    pub h: usize,
    pub w: usize,
    pub window: usize,
    pub heads: usize,
}

pub(crate) struct WindowState {
    pub geom: WindowAttention,
    pub q: NodeId,
    pub k: NodeId,
    pub v: NodeId,
    /// Row indices of each window's tokens, per (item, window).
    pub windows: Vec<Vec<usize>>,
    /// Softmax probabilities per (window, head): `[t, t]`.
    pub probs: Vec<Array2<f64>>,
}

impl WindowAttention {
    pub fn token_count(&self) -> usize {
        self.batch * self.h * self.w
    }

    fn window_rows(&self) -> Vec<Vec<usize>> {
        assert!(
            self.h % self.window == 0 && self.w % self.window == 0,
            "window must divide the grid"
        );
        let wy = self.h / self.window;
        let wx = self.w / self.window;
        let mut out = Vec::with_capacity(self.batch * wy * wx);
        for b in 0..self.batch {
            for gy in 0..wy {
                for gx in 0..wx {
                    let mut rows = Vec::with_capacity(self.window * self.window);
                    for iy in 0..self.window {
                        for ix in 0..self.window {
                            let y = gy * self.window + iy;
                            let x = gx * self.window + ix;
                            rows.push(b * self.h * self.w + y * self.w + x);
                        }
                    }
                    out.push(rows);
                }
            }
        }
        out
    }
}

fn softmax_rows_inplace(m: &mut Array2<f64>) {
    for mut row in m.rows_mut() {
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|x| (x - mx).exp());
        let sum = row.sum();
        row.mapv_inplace(|x| x / sum);
    }
}

impl Tape {
    /// `q`, `k`, `v`: `[batch*h*w, dim]`, `dim` divisible by `heads`.
    pub fn window_attention(
        &mut self,
        geom: WindowAttention,
        q: NodeId,
        k: NodeId,
        v: NodeId,
    ) -> NodeId {
        let dim = self.value(q).ncols();
        assert_eq!(self.value(q).nrows(), geom.token_count());
        assert_eq!(self.value(k).dim(), self.value(q).dim());
        assert_eq!(self.value(v).dim(), self.value(q).dim());
        assert_eq!(dim % geom.heads, 0, "head split must be exact");
        let dh = dim / geom.heads;
        let scale = 1.0 / (dh as f64).sqrt();

        let windows = geom.window_rows();
        let mut probs = Vec::with_capacity(windows.len() * geom.heads);
        let mut out = Array2::zeros((geom.token_count(), dim));

        for rows in &windows {
            let t = rows.len();
            let mut qw = Array2::zeros((t, dim));
            let mut kw = Array2::zeros((t, dim));
            let mut vw = Array2::zeros((t, dim));
            for (i, &r) in rows.iter().enumerate() {
                qw.row_mut(i).assign(&self.value(q).row(r));
                kw.row_mut(i).assign(&self.value(k).row(r));
                vw.row_mut(i).assign(&self.value(v).row(r));
            }
            for h in 0..geom.heads {
                let cols = s![.., h * dh..(h + 1) * dh];
                let qh = qw.slice(cols).to_owned();
                let kh = kw.slice(cols).to_owned();
                let vh = vw.slice(cols).to_owned();
                let mut scores = qh.dot(&kh.t());
                scores.mapv_inplace(|x| x * scale);
                softmax_rows_inplace(&mut scores);
                let oh = scores.dot(&vh);
                for (i, &r) in rows.iter().enumerate() {
                    out.slice_mut(s![r..r + 1, h * dh..(h + 1) * dh])
                        .assign(&oh.slice(s![i..i + 1, ..]));
                }
                probs.push(scores);
            }
        }

        let ng = self.ng(q) || self.ng(k) || self.ng(v);
        self.push(
            out,
            Op::WindowAttention(Box::new(WindowState {
                geom,
                q,
                k,
                v,
                windows,
                probs,
            })),
            ng,
        )
    }
}

pub(crate) fn backward_window(tape: &mut Tape, state: &WindowState, grad: &Array2<f64>) {
    let geom = &state.geom;
    let dim = grad.ncols();
    let dh = dim / geom.heads;
    let scale = 1.0 / (dh as f64).sqrt();

    let mut dq = Array2::zeros(grad.dim());
    let mut dk = Array2::zeros(grad.dim());
    let mut dv = Array2::zeros(grad.dim());

    for (wi, rows) in state.windows.iter().enumerate() {
        let t = rows.len();
        let mut qw = Array2::zeros((t, dim));
        let mut kw = Array2::zeros((t, dim));
        let mut vw = Array2::zeros((t, dim));
        let mut gw = Array2::zeros((t, dim));
        for (i, &r) in rows.iter().enumerate() {
            qw.row_mut(i).assign(&tape.value(state.q).row(r));
            kw.row_mut(i).assign(&tape.value(state.k).row(r));
            vw.row_mut(i).assign(&tape.value(state.v).row(r));
            gw.row_mut(i).assign(&grad.row(r));
        }
        for h in 0..geom.heads {
            let cols = s![.., h * dh..(h + 1) * dh];
            let qh = qw.slice(cols).to_owned();
            let kh = kw.slice(cols).to_owned();
            let vh = vw.slice(cols).to_owned();
            let gh = gw.slice(cols).to_owned();
            let probs = &state.probs[wi * geom.heads + h];

            let dvh = probs.t().dot(&gh);
            let dprobs = gh.dot(&vh.t());
            // softmax backward per row
            let mut dscores = Array2::zeros((t, t));
            for i in 0..t {
                let p = probs.row(i);
                let dp = dprobs.row(i);
                let dot = p.dot(&dp);
                for j in 0..t {
                    dscores[[i, j]] = p[j] * (dp[j] - dot) * scale;
                }
            }
            let dqh = dscores.dot(&kh);
            let dkh = dscores.t().dot(&qh);

            for (i, &r) in rows.iter().enumerate() {
                let cr = s![r..r + 1, h * dh..(h + 1) * dh];
                let ir = s![i..i + 1, ..];
                dq.slice_mut(cr).scaled_add(1.0, &dqh.slice(ir));
                dk.slice_mut(cr).scaled_add(1.0, &dkh.slice(ir));
                dv.slice_mut(cr).scaled_add(1.0, &dvh.slice(ir));
            }
        }
    }

    if tape.ng(state.q) {
        tape.accumulate(state.q, &dq);
    }
    if tape.ng(state.k) {
        tape.accumulate(state.k, &dk);
    }
    if tape.ng(state.v) {
        tape.accumulate(state.v, &dv);
    }
}

/// Linear attention over small token groups.
///
/// Rows of Q/K/V are `[groups*tokens, dim]`; attention mixes the
/// `tokens` rows within each group using the kernel feature map
/// `phi(x) = elu(x) + 1`:
///
/// `out_i = (phi(q_i) . S) / (phi(q_i) . z)` with
/// `S = sum_j phi(k_j)^T v_j` and `z = sum_j phi(k_j)`.
#[derive(Debug, Clone)]
pub struct GroupedLinearAttention {
    pub groups: usize,
    pub tokens: usize,
}

pub(crate) struct LinAttnState {
    pub geom: GroupedLinearAttention,
    pub q: NodeId,
    pub k: NodeId,
    pub v: NodeId,
    pub phi_q: Array2<f64>,
    pub phi_k: Array2<f64>,
    /// Per group: kernelized key-value summary `[dim, dim]`.
    pub summaries: Vec<Array2<f64>>,
    /// Per group: key normalizer `[dim]`.
    pub zs: Vec<Vec<f64>>,
    /// Per row: denominator.
    pub denoms: Vec<f64>,
}

fn elu_p1(x: f64) -> f64 {
    if x >= 0.0 {
        x + 1.0
    } else {
        x.exp()
    }
}

fn elu_p1_grad(x: f64) -> f64 {
    if x >= 0.0 {
        1.0
    } else {
        x.exp()
    }
}

const DENOM_FLOOR: f64 = 1e-9;

impl Tape {
    pub fn grouped_linear_attention(
        &mut self,
        geom: GroupedLinearAttention,
        q: NodeId,
        k: NodeId,
        v: NodeId,
    ) -> NodeId {
        let rows = geom.groups * geom.tokens;
        let dim = self.value(q).ncols();
        assert_eq!(self.value(q).nrows(), rows);
        assert_eq!(self.value(k).dim(), self.value(q).dim());
        assert_eq!(self.value(v).dim(), self.value(q).dim());

        let phi_q = self.value(q).mapv(elu_p1);
        let phi_k = self.value(k).mapv(elu_p1);
        let vv = self.value(v).clone();

        let mut out = Array2::zeros((rows, dim));
        let mut summaries = Vec::with_capacity(geom.groups);
        let mut zs = Vec::with_capacity(geom.groups);
        let mut denoms = vec![0.0; rows];
        for g in 0..geom.groups {
            let lo = g * geom.tokens;
            let hi = lo + geom.tokens;
            let pk = phi_k.slice(s![lo..hi, ..]);
            let vg = vv.slice(s![lo..hi, ..]);
            let summary = pk.t().dot(&vg);
            let z: Vec<f64> = pk.sum_axis(ndarray::Axis(0)).to_vec();
            for i in lo..hi {
                let pq = phi_q.row(i);
                let mut denom: f64 = pq.iter().zip(&z).map(|(a, b)| a * b).sum();
                denom = denom.max(DENOM_FLOOR);
                denoms[i] = denom;
                let num = pq.dot(&summary);
                out.row_mut(i).assign(&(&num / denom));
            }
            summaries.push(summary);
            zs.push(z);
        }

        let ng = self.ng(q) || self.ng(k) || self.ng(v);
        self.push(
            out,
            Op::GroupedLinearAttention(Box::new(LinAttnState {
                geom,
                q,
                k,
                v,
                phi_q,
                phi_k,
                summaries,
                zs,
                denoms,
            })),
            ng,
        )
    }
}

pub(crate) fn backward_linattn(tape: &mut Tape, state: &LinAttnState, grad: &Array2<f64>) {
    let geom = &state.geom;
    let dim = grad.ncols();
    let rows = geom.groups * geom.tokens;

    let mut dphi_q = Array2::zeros((rows, dim));
    let mut dphi_k = Array2::zeros((rows, dim));
    let mut dv = Array2::zeros((rows, dim));

    let vv = tape.value(state.v);
    for g in 0..geom.groups {
        let lo = g * geom.tokens;
        let hi = lo + geom.tokens;
        let summary = &state.summaries[g];
        let z = &state.zs[g];

        let mut dsummary = Array2::zeros((dim, dim));
        let mut dz = vec![0.0; dim];
        for i in lo..hi {
            let gout = grad.row(i);
            let pq = state.phi_q.row(i);
            let denom = state.denoms[i];
            // out_i = (pq . summary) / denom, denom = pq . z (floored)
            let num = pq.dot(summary);
            let gdot: f64 = gout
                .iter()
                .zip(num.iter())
                .map(|(a, b)| a * b / denom)
                .sum();
            // d pq
            let mut dpq = summary.dot(&gout.t().to_owned());
            let floored = pq.iter().zip(z.iter()).map(|(a, b)| a * b).sum::<f64>() <= DENOM_FLOOR;
            if !floored {
                for (j, d) in dpq.iter_mut().enumerate() {
                    *d = (*d - gdot * z[j]) / denom;
                }
            } else {
                dpq.mapv_inplace(|d| d / denom);
            }
            let mut row = dphi_q.row_mut(i);
            row += &dpq;
            // d summary, d z
            for a in 0..dim {
                let pa = pq[a];
                if pa != 0.0 {
                    let mut srow = dsummary.row_mut(a);
                    srow.scaled_add(pa / denom, &gout);
                }
            }
            if !floored {
                for (j, dzj) in dz.iter_mut().enumerate() {
                    *dzj -= gdot * pq[j] / denom;
                }
            }
        }
        // summary = phi_k^T v over the group; z = colsum(phi_k)
        for i in lo..hi {
            let pk = state.phi_k.row(i);
            let vg = vv.row(i);
            // d phi_k[i] from summary: dsummary[a,b] * v[i,b]
            let dpk_row = dsummary.dot(&vg.t().to_owned());
            {
                let mut row = dphi_k.row_mut(i);
                row += &dpk_row;
                for (j, dzj) in dz.iter().enumerate() {
                    row[j] += dzj;
                }
            }
            // d v[i] from summary: phi_k[i,a] * dsummary[a,b]
            let dv_row = pk.dot(&dsummary);
            let mut row = dv.row_mut(i);
            row += &dv_row;
        }
    }

    if tape.ng(state.q) {
        let dq = &dphi_q * &tape.value(state.q).mapv(elu_p1_grad);
        tape.accumulate(state.q, &dq);
    }
    if tape.ng(state.k) {
        let dk = &dphi_k * &tape.value(state.k).mapv(elu_p1_grad);
        tape.accumulate(state.k, &dk);
    }
    if tape.ng(state.v) {
        tape.accumulate(state.v, &dv);
    }
}
