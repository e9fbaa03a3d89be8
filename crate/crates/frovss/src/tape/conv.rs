//! Spatial ops: 3x3 convolution (shifted-matmul formulation) and
//! bilinear 2x up-sampling.
//!
//! Feature grids are stored `[batch*h*w, channels]`, row-major in
//! `(batch, y, x)`.

use ndarray::{s, Array2};

use super::{NodeId, Op, Tape};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PadMode {
    Zero,
    Reflect,
}

/// Geometry of a 3x3 same-size convolution.
#[derive(Debug, Clone)]
pub struct Conv3x3 {
    pub batch: usize,
    pub h: usize,
    pub w: usize,
    pub cin: usize,
    pub cout: usize,
    pub dilation: usize,
    pub pad: PadMode,
}

pub(crate) struct ConvState {
    pub geom: Conv3x3,
    pub x: NodeId,
    pub weight: NodeId,
    pub bias: NodeId,
}

impl Conv3x3 {
    /// Reflect padding requires `dilation <= dim - 1`.
    pub fn supports(&self) -> bool {
        match self.pad {
            PadMode::Zero => true,
            PadMode::Reflect => self.dilation <= self.h - 1 && self.dilation <= self.w - 1,
        }
    }

    /// Map a padded coordinate to an interior coordinate, or `None`
    /// for zero padding.
    fn src_coord(&self, py: isize, px: isize) -> Option<(usize, usize)> {
        let p = self.dilation as isize;
        let (h, w) = (self.h as isize, self.w as isize);
        let reflect = |v: isize, n: isize| -> isize {
            if v < 0 {
                -v
            } else if v >= n {
                2 * n - 2 - v
            } else {
                v
            }
        };
        let y = py - p;
        let x = px - p;
        match self.pad {
            PadMode::Zero => {
                if y < 0 || y >= h || x < 0 || x >= w {
                    None
                } else {
                    Some((y as usize, x as usize))
                }
            }
            PadMode::Reflect => Some((reflect(y, h) as usize, reflect(x, w) as usize)),
        }
    }

}

/// Row map from every (output pixel, kernel tap) to a source pixel of
/// one item (usize::MAX = zero fill); shared across the batch.
fn build_tap_map(geom: &Conv3x3) -> Vec<usize> {
    let hw = geom.h * geom.w;
    let mut map = vec![usize::MAX; hw * 9];
    for y in 0..geom.h as isize {
        for x in 0..geom.w as isize {
            for k in 0..9isize {
                let (ky, kx) = (k / 3, k % 3);
                let py = y + (ky - 1) * geom.dilation as isize + geom.dilation as isize;
                let px = x + (kx - 1) * geom.dilation as isize + geom.dilation as isize;
                if let Some((sy, sx)) = geom.src_coord(py, px) {
                    map[(y as usize * geom.w + x as usize) * 9 + k as usize] =
                        sy * geom.w + sx;
                }
            }
        }
    }
    map
}

/// Gather the `[batch*h*w, 9*cin]` patch matrix (columns grouped by
/// kernel tap).
fn im2col(geom: &Conv3x3, x: &Array2<f64>, tap_map: &[usize]) -> Array2<f64> {
    let hw = geom.h * geom.w;
    let cin = geom.cin;
    let mut cols = Array2::zeros((geom.batch * hw, 9 * cin));
    for b in 0..geom.batch {
        let base = b * hw;
        for p in 0..hw {
            let mut dst = cols.row_mut(base + p);
            let dst = dst.as_slice_mut().expect("row-major");
            for k in 0..9 {
                let src = tap_map[p * 9 + k];
                if src != usize::MAX {
                    let src_row = x.row(base + src);
                    let src = src_row.as_slice().expect("row-major");
                    dst[k * cin..(k + 1) * cin].copy_from_slice(src);
                }
            }
        }
    }
    cols
}

impl Conv3x3 {
    /// The unpadded, undilated case gets a fused kernel.
    fn is_fast_path(&self) -> bool {
        self.pad == PadMode::Zero && self.dilation == 1
    }
}

/// Valid output x-range for a horizontal tap offset.
fn x_range(dx: isize, w: usize) -> (usize, usize) {
    if dx < 0 {
        (1, w)
    } else if dx > 0 {
        (0, w - 1)
    } else {
        (0, w)
    }
}

/// Fused forward for zero padding, dilation 1.
fn direct_conv_fwd(geom: &Conv3x3, x: &[f64], weight: &[f64], out: &mut [f64]) {
    let (h, w) = (geom.h, geom.w);
    let (cin, cout) = (geom.cin, geom.cout);
    for item in 0..geom.batch {
        let base = item * h * w;
        for y in 0..h {
            for k in 0..9 {
                let (ky, kx) = (k / 3, k % 3);
                let sy = y as isize + ky as isize - 1;
                if sy < 0 || sy >= h as isize {
                    continue;
                }
                let dx = kx as isize - 1;
                let (x0, x1) = x_range(dx, w);
                let wt = &weight[k * cin * cout..(k + 1) * cin * cout];
                let src_row = (base + sy as usize * w) as isize;
                for px in x0..x1 {
                    let src = ((src_row + px as isize + dx) as usize) * cin;
                    let dst = (base + y * w + px) * cout;
                    let xin = &x[src..src + cin];
                    let o = &mut out[dst..dst + cout];
                    for (ci, xv) in xin.iter().enumerate() {
                        let wrow = &wt[ci * cout..(ci + 1) * cout];
                        for (ov, wv) in o.iter_mut().zip(wrow) {
                            *ov += xv * wv;
                        }
                    }
                }
            }
        }
    }
}

/// Fused input gradient (the transposed kernel).
fn direct_conv_dx(geom: &Conv3x3, dy: &[f64], weight: &[f64], dx_out: &mut [f64]) {
    let (h, w) = (geom.h, geom.w);
    let (cin, cout) = (geom.cin, geom.cout);
    for item in 0..geom.batch {
        let base = item * h * w;
        for y in 0..h {
            for k in 0..9 {
                let (ky, kx) = (k / 3, k % 3);
                // source row y feeds output row y - (ky - 1)
                let oy = y as isize - (ky as isize - 1);
                if oy < 0 || oy >= h as isize {
                    continue;
                }
                let dxo = -(kx as isize - 1);
                let (x0, x1) = x_range(dxo, w);
                let wt = &weight[k * cin * cout..(k + 1) * cin * cout];
                let dst_row = (base + oy as usize * w) as isize;
                for px in x0..x1 {
                    let dst = ((dst_row + px as isize + dxo) as usize) * cout;
                    let src = (base + y * w + px) * cin;
                    let g = &dy[dst..dst + cout];
                    let d = &mut dx_out[src..src + cin];
                    for (ci, dv) in d.iter_mut().enumerate() {
                        let wrow = &wt[ci * cout..(ci + 1) * cout];
                        let mut acc = 0.0;
                        for (gv, wv) in g.iter().zip(wrow) {
                            acc += gv * wv;
                        }
                        *dv += acc;
                    }
                }
            }
        }
    }
}

/// Fused weight gradient.
fn direct_conv_dw(geom: &Conv3x3, x: &[f64], dy: &[f64], dw: &mut [f64]) {
    let (h, w) = (geom.h, geom.w);
    let (cin, cout) = (geom.cin, geom.cout);
    for item in 0..geom.batch {
        let base = item * h * w;
        for y in 0..h {
            for k in 0..9 {
                let (ky, kx) = (k / 3, k % 3);
                let sy = y as isize + ky as isize - 1;
                if sy < 0 || sy >= h as isize {
                    continue;
                }
                let dx = kx as isize - 1;
                let (x0, x1) = x_range(dx, w);
                let wt = &mut dw[k * cin * cout..(k + 1) * cin * cout];
                let src_row = (base + sy as usize * w) as isize;
                for px in x0..x1 {
                    let src = ((src_row + px as isize + dx) as usize) * cin;
                    let dst = (base + y * w + px) * cout;
                    let xin = &x[src..src + cin];
                    let g = &dy[dst..dst + cout];
                    for (ci, xv) in xin.iter().enumerate() {
                        let wrow = &mut wt[ci * cout..(ci + 1) * cout];
                        for (wv, gv) in wrow.iter_mut().zip(g) {
                            *wv += xv * gv;
                        }
                    }
                }
            }
        }
    }
}

fn standard(a: &Array2<f64>) -> std::borrow::Cow<'_, Array2<f64>> {
    if a.is_standard_layout() {
        std::borrow::Cow::Borrowed(a)
    } else {
        std::borrow::Cow::Owned(
            Array2::from_shape_vec(a.dim(), a.iter().cloned().collect()).unwrap(),
        )
    }
}

impl Tape {
    /// 3x3 same-size convolution.
    ///
    /// `x`: `[batch*h*w, cin]`, `weight`: `[9*cin, cout]` with rows
    /// grouped by kernel offset (ky, kx) in scan order, `bias`: `[1, cout]`.
    pub fn conv3x3(&mut self, geom: Conv3x3, x: NodeId, weight: NodeId, bias: NodeId) -> NodeId {
        assert!(geom.supports(), "dilation too large for reflect padding");
        let xv = self.value(x);
        assert_eq!(xv.dim(), (geom.batch * geom.h * geom.w, geom.cin));
        let wv = self.value(weight);
        assert_eq!(wv.dim(), (9 * geom.cin, geom.cout));

        let mut out;
        if geom.is_fast_path() {
            out = Array2::zeros((geom.batch * geom.h * geom.w, geom.cout));
            let xs = standard(self.value(x));
            let ws = standard(self.value(weight));
            direct_conv_fwd(
                &geom,
                xs.as_slice().unwrap(),
                ws.as_slice().unwrap(),
                out.as_slice_mut().unwrap(),
            );
        } else {
            let tap_map = build_tap_map(&geom);
            let cols = im2col(&geom, &standard(self.value(x)), &tap_map);
            out = cols.dot(self.value(weight));
        }
        out += self.value(bias);

        let ng = self.ng(x) || self.ng(weight) || self.ng(bias);
        self.push(
            out,
            Op::Conv3x3(Box::new(ConvState { geom, x, weight, bias })),
            ng,
        )
    }
}

pub(crate) fn backward_conv(tape: &mut Tape, state: &ConvState, grad: &Array2<f64>) {
    let geom = &state.geom;
    let hw = geom.h * geom.w;
    let cin = geom.cin;
    let need_x = tape.ng(state.x);
    let need_w = tape.ng(state.weight);

    if geom.is_fast_path() {
        let gs = standard(grad);
        let g = gs.as_slice().unwrap();
        if need_w {
            let xs = standard(tape.value(state.x));
            let mut dw = Array2::zeros((9 * cin, geom.cout));
            direct_conv_dw(geom, xs.as_slice().unwrap(), g, dw.as_slice_mut().unwrap());
            tape.accumulate(state.weight, &dw);
        }
        if need_x {
            let ws = standard(tape.value(state.weight));
            let mut dx = Array2::zeros((geom.batch * hw, cin));
            direct_conv_dx(geom, g, ws.as_slice().unwrap(), dx.as_slice_mut().unwrap());
            tape.accumulate(state.x, &dx);
        }
    } else {
        let tap_map = build_tap_map(geom);
        if need_w {
            let cols = im2col(geom, &standard(tape.value(state.x)), &tap_map);
            let dweight = cols.t().dot(grad);
            tape.accumulate(state.weight, &dweight);
        }
        if need_x {
            let dcols = grad.dot(&tape.value(state.weight).t());
            let dcols = standard(&dcols).into_owned();
            let mut dx = Array2::zeros((geom.batch * hw, cin));
            for b in 0..geom.batch {
                let base = b * hw;
                for p in 0..hw {
                    let src_row = dcols.row(base + p);
                    let src = src_row.as_slice().expect("row-major");
                    for k in 0..9 {
                        let dst = tap_map[p * 9 + k];
                        if dst != usize::MAX {
                            let mut drow = dx.row_mut(base + dst);
                            let drow = drow.as_slice_mut().expect("row-major");
                            for c in 0..cin {
                                drow[c] += src[k * cin + c];
                            }
                        }
                    }
                }
            }
            tape.accumulate(state.x, &dx);
        }
    }
    if tape.ng(state.bias) {
        let db = grad.sum_axis(ndarray::Axis(0)).insert_axis(ndarray::Axis(0));
        tape.accumulate(state.bias, &db);
    }
}

/// Bilinear 2x up-sampling geometry.
#[derive(Debug, Clone)]
pub struct Up2x {
    pub batch: usize,
    pub h: usize,
    pub w: usize,
}

pub(crate) struct UpState {
    pub geom: Up2x,
    pub x: NodeId,
}

/// Half-pixel-center source position stencil for a doubled axis.
fn axis_taps(n: usize) -> Vec<((usize, f64), (usize, f64))> {
    let mut taps = Vec::with_capacity(2 * n);
    for o in 0..2 * n {
        let src = (o as f64 + 0.5) / 2.0 - 0.5;
        let f = src.floor();
        let t = src - f;
        let i0 = f.max(0.0) as usize;
        let i1 = ((f as isize + 1).clamp(0, n as isize - 1)) as usize;
        let i0 = i0.min(n - 1);
        taps.push(((i0, 1.0 - t), (i1, t)));
    }
    taps
}

/// Separable forward: y-pass over whole `w*c` rows, then an x-pass
/// over channel blocks.
fn up2x_forward(geom: &Up2x, x: &Array2<f64>) -> Array2<f64> {
    let c = x.ncols();
    let (h, w) = (geom.h, geom.w);
    let (oh, ow) = (2 * h, 2 * w);
    let ys = axis_taps(h);
    let xs = axis_taps(w);

    let mut out = Array2::zeros((geom.batch * oh * ow, c));
    let mut rows_y = Array2::zeros((oh, w * c));
    for b in 0..geom.batch {
        let ibase = b * h * w;
        // y-pass: big contiguous row combinations
        for (oy, ((y0, wy0), (y1, wy1))) in ys.iter().copied().enumerate() {
            let src0 = x.slice(s![ibase + y0 * w..ibase + (y0 + 1) * w, ..]);
            let src1 = x.slice(s![ibase + y1 * w..ibase + (y1 + 1) * w, ..]);
            let mut dst = rows_y.row_mut(oy);
            let dst = dst.as_slice_mut().expect("row-major");
            let s0 = src0.to_slice().expect("row-major");
            let s1 = src1.to_slice().expect("row-major");
            for i in 0..w * c {
                dst[i] = wy0 * s0[i] + wy1 * s1[i];
            }
        }
        // x-pass: per output pixel, two channel blocks
        let obase = b * oh * ow;
        for oy in 0..oh {
            let src = rows_y.row(oy);
            let src = src.as_slice().expect("row-major");
            for (ox, ((x0, wx0), (x1, wx1))) in xs.iter().copied().enumerate() {
                let mut dst = out.row_mut(obase + oy * ow + ox);
                let dst = dst.as_slice_mut().expect("row-major");
                let b0 = &src[x0 * c..(x0 + 1) * c];
                let b1 = &src[x1 * c..(x1 + 1) * c];
                for ch in 0..c {
                    dst[ch] = wx0 * b0[ch] + wx1 * b1[ch];
                }
            }
        }
    }
    out
}

impl Tape {
    /// Bilinear x2 up-sample of `[batch*h*w, c]` -> `[batch*2h*2w, c]`.
    pub fn up2x(&mut self, geom: Up2x, x: NodeId) -> NodeId {
        let xv = self.value(x);
        assert_eq!(xv.nrows(), geom.batch * geom.h * geom.w);
        let out = up2x_forward(&geom, xv);
        let ng = self.ng(x);
        self.push(out, Op::Up2x(Box::new(UpState { geom, x })), ng)
    }
}

pub(crate) fn backward_up2x(tape: &mut Tape, state: &UpState, grad: &Array2<f64>) {
    if !tape.ng(state.x) {
        return;
    }
    let geom = &state.geom;
    let c = grad.ncols();
    let (h, w) = (geom.h, geom.w);
    let (oh, ow) = (2 * h, 2 * w);
    let ys = axis_taps(h);
    let xs = axis_taps(w);

    let mut dx = Array2::zeros((geom.batch * h * w, c));
    let mut drows_y = Array2::zeros((oh, w * c));
    for b in 0..geom.batch {
        let obase = b * oh * ow;
        // transpose of the x-pass
        drows_y.fill(0.0);
        for oy in 0..oh {
            let mut dst = drows_y.row_mut(oy);
            let dst = dst.as_slice_mut().expect("row-major");
            for (ox, ((x0, wx0), (x1, wx1))) in xs.iter().copied().enumerate() {
                let g = grad.row(obase + oy * ow + ox);
                let g = g.as_slice().expect("row-major");
                for ch in 0..c {
                    dst[x0 * c + ch] += wx0 * g[ch];
                    dst[x1 * c + ch] += wx1 * g[ch];
                }
            }
        }
        // transpose of the y-pass
        let ibase = b * h * w;
        for (oy, ((y0, wy0), (y1, wy1))) in ys.iter().copied().enumerate() {
            let src = drows_y.row(oy);
            let src = src.as_slice().expect("row-major");
            for (yi, wy) in [(y0, wy0), (y1, wy1)] {
                let mut dst = dx.slice_mut(s![ibase + yi * w..ibase + (yi + 1) * w, ..]);
                let dst = dst.as_slice_mut().expect("row-major");
                for i in 0..w * c {
                    dst[i] += wy * src[i];
                }
            }
        }
    }
    tape.accumulate(state.x, &dx);
}
