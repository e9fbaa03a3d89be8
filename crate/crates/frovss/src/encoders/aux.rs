//! Randomly-initialized auxiliary guidance encoder.
//!
//! A frozen pyramid of strided 3x3 convolutions over the raw image;
//! even untrained features of this kind carry useful edge and color
//! structure for the decoder's fusion and up-sampling stages.
//! Parameters are derived from the seed and never train, so they are
//! buffers rather than checkpointed parameters.

use ndarray::{Array2, Array3};
use rand::Rng;

use crate::error::{Error, Result};
use crate::rng::stream;

/// One pyramid level at a fixed stride.
#[derive(Debug, Clone)]
pub struct GuidanceLevel {
    pub stride: usize,
    pub h: usize,
    pub w: usize,
    /// `[h * w, channels]`.
    pub data: Array2<f64>,
}

/// Ordered coarsest to finest; may be empty when guidance is disabled.
#[derive(Debug, Clone, Default)]
pub struct GuidanceFeatures {
    pub levels: Vec<GuidanceLevel>,
}

impl GuidanceFeatures {
    pub fn is_empty(&self) -> bool {
        self.levels.is_empty()
    }

    pub fn coarsest(&self) -> Option<&GuidanceLevel> {
        self.levels.first()
    }

    /// The level at exactly `stride`, if present.
    pub fn at_stride(&self, stride: usize) -> Option<&GuidanceLevel> {
        self.levels.iter().find(|l| l.stride == stride)
    }

    fn validate(&self) -> Result<()> {
        for pair in self.levels.windows(2) {
            if pair[1].h * pair[1].w <= pair[0].h * pair[0].w {
                return Err(Error::model(
                    "guidance levels must strictly increase in resolution",
                ));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct AuxEncoder {
    pub channels: usize,
    /// Requested strides, coarsest first; empty disables guidance.
    pub strides: Vec<usize>,
    seed: u64,
    /// 3x3 kernels: `weights[level][(ky*3+kx)*cin + ci][co]`.
    stem: Array2<f64>,
    down: Vec<Array2<f64>>,
}

fn conv3x3_plain(
    input: &Array2<f64>,
    h: usize,
    w: usize,
    weight: &Array2<f64>,
    stride: usize,
) -> (Array2<f64>, usize, usize) {
    let cin = input.ncols();
    let cout = weight.ncols();
    let oh = h / stride;
    let ow = w / stride;
    let mut out = Array2::zeros((oh * ow, cout));
    for oy in 0..oh {
        for ox in 0..ow {
            let cy = (oy * stride) as isize;
            let cx = (ox * stride) as isize;
            let mut acc = vec![0.0; cout];
            for ky in 0..3isize {
                for kx in 0..3isize {
                    let sy = cy + ky - 1;
                    let sx = cx + kx - 1;
                    if sy < 0 || sy >= h as isize || sx < 0 || sx >= w as isize {
                        continue;
                    }
                    let src = input.row((sy as usize) * w + sx as usize);
                    let wbase = ((ky * 3 + kx) as usize) * cin;
                    for ci in 0..cin {
                        let xv = src[ci];
                        if xv != 0.0 {
                            let wrow = weight.row(wbase + ci);
                            for (a, wv) in acc.iter_mut().zip(wrow.iter()) {
                                *a += xv * wv;
                            }
                        }
                    }
                }
            }
            let mut dst = out.row_mut(oy * ow + ox);
            for (d, a) in dst.iter_mut().zip(&acc) {
                *d = a.tanh();
            }
        }
    }
    (out, oh, ow)
}

impl AuxEncoder {
    /// `strides` must be powers of two, coarsest first (e.g. `[8, 4]`);
    /// an empty list disables guidance.
    pub fn new(channels: usize, strides: Vec<usize>, seed: u64) -> Result<Self> {
        let mut sorted = strides.clone();
        sorted.sort_unstable_by(|a, b| b.cmp(a));
        if sorted != strides {
            return Err(Error::config("guidance strides must be ordered coarsest first"));
        }
        for s in &strides {
            if !s.is_power_of_two() {
                return Err(Error::config(format!("guidance stride {s} must be a power of two")));
            }
        }
        let max_stride = strides.first().copied().unwrap_or(1);
        let depth = max_stride.trailing_zeros() as usize;
        let mut rng = stream(seed, "aux-init");
        let mut gen = |cin: usize, cout: usize| {
            let scale = (2.0 / (9.0 * cin as f64)).sqrt();
            Array2::from_shape_fn((9 * cin, cout), |_| rng.gen_range(-scale..scale) * 2.0)
        };
        let stem = gen(3, channels);
        let down = (0..depth).map(|_| gen(channels, channels)).collect();
        Ok(AuxEncoder {
            channels,
            strides,
            seed,
            stem,
            down,
        })
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Build the pyramid for one image.
    pub fn encode_aux(&self, image: &Array3<f64>) -> Result<GuidanceFeatures> {
        if self.strides.is_empty() {
            return Ok(GuidanceFeatures::default());
        }
        let (h, w, _) = image.dim();
        let max_stride = self.strides[0];
        if h % max_stride != 0 || w % max_stride != 0 {
            return Err(Error::model(format!(
                "image {h}x{w} is not a multiple of the coarsest guidance stride {max_stride}"
            )));
        }
        // Normalize to roughly [-1, 1].
        let mut x = Array2::zeros((h * w, 3));
        for y in 0..h {
            for xx in 0..w {
                for c in 0..3 {
                    x[[y * w + xx, c]] = image[[y, xx, c]] / 127.5 - 1.0;
                }
            }
        }
        let (mut cur, mut ch, mut cw) = conv3x3_plain(&x, h, w, &self.stem, 1);
        let mut by_stride = vec![(1usize, cur.clone(), ch, cw)];
        for conv in &self.down {
            let (next, nh, nw) = conv3x3_plain(&cur, ch, cw, conv, 2);
            cur = next;
            ch = nh;
            cw = nw;
            let stride = by_stride.last().unwrap().0 * 2;
            by_stride.push((stride, cur.clone(), ch, cw));
        }

        let mut levels = Vec::new();
        for want in &self.strides {
            let found = by_stride
                .iter()
                .find(|(s, _, _, _)| s == want)
                .ok_or_else(|| Error::model(format!("no pyramid level at stride {want}")))?;
            levels.push(GuidanceLevel {
                stride: found.0,
                h: found.2,
                w: found.3,
                data: found.1.clone(),
            });
        }
        let features = GuidanceFeatures { levels };
        features.validate()?;
        Ok(features)
    }
}
