//! Deterministic toy dense visual encoder.
//!
//! The frozen base reads each patch's luminance micro-texture and
//! soft-assigns it to the categories whose Walsh signatures it
//! correlates with, producing a feature near the matching category's
//! text embedding (the stand-in for vision-language pre-training). A
//! small trainable stack (per-layer mixing matrices tagged as
//! attention, per-layer gains as norms, residual MLPs, and an additive
//! positional table) sits on top and is what fine-tuning moves.

use ndarray::{Array1, Array2, Array3};
use rand::Rng;

use super::params::{ParamId, ParamRole, ParamStore};
use super::text::ToyTextEncoder;
use crate::data::{walsh_sign, TEXTURE_AMPLITUDE};
use crate::error::{Error, Result};
use crate::rng::stream;
use crate::tape::{NodeId, Tape};
use crate::vocab::CategorySpec;

/// Scale of the patch-content nuisance component (orthogonal to every
/// category embedding).
const NUISANCE_SCALE: f64 = 0.12;
/// Initialization noise of the mixing matrices.
const ATTN_INIT_NOISE: f64 = 0.01;
const MLP_INIT_NOISE: f64 = 0.02;

/// Patch-level features of one image.
#[derive(Debug, Clone)]
pub struct DenseVisualFeatures {
    /// `[h' * w', d]`, rows in scan order.
    pub features: Array2<f64>,
    pub grid: (usize, usize),
    pub patch_size: usize,
    pub source_resolution: (usize, usize),
}

impl DenseVisualFeatures {
    pub fn len(&self) -> usize {
        self.grid.0 * self.grid.1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Trainable stack handles plus the frozen world knowledge.
#[derive(Debug, Clone)]
pub struct ToyVisualEncoder {
    pub dim: usize,
    pub patch: usize,
    pub layers: usize,
    pub max_grid: usize,
    seed: u64,
    /// (category id, canonical embedding) for every world category.
    categories: Vec<(u32, Array1<f64>)>,
    background_slot: usize,
    nuisance_basis: Array2<f64>,
    pub attn: Vec<ParamId>,
    pub gains: Vec<ParamId>,
    pub mlp_in: Vec<ParamId>,
    pub mlp_out: Vec<ParamId>,
    pub positional: ParamId,
}

impl ToyVisualEncoder {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        world: &[CategorySpec],
        text: &ToyTextEncoder,
        dim: usize,
        patch: usize,
        layers: usize,
        mlp_hidden: usize,
        max_grid: usize,
        seed: u64,
    ) -> Result<Self> {
        if !patch.is_power_of_two() {
            return Err(Error::config(format!("patch size {patch} must be a power of two")));
        }
        let mut rng = stream(seed, "visual-init");
        let categories: Vec<(u32, Array1<f64>)> = world
            .iter()
            .enumerate()
            .map(|(row, spec)| (spec.id, text.category_embedding(row)))
            .collect();
        let background_slot = world
            .iter()
            .position(|c| c.id == crate::data::BACKGROUND_ID)
            .unwrap_or(0);

        let mut attn = Vec::with_capacity(layers);
        let mut gains = Vec::with_capacity(layers);
        let mut mlp_in = Vec::with_capacity(layers);
        let mut mlp_out = Vec::with_capacity(layers);
        for l in 1..=layers {
            let mut w = Array2::eye(dim);
            w.mapv_inplace(|x| x);
            for v in w.iter_mut() {
                *v += rng.gen_range(-ATTN_INIT_NOISE..ATTN_INIT_NOISE);
            }
            attn.push(store.register(format!("enc.layer{l}.attn"), ParamRole::Attention, l, w));
            gains.push(store.register(
                format!("enc.layer{l}.gain"),
                ParamRole::Norm,
                l,
                Array2::ones((1, dim)),
            ));
            let w1 = Array2::from_shape_fn((dim, mlp_hidden), |_| {
                rng.gen_range(-MLP_INIT_NOISE..MLP_INIT_NOISE)
            });
            let w2 = Array2::from_shape_fn((mlp_hidden, dim), |_| {
                rng.gen_range(-MLP_INIT_NOISE..MLP_INIT_NOISE)
            });
            mlp_in.push(store.register(format!("enc.layer{l}.mlp_in"), ParamRole::Mlp, l, w1));
            mlp_out.push(store.register(format!("enc.layer{l}.mlp_out"), ParamRole::Mlp, l, w2));
        }
        let positional = store.register(
            "enc.positional",
            ParamRole::Positional,
            0,
            Array2::zeros((max_grid * max_grid, dim)),
        );

        Ok(ToyVisualEncoder {
            dim,
            patch,
            layers,
            max_grid,
            seed,
            categories,
            background_slot,
            nuisance_basis: text.nuisance_basis(),
            attn,
            gains,
            mlp_in,
            mlp_out,
            positional,
        })
    }

    /// Frozen patch features before the trainable stack.
    pub fn base_features(&self, image: &Array3<f64>) -> Result<Array2<f64>> {
        let (h, w, c) = image.dim();
        if c != 3 {
            return Err(Error::model("expected an RGB image"));
        }
        if h % self.patch != 0 || w % self.patch != 0 {
            return Err(Error::model(format!(
                "image {h}x{w} is not a multiple of the patch size {}; pad first",
                self.patch
            )));
        }
        if image.iter().any(|v| !v.is_finite()) {
            return Err(Error::model("image contains non-finite pixel values"));
        }
        let (gh, gw) = (h / self.patch, w / self.patch);
        let mut out = Array2::zeros((gh * gw, self.dim));
        let ncat = self.categories.len();
        let nuis_rows = self.nuisance_basis.nrows();

        for gy in 0..gh {
            for gx in 0..gw {
                let y0 = gy * self.patch;
                let x0 = gx * self.patch;
                // Patch luminances and their mean.
                let mut lum = Array2::zeros((self.patch, self.patch));
                let mut mean = 0.0;
                for py in 0..self.patch {
                    for px in 0..self.patch {
                        let l = (image[[y0 + py, x0 + px, 0]]
                            + image[[y0 + py, x0 + px, 1]]
                            + image[[y0 + py, x0 + px, 2]])
                            / 3.0;
                        lum[[py, px]] = l;
                        mean += l;
                    }
                }
                mean /= (self.patch * self.patch) as f64;

                // Correlate the residual with each category signature.
                let mut weights = vec![0.0; ncat];
                let norm = (self.patch * self.patch) as f64 * TEXTURE_AMPLITUDE;
                for (slot, (cat_id, _)) in self.categories.iter().enumerate() {
                    let mut score = 0.0;
                    for py in 0..self.patch {
                        for px in 0..self.patch {
                            score += (lum[[py, px]] - mean) * walsh_sign(*cat_id, x0 + px, y0 + py);
                        }
                    }
                    weights[slot] = (score / norm).max(0.0);
                }
                weights[self.background_slot] += 0.02;
                let total: f64 = weights.iter().sum();

                let mut feature = Array1::zeros(self.dim);
                for (slot, (_, emb)) in self.categories.iter().enumerate() {
                    feature.scaled_add(weights[slot] / total, emb);
                }

                // Patch-content nuisance, orthogonal to the categories.
                if nuis_rows > 0 {
                    let q = |v: f64| (v / 32.0).round() as i64;
                    let mut sums = [0.0f64; 3];
                    for py in 0..self.patch {
                        for px in 0..self.patch {
                            for ch in 0..3 {
                                sums[ch] += image[[y0 + py, x0 + px, ch]];
                            }
                        }
                    }
                    let n = (self.patch * self.patch) as f64;
                    let label = format!("{}:{}:{}", q(sums[0] / n), q(sums[1] / n), q(sums[2] / n));
                    let mut rng = stream(self.seed, &format!("nuisance/{label}"));
                    let mut coeffs = Array1::<f64>::zeros(nuis_rows);
                    for v in coeffs.iter_mut() {
                        *v = rng.gen_range(-1.0..1.0);
                    }
                    let norm = coeffs.dot(&coeffs).sqrt().max(1e-9);
                    let dir = self.nuisance_basis.t().dot(&coeffs) / norm;
                    feature.scaled_add(NUISANCE_SCALE, &dir);
                }

                out.row_mut(gy * gw + gx).assign(&feature);
            }
        }
        Ok(out)
    }

    /// Positional-table row indices for a `gh x gw` grid, tiled over a
    /// batch.
    fn positional_indices(&self, gh: usize, gw: usize, batch: usize) -> Result<Vec<usize>> {
        if gh > self.max_grid || gw > self.max_grid {
            return Err(Error::model(format!(
                "grid {gh}x{gw} exceeds the positional table ({})",
                self.max_grid
            )));
        }
        let mut idx = Vec::with_capacity(batch * gh * gw);
        for _ in 0..batch {
            for y in 0..gh {
                for x in 0..gw {
                    idx.push(y * self.max_grid + x);
                }
            }
        }
        Ok(idx)
    }

    /// Trainable stack on a tape. `base` is `[batch*gh*gw, d]`.
    pub fn forward_stack(
        &self,
        tape: &mut Tape,
        staged: &[NodeId],
        base: NodeId,
        gh: usize,
        gw: usize,
        batch: usize,
    ) -> Result<NodeId> {
        let rows = batch * gh * gw;
        let pos_idx = self.positional_indices(gh, gw, batch)?;
        let pos = tape.gather_rows(staged[self.positional.0], pos_idx);
        let mut x = tape.add(base, pos);
        for l in 0..self.layers {
            x = tape.matmul(x, staged[self.attn[l].0]);
            let gain_rows = tape.gather_rows(staged[self.gains[l].0], vec![0; rows]);
            x = tape.mul(x, gain_rows);
            let h = tape.matmul(x, staged[self.mlp_in[l].0]);
            let h = tape.relu(h);
            let h = tape.matmul(h, staged[self.mlp_out[l].0]);
            x = tape.add(x, h);
        }
        Ok(x)
    }

    /// Full dense encoding of one image (inference path).
    pub fn encode_dense(&self, store: &ParamStore, image: &Array3<f64>) -> Result<DenseVisualFeatures> {
        let (h, w, _) = image.dim();
        let base = self.base_features(image)?;
        let (gh, gw) = (h / self.patch, w / self.patch);
        let mut tape = Tape::new();
        let staged = store.stage_frozen(&mut tape);
        let base_node = tape.constant(base);
        let out = self.forward_stack(&mut tape, &staged, base_node, gh, gw, 1)?;
        Ok(DenseVisualFeatures {
            features: tape.value(out).clone(),
            grid: (gh, gw),
            patch_size: self.patch,
            source_resolution: (h, w),
        })
    }
}
