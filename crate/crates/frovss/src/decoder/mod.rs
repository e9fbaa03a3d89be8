//! Cost-volume decoder: prompt embedding, residual ASPP spatial
//! refinement, windowed-attention guidance fusion, anchor-driven
//! category reasoning, iterative up-sampling and the sigmoid head.
//!
//! Every stage is recorded on the autodiff tape; no parameter shape
//! depends on the number of categories, so a trained decoder accepts
//! any vocabulary at inference.

use ndarray::Array2;

use crate::encoders::{GuidanceFeatures, ParamId, ParamRole, ParamStore};
use crate::error::{Error, Result};
use crate::tape::{Conv3x3, GroupedLinearAttention, NodeId, PadMode, Tape, Up2x, WindowAttention};
use crate::vocab::SemanticAnchor;

/// Logistic scale of the prediction head at initialization; chosen so
/// untrained scores track the mean cost-volume similarity.
const HEAD_INIT_SCALE: f64 = 3.0;

/// Scores are nudged off the exact 0/1 saturation points so they stay
/// strictly inside (0, 1) even when f64 sigmoid saturates.
pub const SCORE_EPS: f64 = 1e-7;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DecoderConfig {
    /// Hidden width `D`.
    pub hidden: usize,
    /// Prompts per category the embedding convolution was built for.
    pub prompts: usize,
    /// Patch size `k`; the up-sampler runs `log2(k)` iterations.
    pub patch: usize,
    /// Anchor dimension (the text embedding dim).
    pub anchor_dim: usize,
    pub window: usize,
    pub heads: usize,
    /// Token width inside the fusion attention blocks.
    pub swin_dim: usize,
    /// Width of the category-reasoning attention.
    pub text_dim: usize,
    pub aspp_rates: Vec<usize>,
    pub aspp_branch: usize,
    /// Channels of the raw guidance pyramid (0 disables guidance).
    pub guidance_channels: usize,
    /// Width guidance is projected to before concatenation.
    pub guidance_proj: usize,
}

impl DecoderConfig {
    pub fn upsample_iterations(&self) -> usize {
        self.patch.trailing_zeros() as usize
    }

    pub fn validate(&self) -> Result<()> {
        if !self.patch.is_power_of_two() {
            return Err(Error::config(format!(
                "patch size {} must be a power of two",
                self.patch
            )));
        }
        if self.swin_dim % self.heads != 0 {
            return Err(Error::config("swin_dim must split across heads"));
        }
        if self.aspp_rates.is_empty() {
            return Err(Error::config("need at least one ASPP rate"));
        }
        Ok(())
    }
}

/// Spatial layout of a hidden volume on the tape: rows are
/// `((b * n_cats + n) * h * w + pixel)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VolumeLayout {
    pub batch: usize,
    pub n_cats: usize,
    pub h: usize,
    pub w: usize,
}

impl VolumeLayout {
    pub fn rows(&self) -> usize {
        self.batch * self.n_cats * self.h * self.w
    }

    fn items(&self) -> usize {
        self.batch * self.n_cats
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Embedded,
    Refined,
    Fused,
    TextGuided,
    Upsampled,
}

/// A decoder activation tagged with its pipeline stage.
#[derive(Debug, Clone, Copy)]
pub struct HiddenVolume {
    pub node: NodeId,
    pub stage: Stage,
    pub layout: VolumeLayout,
}

impl HiddenVolume {
    fn expect_stage(&self, want: Stage) -> Result<()> {
        if self.stage != want {
            return Err(Error::model(format!(
                "expected stage {want:?}, got {:?}",
                self.stage
            )));
        }
        Ok(())
    }
}

/// Batched raw guidance pyramids, stacked per level; rows of each
/// level are `(b * h * w + pixel)`.
pub struct StagedGuidance {
    pub levels: Vec<(usize, Array2<f64>, usize, usize)>,
}

impl StagedGuidance {
    pub fn stage(pyramids: &[GuidanceFeatures]) -> Result<Self> {
        if pyramids.is_empty() || pyramids[0].is_empty() {
            return Ok(StagedGuidance { levels: Vec::new() });
        }
        let template = &pyramids[0];
        let mut levels = Vec::new();
        for (li, level) in template.levels.iter().enumerate() {
            let rows = pyramids.len() * level.h * level.w;
            let mut stacked = Array2::zeros((rows, level.data.ncols()));
            for (b, pyr) in pyramids.iter().enumerate() {
                let l = pyr.levels.get(li).ok_or_else(|| {
                    Error::model("guidance pyramids differ across the batch")
                })?;
                if l.stride != level.stride || l.h != level.h || l.w != level.w {
                    return Err(Error::model("guidance pyramids differ across the batch"));
                }
                stacked
                    .slice_mut(ndarray::s![b * level.h * level.w..(b + 1) * level.h * level.w, ..])
                    .assign(&l.data);
            }
            levels.push((level.stride, stacked, level.h, level.w));
        }
        Ok(StagedGuidance { levels })
    }

    fn at_stride(&self, stride: usize) -> Option<(&Array2<f64>, usize, usize)> {
        self.levels
            .iter()
            .find(|(s, _, _, _)| *s == stride)
            .map(|(_, data, h, w)| (data, *h, *w))
    }

    /// Tile a level's rows across the category axis:
    /// `(b, pixel) -> ((b*n + cat), pixel)`.
    fn tiled_for_categories(
        &self,
        stride: usize,
        batch: usize,
        n_cats: usize,
    ) -> Option<(Array2<f64>, usize, usize)> {
        let (data, h, w) = self.at_stride(stride)?;
        let hw = h * w;
        let mut tiled = Array2::zeros((batch * n_cats * hw, data.ncols()));
        for b in 0..batch {
            let block = data.slice(ndarray::s![b * hw..(b + 1) * hw, ..]);
            for n in 0..n_cats {
                let item = b * n_cats + n;
                tiled
                    .slice_mut(ndarray::s![item * hw..(item + 1) * hw, ..])
                    .assign(&block);
            }
        }
        Some((tiled, h, w))
    }
}

#[derive(Clone)]
struct SwinBlockParams {
    ln1_g: ParamId,
    ln1_b: ParamId,
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
    bq: ParamId,
    bk: ParamId,
    bv: ParamId,
    wo: ParamId,
    bo: ParamId,
    ln2_g: ParamId,
    ln2_b: ParamId,
    wm1: ParamId,
    bm1: ParamId,
    wm2: ParamId,
    bm2: ParamId,
}

#[derive(Clone)]
struct UpsampleStage {
    guide_proj: Option<(ParamId, ParamId)>,
    mix_w: ParamId,
    mix_b: ParamId,
    refine_w: ParamId,
    refine_b: ParamId,
}

/// Parameter handles of the decoder.
#[derive(Clone)]
pub struct Decoder {
    pub cfg: DecoderConfig,
    embed_w: ParamId,
    embed_b: ParamId,
    aspp_branches: Vec<(ParamId, ParamId)>,
    aspp_fuse_w: ParamId,
    aspp_fuse_b: ParamId,
    fuse_guide_proj: Option<(ParamId, ParamId)>,
    fuse_in_w: ParamId,
    fuse_in_b: ParamId,
    fuse_blocks: Vec<SwinBlockParams>,
    fuse_out_w: ParamId,
    fuse_out_b: ParamId,
    tg_wq: ParamId,
    tg_wk: ParamId,
    tg_wv: ParamId,
    tg_bq: ParamId,
    tg_bk: ParamId,
    tg_bv: ParamId,
    tg_out_w: ParamId,
    tg_out_b: ParamId,
    upsample: Vec<UpsampleStage>,
    head_w: ParamId,
    head_b: ParamId,
}

impl Decoder {
    pub fn new(store: &mut ParamStore, cfg: DecoderConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        use rand::Rng;
        let mut rng = crate::rng::stream(seed, "decoder-init");
        let d = cfg.hidden;
        let m = cfg.prompts;
        let gp = cfg.guidance_proj;
        let has_guidance = cfg.guidance_channels > 0;

        let mut reg = |name: String, value: Array2<f64>, store: &mut ParamStore| {
            store.register(name, ParamRole::Decoder, 0, value)
        };

        // Prompt-to-hidden embedding: near-uniform averaging plus noise.
        let embed_w = {
            let mut w = Array2::from_elem((m, d), 1.0 / m as f64);
            for v in w.iter_mut() {
                *v += rng.gen_range(-0.01..0.01);
            }
            reg("dec.embed.w".into(), w, store)
        };
        let embed_b = reg("dec.embed.b".into(), Array2::zeros((1, d)), store);

        // Residual ASPP: random branches, zero-initialized fusion.
        let mut aspp_branches = Vec::new();
        for rate in &cfg.aspp_rates {
            let scale = (2.0 / (9.0 * d as f64)).sqrt();
            let w = Array2::from_shape_fn((9 * d, cfg.aspp_branch), |_| {
                rng.gen_range(-scale..scale)
            });
            let wb = reg(format!("dec.aspp.r{rate}.w"), w, store);
            let bb = reg(
                format!("dec.aspp.r{rate}.b"),
                Array2::zeros((1, cfg.aspp_branch)),
                store,
            );
            aspp_branches.push((wb, bb));
        }
        let aspp_fuse_w = reg(
            "dec.aspp.fuse.w".into(),
            Array2::zeros((cfg.aspp_rates.len() * cfg.aspp_branch, d)),
            store,
        );
        let aspp_fuse_b = reg("dec.aspp.fuse.b".into(), Array2::zeros((1, d)), store);

        // Guidance fusion: two windowed-attention blocks over tokens of
        // [cost channel; projected guidance].
        let fuse_guide_proj = if has_guidance {
            let scale = (1.0 / cfg.guidance_channels as f64).sqrt();
            let w = Array2::from_shape_fn((cfg.guidance_channels, gp), |_| {
                rng.gen_range(-scale..scale)
            });
            Some((
                reg("dec.fuse.gproj.w".into(), w, store),
                reg("dec.fuse.gproj.b".into(), Array2::zeros((1, gp)), store),
            ))
        } else {
            None
        };
        let token_dim = 1 + if has_guidance { gp } else { 0 };
        let a = cfg.swin_dim;
        let fuse_in_w = {
            let scale = (1.0 / token_dim as f64).sqrt();
            reg(
                "dec.fuse.in.w".into(),
                Array2::from_shape_fn((token_dim, a), |_| rng.gen_range(-scale..scale)),
                store,
            )
        };
        let fuse_in_b = reg("dec.fuse.in.b".into(), Array2::zeros((1, a)), store);
        let mut fuse_blocks = Vec::new();
        for i in 0..2 {
            let scale = (1.0 / a as f64).sqrt();
            let mut mat =
                |label: &str, rows: usize, cols: usize, rng: &mut rand_chacha::ChaCha8Rng, store: &mut ParamStore| {
                    let s = (1.0 / rows as f64).sqrt();
                    store.register(
                        format!("dec.fuse.block{i}.{label}"),
                        ParamRole::Decoder,
                        0,
                        Array2::from_shape_fn((rows, cols), |_| rng.gen_range(-s..s)),
                    )
                };
            let _ = scale;
            let block = SwinBlockParams {
                ln1_g: reg(format!("dec.fuse.block{i}.ln1.g"), Array2::ones((1, a)), store),
                ln1_b: reg(format!("dec.fuse.block{i}.ln1.b"), Array2::zeros((1, a)), store),
                wq: mat("wq", a, a, &mut rng, store),
                wk: mat("wk", a, a, &mut rng, store),
                wv: mat("wv", a, a, &mut rng, store),
                bq: reg(format!("dec.fuse.block{i}.bq"), Array2::zeros((1, a)), store),
                bk: reg(format!("dec.fuse.block{i}.bk"), Array2::zeros((1, a)), store),
                bv: reg(format!("dec.fuse.block{i}.bv"), Array2::zeros((1, a)), store),
                wo: mat("wo", a, a, &mut rng, store),
                bo: reg(format!("dec.fuse.block{i}.bo"), Array2::zeros((1, a)), store),
                ln2_g: reg(format!("dec.fuse.block{i}.ln2.g"), Array2::ones((1, a)), store),
                ln2_b: reg(format!("dec.fuse.block{i}.ln2.b"), Array2::zeros((1, a)), store),
                wm1: mat("wm1", a, 2 * a, &mut rng, store),
                bm1: reg(format!("dec.fuse.block{i}.bm1"), Array2::zeros((1, 2 * a)), store),
                wm2: mat("wm2", 2 * a, a, &mut rng, store),
                bm2: reg(format!("dec.fuse.block{i}.bm2"), Array2::zeros((1, a)), store),
            };
            fuse_blocks.push(block);
        }
        let fuse_out_w = reg("dec.fuse.out.w".into(), Array2::zeros((a, 1)), store);
        let fuse_out_b = reg("dec.fuse.out.b".into(), Array2::zeros((1, 1)), store);

        // Category reasoning: linear attention across categories at
        // each location, anchors concatenated into the token stream.
        let at = cfg.text_dim;
        let tg_in = d + cfg.anchor_dim;
        let tg_scale = (1.0 / tg_in as f64).sqrt();
        let mut tg_mat = |label: &str, rng: &mut rand_chacha::ChaCha8Rng, store: &mut ParamStore| {
            store.register(
                format!("dec.textguide.{label}"),
                ParamRole::Decoder,
                0,
                Array2::from_shape_fn((tg_in, at), |_| rng.gen_range(-tg_scale..tg_scale)),
            )
        };
        let tg_wq = tg_mat("wq", &mut rng, store);
        let tg_wk = tg_mat("wk", &mut rng, store);
        let tg_wv = tg_mat("wv", &mut rng, store);
        let tg_bq = reg("dec.textguide.bq".into(), Array2::zeros((1, at)), store);
        let tg_bk = reg("dec.textguide.bk".into(), Array2::zeros((1, at)), store);
        let tg_bv = reg("dec.textguide.bv".into(), Array2::zeros((1, at)), store);
        let tg_out_w = reg("dec.textguide.out.w".into(), Array2::zeros((at, d)), store);
        let tg_out_b = reg("dec.textguide.out.b".into(), Array2::zeros((1, d)), store);

        // Up-sampling: bilinear x2, optional guidance mix back to D,
        // and a residual stride-1 transposed-convolution refinement.
        let mut upsample = Vec::new();
        for it in 0..cfg.upsample_iterations() {
            let stride_after = cfg.patch >> (it + 1);
            let guided = has_guidance; // a level may or may not exist at run time
            let guide_proj = if guided {
                let scale = (1.0 / cfg.guidance_channels as f64).sqrt();
                let w = Array2::from_shape_fn((cfg.guidance_channels, gp), |_| {
                    rng.gen_range(-scale..scale)
                });
                Some((
                    reg(format!("dec.up{it}.gproj.w"), w, store),
                    reg(format!("dec.up{it}.gproj.b"), Array2::zeros((1, gp)), store),
                ))
            } else {
                None
            };
            let mix_rows = d + if guided { gp } else { 0 };
            let mut mix = Array2::zeros((mix_rows, d));
            for j in 0..d {
                mix[[j, j]] = 1.0;
            }
            for v in mix.iter_mut() {
                *v += rng.gen_range(-0.01..0.01);
            }
            let mix_w = reg(format!("dec.up{it}.mix.w"), mix, store);
            let mix_b = reg(format!("dec.up{it}.mix.b"), Array2::zeros((1, d)), store);
            let refine_w = reg(format!("dec.up{it}.refine.w"), Array2::zeros((9 * d, d)), store);
            let refine_b = reg(format!("dec.up{it}.refine.b"), Array2::zeros((1, d)), store);
            upsample.push(UpsampleStage {
                guide_proj,
                mix_w,
                mix_b,
                refine_w,
                refine_b,
            });
            let _ = stride_after;
        }

        let head_w = reg(
            "dec.head.w".into(),
            Array2::from_elem((d, 1), HEAD_INIT_SCALE / d as f64),
            store,
        );
        let head_b = reg("dec.head.b".into(), Array2::zeros((1, 1)), store);

        Ok(Decoder {
            cfg,
            embed_w,
            embed_b,
            aspp_branches,
            aspp_fuse_w,
            aspp_fuse_b,
            fuse_guide_proj,
            fuse_in_w,
            fuse_in_b,
            fuse_blocks,
            fuse_out_w,
            fuse_out_b,
            tg_wq,
            tg_wk,
            tg_wv,
            tg_bq,
            tg_bk,
            tg_bv,
            tg_out_w,
            tg_out_b,
            upsample,
            head_w,
            head_b,
        })
    }

    /// Embed the prompt axis into the hidden dimension.
    ///
    /// `cost` is `[batch*h*w, N*M]` (column `n*M + m`); the result is
    /// in category-major layout.
    pub fn embed_cost(
        &self,
        tape: &mut Tape,
        staged: &[NodeId],
        cost: NodeId,
        batch: usize,
        h: usize,
        w: usize,
        n_cats: usize,
    ) -> Result<HiddenVolume> {
        let cols = tape.value(cost).ncols();
        if cols != n_cats * self.cfg.prompts {
            return Err(Error::model(format!(
                "cost volume has {cols} prompt columns but the embedding was \
                 trained for M={} times N={n_cats}",
                self.cfg.prompts
            )));
        }
        let hw = h * w;
        // [b*hw, N*M] -> [b*hw*N, M] (pure reshape, prompt axis fastest)
        let grouped = tape.reshape(cost, batch * hw * n_cats, self.cfg.prompts);
        let emb = tape.matmul(grouped, staged[self.embed_w.0]);
        let emb = tape.add_bias_rows(emb, staged[self.embed_b.0]);
        // pixel-cat rows -> category-major rows
        let perm = pixelcat_to_catmajor(batch, hw, n_cats);
        let node = tape.gather_rows(emb, perm);
        Ok(HiddenVolume {
            node,
            stage: Stage::Embedded,
            layout: VolumeLayout {
                batch,
                n_cats,
                h,
                w,
            },
        })
    }

    /// Residual multi-rate context aggregation over each category's
    /// spatial grid. Rates whose reflect padding would exceed the grid
    /// are skipped with a notice (their branch contributes zeros).
    pub fn spatial_refine(
        &self,
        tape: &mut Tape,
        staged: &[NodeId],
        hv: &HiddenVolume,
    ) -> Result<HiddenVolume> {
        hv.expect_stage(Stage::Embedded)?;
        let l = hv.layout;
        let d = self.cfg.hidden;
        let mut branch_outputs = Vec::new();
        for (rate, (w_id, b_id)) in self.cfg.aspp_rates.iter().zip(&self.aspp_branches) {
            let geom = Conv3x3 {
                batch: l.items(),
                h: l.h,
                w: l.w,
                cin: d,
                cout: self.cfg.aspp_branch,
                dilation: *rate,
                pad: PadMode::Reflect,
            };
            if !geom.supports() {
                log::warn!(
                    "aspp: dropping dilation {rate} on a {}x{} grid (receptive field too large)",
                    l.h,
                    l.w
                );
                let zeros = tape.constant(Array2::zeros((l.rows(), self.cfg.aspp_branch)));
                branch_outputs.push(zeros);
                continue;
            }
            let conv = tape.conv3x3(geom, hv.node, staged[w_id.0], staged[b_id.0]);
            branch_outputs.push(tape.relu(conv));
        }
        let cat = tape.concat_cols(&branch_outputs);
        let fused = tape.matmul(cat, staged[self.aspp_fuse_w.0]);
        let fused = tape.add_bias_rows(fused, staged[self.aspp_fuse_b.0]);
        let node = tape.add(hv.node, fused);
        Ok(HiddenVolume {
            node,
            stage: Stage::Refined,
            layout: l,
        })
    }

    /// Windowed self-attention over spatial tokens, one scalar channel
    /// at a time, with projected guidance concatenated to every token.
    pub fn fuse_guidance(
        &self,
        tape: &mut Tape,
        staged: &[NodeId],
        hv: &HiddenVolume,
        guidance: &StagedGuidance,
    ) -> Result<HiddenVolume> {
        hv.expect_stage(Stage::Refined)?;
        let l = hv.layout;
        let d = self.cfg.hidden;
        let hw = l.h * l.w;
        let rows_att = l.items() * d * hw;

        // channel-major single-column view: (item, d, pixel)
        let flat = tape.reshape(hv.node, l.rows() * d, 1);
        let mut perm = Vec::with_capacity(rows_att);
        for item in 0..l.items() {
            for ch in 0..d {
                for pix in 0..hw {
                    perm.push((item * hw + pix) * d + ch);
                }
            }
        }
        let scalar = tape.gather_rows(flat, perm);

        let tokens = match (&self.fuse_guide_proj, guidance.levels.first()) {
            (Some((gw, gb)), Some(_)) => {
                let (graw, gh, gwid) = guidance
                    .at_stride(self.cfg.patch)
                    .ok_or_else(|| Error::model("no guidance level at the encoder stride"))?;
                if gh != l.h || gwid != l.w {
                    return Err(Error::model(format!(
                        "coarsest guidance level {gh}x{gwid} does not match the {}x{} grid",
                        l.h, l.w
                    )));
                }
                let gnode = tape.constant(graw.clone());
                let proj = tape.matmul(gnode, staged[gw.0]);
                let proj = tape.add_bias_rows(proj, staged[gb.0]);
                // tile (b, pixel) guidance across categories and channels
                let mut gperm = Vec::with_capacity(rows_att);
                for item in 0..l.items() {
                    let b = item / l.n_cats;
                    for _ch in 0..d {
                        for pix in 0..hw {
                            gperm.push(b * hw + pix);
                        }
                    }
                }
                let tiled = tape.gather_rows(proj, gperm);
                tape.concat_cols(&[scalar, tiled])
            }
            _ => scalar,
        };
        // Built with guidance but running without one: zero-fill the
        // guidance columns so the blocks see cost features alone.
        let want_dim = tape.value(staged[self.fuse_in_w.0]).nrows();
        let have_dim = tape.value(tokens).ncols();
        let tokens = if have_dim < want_dim {
            let zeros = tape.constant(Array2::zeros((rows_att, want_dim - have_dim)));
            tape.concat_cols(&[tokens, zeros])
        } else {
            tokens
        };

        let x = tape.matmul(tokens, staged[self.fuse_in_w.0]);
        let mut x = tape.add_bias_rows(x, staged[self.fuse_in_b.0]);
        let geom = WindowAttention {
            batch: l.items() * d,
            h: l.h,
            w: l.w,
            window: self.cfg.window,
            heads: self.cfg.heads,
        };
        if l.h % self.cfg.window != 0 || l.w % self.cfg.window != 0 {
            return Err(Error::model(format!(
                "window {} does not divide the {}x{} grid",
                self.cfg.window, l.h, l.w
            )));
        }
        for block in &self.fuse_blocks {
            let normed = tape.layer_norm(x, staged[block.ln1_g.0], staged[block.ln1_b.0], 1e-5);
            let q = tape.matmul(normed, staged[block.wq.0]);
            let q = tape.add_bias_rows(q, staged[block.bq.0]);
            let k = tape.matmul(normed, staged[block.wk.0]);
            let k = tape.add_bias_rows(k, staged[block.bk.0]);
            let v = tape.matmul(normed, staged[block.wv.0]);
            let v = tape.add_bias_rows(v, staged[block.bv.0]);
            let att = tape.window_attention(geom.clone(), q, k, v);
            let att = tape.matmul(att, staged[block.wo.0]);
            let att = tape.add_bias_rows(att, staged[block.bo.0]);
            x = tape.add(x, att);
            let normed = tape.layer_norm(x, staged[block.ln2_g.0], staged[block.ln2_b.0], 1e-5);
            let h1 = tape.matmul(normed, staged[block.wm1.0]);
            let h1 = tape.add_bias_rows(h1, staged[block.bm1.0]);
            let h1 = tape.relu(h1);
            let h2 = tape.matmul(h1, staged[block.wm2.0]);
            let h2 = tape.add_bias_rows(h2, staged[block.bm2.0]);
            x = tape.add(x, h2);
        }
        let out = tape.matmul(x, staged[self.fuse_out_w.0]);
        let out = tape.add_bias_rows(out, staged[self.fuse_out_b.0]);

        // back to category-major [rows, D]
        let mut inv = Vec::with_capacity(rows_att);
        for item in 0..l.items() {
            for pix in 0..hw {
                for ch in 0..d {
                    inv.push((item * d + ch) * hw + pix);
                }
            }
        }
        let gathered = tape.gather_rows(out, inv);
        let spread = tape.reshape(gathered, l.rows(), d);
        let node = tape.add(hv.node, spread);
        Ok(HiddenVolume {
            node,
            stage: Stage::Fused,
            layout: l,
        })
    }

    /// Linear attention across the category axis at every location,
    /// anchors concatenated to the token stream; spatial relationships
    /// are untouched.
    pub fn text_guide(
        &self,
        tape: &mut Tape,
        staged: &[NodeId],
        hv: &HiddenVolume,
        anchors: &[SemanticAnchor],
    ) -> Result<HiddenVolume> {
        hv.expect_stage(Stage::Fused)?;
        let l = hv.layout;
        if anchors.len() != l.n_cats {
            return Err(Error::model(format!(
                "{} anchors for {} categories",
                anchors.len(),
                l.n_cats
            )));
        }
        for a in anchors {
            if a.vector.len() != self.cfg.anchor_dim {
                return Err(Error::model(format!(
                    "anchor for category {} has dim {}, expected {}",
                    a.category_id,
                    a.vector.len(),
                    self.cfg.anchor_dim
                )));
            }
        }
        let hw = l.h * l.w;

        // category-major -> pixel-cat rows ((b*hw + i)*N + n)
        let perm = catmajor_to_pixelcat(l.batch, hw, l.n_cats);
        let pixelcat = tape.gather_rows(hv.node, perm);

        let mut anchor_mat = Array2::zeros((l.n_cats, self.cfg.anchor_dim));
        for (n, a) in anchors.iter().enumerate() {
            for (k, v) in a.vector.iter().enumerate() {
                anchor_mat[[n, k]] = *v;
            }
        }
        let anchors_node = tape.constant(anchor_mat);
        let mut aperm = Vec::with_capacity(l.rows());
        for _bi in 0..l.batch * hw {
            for n in 0..l.n_cats {
                aperm.push(n);
            }
        }
        let tiled_anchors = tape.gather_rows(anchors_node, aperm);
        let tokens = tape.concat_cols(&[pixelcat, tiled_anchors]);

        let q = tape.matmul(tokens, staged[self.tg_wq.0]);
        let q = tape.add_bias_rows(q, staged[self.tg_bq.0]);
        let k = tape.matmul(tokens, staged[self.tg_wk.0]);
        let k = tape.add_bias_rows(k, staged[self.tg_bk.0]);
        let v = tape.matmul(tokens, staged[self.tg_wv.0]);
        let v = tape.add_bias_rows(v, staged[self.tg_bv.0]);
        let att = tape.grouped_linear_attention(
            GroupedLinearAttention {
                groups: l.batch * hw,
                tokens: l.n_cats,
            },
            q,
            k,
            v,
        );
        let out = tape.matmul(att, staged[self.tg_out_w.0]);
        let out = tape.add_bias_rows(out, staged[self.tg_out_b.0]);
        let residual = tape.add(pixelcat, out);

        // back to category-major
        let inv = pixelcat_to_catmajor(l.batch, hw, l.n_cats);
        let node = tape.gather_rows(residual, inv);
        Ok(HiddenVolume {
            node,
            stage: Stage::TextGuided,
            layout: l,
        })
    }

    /// `log2(k)` iterations of bilinear x2 up-sampling, guidance
    /// concatenation at matching strides (consumed coarse to fine,
    /// the extraction order), a 1x1 mix back to `D`, and a residual
    /// stride-1 transposed-convolution refinement.
    pub fn upsample(
        &self,
        tape: &mut Tape,
        staged: &[NodeId],
        hv: &HiddenVolume,
        guidance: &StagedGuidance,
    ) -> Result<HiddenVolume> {
        hv.expect_stage(Stage::TextGuided)?;
        let mut l = hv.layout;
        let d = self.cfg.hidden;
        let mut x = hv.node;
        for (it, stage) in self.upsample.iter().enumerate() {
            x = tape.up2x(
                Up2x {
                    batch: l.items(),
                    h: l.h,
                    w: l.w,
                },
                x,
            );
            l.h *= 2;
            l.w *= 2;
            let hw = l.h * l.w;
            let stride = self.cfg.patch >> (it + 1);
            let mixed_in = match (
                &stage.guide_proj,
                guidance.tiled_for_categories(stride, l.batch, l.n_cats),
            ) {
                (Some((gw, gb)), Some((tiled, gh, gwid))) => {
                    if gh != l.h || gwid != l.w {
                        return Err(Error::model(format!(
                            "guidance at stride {stride} is {gh}x{gwid}, expected {}x{}",
                            l.h, l.w
                        )));
                    }
                    let tiled = tape.constant(tiled);
                    let proj = tape.matmul(tiled, staged[gw.0]);
                    let proj = tape.add_bias_rows(proj, staged[gb.0]);
                    tape.concat_cols(&[x, proj])
                }
                _ => x,
            };
            // When built with guidance but no level exists at this
            // stride, feed zeros for the guidance columns.
            let mix_rows = tape.value(staged[stage.mix_w.0]).nrows();
            let have = tape.value(mixed_in).ncols();
            let mixed_in = if have < mix_rows {
                let zeros = tape.constant(Array2::zeros((l.rows(), mix_rows - have)));
                tape.concat_cols(&[mixed_in, zeros])
            } else {
                mixed_in
            };
            let mixed = tape.matmul(mixed_in, staged[stage.mix_w.0]);
            x = tape.add_bias_rows(mixed, staged[stage.mix_b.0]);

            let geom = Conv3x3 {
                batch: l.items(),
                h: l.h,
                w: l.w,
                cin: d,
                cout: d,
                dilation: 1,
                pad: PadMode::Zero,
            };
            let act = tape.relu(x);
            let refined = tape.conv3x3(geom, act, staged[stage.refine_w.0], staged[stage.refine_b.0]);
            x = tape.add(x, refined);
        }
        Ok(HiddenVolume {
            node: x,
            stage: Stage::Upsampled,
            layout: l,
        })
    }

    /// Per-pixel, per-category sigmoid of a learned combination of the
    /// hidden channels. Returns `[batch*H*W, N]` in pixel-major rows.
    pub fn predict(
        &self,
        tape: &mut Tape,
        staged: &[NodeId],
        hv: &HiddenVolume,
    ) -> Result<NodeId> {
        hv.expect_stage(Stage::Upsampled)?;
        let l = hv.layout;
        let logits = tape.matmul(hv.node, staged[self.head_w.0]);
        let logits = tape.add_bias_rows(logits, staged[self.head_b.0]);
        let scores = tape.sigmoid(logits);
        let scores = tape.clamp(scores, SCORE_EPS, 1.0 - SCORE_EPS);
        // (b, n, pix) single column -> [b*HW, N]
        let hw = l.h * l.w;
        let mut perm = Vec::with_capacity(l.rows());
        for b in 0..l.batch {
            for pix in 0..hw {
                for n in 0..l.n_cats {
                    perm.push((b * l.n_cats + n) * hw + pix);
                }
            }
        }
        let gathered = tape.gather_rows(scores, perm);
        Ok(tape.reshape(gathered, l.batch * hw, l.n_cats))
    }
}

/// Permutation: pixel-cat rows `((b*hw + i)*N + n)` -> category-major
/// rows `((b*N + n)*hw + i)`.
fn pixelcat_to_catmajor(batch: usize, hw: usize, n_cats: usize) -> Vec<usize> {
    let mut perm = Vec::with_capacity(batch * hw * n_cats);
    for b in 0..batch {
        for n in 0..n_cats {
            for i in 0..hw {
                perm.push((b * hw + i) * n_cats + n);
            }
        }
    }
    perm
}

/// Permutation: category-major rows -> pixel-cat rows.
fn catmajor_to_pixelcat(batch: usize, hw: usize, n_cats: usize) -> Vec<usize> {
    let mut perm = Vec::with_capacity(batch * hw * n_cats);
    for b in 0..batch {
        for i in 0..hw {
            for n in 0..n_cats {
                perm.push((b * n_cats + n) * hw + i);
            }
        }
    }
    perm
}

#[cfg(test)]
mod tests;
