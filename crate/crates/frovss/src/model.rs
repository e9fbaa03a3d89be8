//! The full segmentation model: toy vision-language encoder pair,
//! auxiliary guidance pyramid, cost volume, and the decoder, wired to
//! a vocabulary of robust text embeddings and semantic anchors.

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::costvolume::{cost_volume_node, packed_text_matrix};
use crate::decoder::{Decoder, DecoderConfig, StagedGuidance};
use crate::encoders::{
    image_to_f64, load_checkpoint, reflect_pad_to_multiple, save_checkpoint, AuxEncoder,
    CheckpointHeader, ParamRole, ParamStore, ToyTextEncoder, ToyVisualEncoder, ENCODER_ROLES,
};
use crate::error::{Error, Result};
use crate::tape::{NodeId, Tape};
use crate::vocab::{CategorySpec, VocabularyBundle};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// Vision-language embedding dimension `d`.
    pub embed_dim: usize,
    /// Decoder hidden width `D`.
    pub hidden_dim: usize,
    /// Patch size `k`.
    pub patch: usize,
    pub window: usize,
    pub heads: usize,
    pub encoder_layers: usize,
    pub encoder_mlp_hidden: usize,
    pub swin_dim: usize,
    pub text_dim: usize,
    pub aspp_rates: Vec<usize>,
    pub aspp_branch: usize,
    /// Raw channels of the guidance pyramid; 0 disables guidance.
    pub guidance_channels: usize,
    pub guidance_proj: usize,
    /// Pyramid strides, coarsest first; the coarsest must equal `patch`.
    pub guidance_strides: Vec<usize>,
    /// Side of the positional table (maximum grid).
    pub max_grid: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            embed_dim: 16,
            hidden_dim: 32,
            patch: 8,
            window: 4,
            heads: 2,
            encoder_layers: 3,
            encoder_mlp_hidden: 12,
            swin_dim: 8,
            text_dim: 16,
            aspp_rates: vec![1, 2, 4],
            aspp_branch: 16,
            guidance_channels: 8,
            guidance_proj: 8,
            guidance_strides: vec![8, 4],
            max_grid: 8,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.guidance_channels > 0 {
            match self.guidance_strides.first() {
                Some(s) if *s == self.patch => {}
                _ => {
                    return Err(Error::config(
                        "the coarsest guidance stride must equal the patch size",
                    ))
                }
            }
        }
        if !self.patch.is_power_of_two() {
            return Err(Error::config("patch size must be a power of two"));
        }
        Ok(())
    }

    fn decoder_config(&self, prompts: usize) -> DecoderConfig {
        DecoderConfig {
            hidden: self.hidden_dim,
            prompts,
            patch: self.patch,
            anchor_dim: self.embed_dim,
            window: self.window,
            heads: self.heads,
            swin_dim: self.swin_dim,
            text_dim: self.text_dim,
            aspp_rates: self.aspp_rates.clone(),
            aspp_branch: self.aspp_branch,
            guidance_channels: self.guidance_channels,
            guidance_proj: self.guidance_proj,
        }
    }
}

/// Per-pixel, per-category scores of one image; values in (0, 1),
/// rows in scan order.
#[derive(Debug, Clone)]
pub struct ScoreMap {
    pub values: Array2<f64>,
    pub h: usize,
    pub w: usize,
}

impl ScoreMap {
    pub fn n_cats(&self) -> usize {
        self.values.ncols()
    }

    /// Argmax per pixel; ties break toward the lowest category index.
    pub fn labels(&self, index_of: &[u8]) -> Array2<u8> {
        let mut out = Array2::zeros((self.h, self.w));
        for i in 0..self.h * self.w {
            let row = self.values.row(i);
            let mut best = 0usize;
            for (n, v) in row.iter().enumerate() {
                if *v > row[best] {
                    best = n;
                }
            }
            out[[i / self.w, i % self.w]] = index_of[best];
        }
        out
    }
}

#[derive(Clone)]
pub struct SegModel {
    pub cfg: ModelConfig,
    pub seed: u64,
    pub store: ParamStore,
    pub text: ToyTextEncoder,
    pub visual: ToyVisualEncoder,
    pub aux: AuxEncoder,
    pub decoder: Decoder,
    pub vocab: VocabularyBundle,
    packed_text: Array2<f64>,
}

impl SegModel {
    /// Build a model over the toy world.
    ///
    /// `world` is the ontology the encoders "pretrain" on (all
    /// categories, including ones absent from training); `vocab` is
    /// the active vocabulary used for the cost volume and anchors.
    /// When `cache_dir` is set, constructed encoder parameters are
    /// stored there and reloaded on later constructions with the same
    /// `(d, k, seed)`.
    pub fn new(
        cfg: ModelConfig,
        seed: u64,
        world: &[CategorySpec],
        vocab: VocabularyBundle,
        cache_dir: Option<&std::path::Path>,
    ) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let text = ToyTextEncoder::new(world, cfg.embed_dim, seed)?;
        store.register("text.token_table", ParamRole::Text, 0, text.token_table());
        let visual = ToyVisualEncoder::new(
            &mut store,
            world,
            &text,
            cfg.embed_dim,
            cfg.patch,
            cfg.encoder_layers,
            cfg.encoder_mlp_hidden,
            cfg.max_grid,
            seed,
        )?;
        let aux = AuxEncoder::new(
            cfg.guidance_channels.max(1),
            if cfg.guidance_channels > 0 {
                cfg.guidance_strides.clone()
            } else {
                Vec::new()
            },
            seed,
        )?;
        let decoder = Decoder::new(&mut store, cfg.decoder_config(vocab.m()), seed)?;
        let packed_text = packed_text_matrix(&vocab.embeddings)?;

        let mut model = SegModel {
            cfg,
            seed,
            store,
            text,
            visual,
            aux,
            decoder,
            vocab,
            packed_text,
        };
        if let Some(dir) = cache_dir {
            model.sync_encoder_cache(dir)?;
        }
        Ok(model)
    }

    fn sync_encoder_cache(&mut self, dir: &std::path::Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let path = dir.join(format!(
            "enc-d{}-k{}-s{}.bin",
            self.cfg.embed_dim, self.cfg.patch, self.seed
        ));
        if path.exists() {
            load_checkpoint(&path, &mut self.store, &ENCODER_ROLES)?;
        } else {
            let header = CheckpointHeader {
                d: self.cfg.embed_dim,
                k: self.cfg.patch,
                seed: self.seed,
                arch: "encoder".into(),
            };
            save_checkpoint(&path, &header, &self.store, &ENCODER_ROLES)?;
        }
        Ok(())
    }

    /// Swap the active vocabulary (the open-vocabulary path). The
    /// prompt count must match the trained embedding convolution.
    pub fn set_vocabulary(&mut self, vocab: VocabularyBundle) -> Result<()> {
        if vocab.m() != self.decoder.cfg.prompts {
            return Err(Error::model(format!(
                "vocabulary has M={} prompts, decoder was built for M={}",
                vocab.m(),
                self.decoder.cfg.prompts
            )));
        }
        self.packed_text = packed_text_matrix(&vocab.embeddings)?;
        self.vocab = vocab;
        Ok(())
    }

    pub fn n_cats(&self) -> usize {
        self.vocab.n()
    }

    /// Category id for each score column.
    pub fn index_of(&self) -> Vec<u8> {
        self.vocab.categories.iter().map(|c| c.id as u8).collect()
    }

    /// Record the full forward pass for a batch of same-sized images
    /// (already padded to multiples of the patch size).
    ///
    /// Returns the score node `[batch*H*W, N]` in pixel-major rows.
    pub fn forward_batch(
        &self,
        tape: &mut Tape,
        staged: &[NodeId],
        images: &[Array3<f64>],
    ) -> Result<NodeId> {
        if images.is_empty() {
            return Err(Error::model("empty batch"));
        }
        let (h, w, _) = images[0].dim();
        let k = self.cfg.patch;
        if h % k != 0 || w % k != 0 {
            return Err(Error::model("images must be padded to multiples of the patch size"));
        }
        for img in images {
            if img.dim() != (h, w, 3) {
                return Err(Error::model("batch images must share one size"));
            }
        }
        let batch = images.len();
        let (gh, gw) = (h / k, w / k);
        let hw = gh * gw;

        // dense features: frozen base + trainable stack
        let mut base = Array2::zeros((batch * hw, self.cfg.embed_dim));
        for (b, img) in images.iter().enumerate() {
            let f = self.visual.base_features(img)?;
            base.slice_mut(ndarray::s![b * hw..(b + 1) * hw, ..]).assign(&f);
        }
        let base = tape.constant(base);
        let feats = self
            .visual
            .forward_stack(tape, staged, base, gh, gw, batch)?;

        // cost volume against the frozen text side
        let cost = cost_volume_node(tape, feats, &self.packed_text);

        // guidance pyramids
        let pyramids: Vec<_> = if self.cfg.guidance_channels > 0 {
            images
                .iter()
                .map(|img| self.aux.encode_aux(img))
                .collect::<Result<_>>()?
        } else {
            vec![crate::encoders::GuidanceFeatures::default(); batch]
        };
        let guidance = StagedGuidance::stage(&pyramids)?;

        let n = self.n_cats();
        let hv = self
            .decoder
            .embed_cost(tape, staged, cost, batch, gh, gw, n)?;
        let hv = self.decoder.spatial_refine(tape, staged, &hv)?;
        let hv = self.decoder.fuse_guidance(tape, staged, &hv, &guidance)?;
        let hv = self.decoder.text_guide(tape, staged, &hv, &self.vocab.anchors)?;
        let hv = self.decoder.upsample(tape, staged, &hv, &guidance)?;
        self.decoder.predict(tape, staged, &hv)
    }

    /// Inference on one 8-bit image of any size: reflect-pads to the
    /// patch grid, runs the frozen forward pass, and crops back.
    pub fn score_map(&self, image: &Array3<u8>) -> Result<ScoreMap> {
        let f = image_to_f64(image);
        let (padded, (h, w)) = reflect_pad_to_multiple(&f, self.cfg.patch);
        let (ph, pw, _) = padded.dim();
        let mut tape = Tape::new();
        let staged = self.store.stage_frozen(&mut tape);
        let scores = self.forward_batch(&mut tape, &staged, &[padded])?;
        let full = tape.value(scores);
        let n = self.n_cats();
        let mut values = Array2::zeros((h * w, n));
        for y in 0..h {
            for x in 0..w {
                let src = y * pw + x;
                values.row_mut(y * w + x).assign(&full.row(src));
            }
        }
        let _ = ph;
        Ok(ScoreMap { values, h, w })
    }

    /// Label map prediction (argmax, lowest index wins ties).
    pub fn predict_labels(&self, image: &Array3<u8>) -> Result<Array2<u8>> {
        Ok(self.score_map(image)?.labels(&self.index_of()))
    }

    /// Save encoder and decoder containers into a directory.
    pub fn save_checkpoint(&self, dir: &std::path::Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        save_checkpoint(
            &dir.join("encoder.bin"),
            &CheckpointHeader {
                d: self.cfg.embed_dim,
                k: self.cfg.patch,
                seed: self.seed,
                arch: "encoder".into(),
            },
            &self.store,
            &ENCODER_ROLES,
        )?;
        save_checkpoint(
            &dir.join("decoder.bin"),
            &CheckpointHeader {
                d: self.cfg.hidden_dim,
                k: self.cfg.patch,
                seed: self.seed,
                arch: "decoder".into(),
            },
            &self.store,
            &[ParamRole::Decoder],
        )?;
        Ok(())
    }

    /// Load both containers saved by [`SegModel::save_checkpoint`].
    pub fn load_checkpoint(&mut self, dir: &std::path::Path) -> Result<()> {
        load_checkpoint(&dir.join("encoder.bin"), &mut self.store, &ENCODER_ROLES)?;
        load_checkpoint(&dir.join("decoder.bin"), &mut self.store, &[ParamRole::Decoder])?;
        Ok(())
    }
}
