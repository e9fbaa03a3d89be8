//! Fine-tuning policy: layer-wise learning rates and selective
//! freezing of the image encoder.

use serde::{Deserialize, Serialize};

use super::params::{ParamRole, ParamStore};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FinetuneStrategy {
    /// Every image-encoder and decoder parameter trains.
    Full,
    /// Only the decoder trains.
    DecoderOnly,
    /// Attention + positional (+ norms) train at a uniform encoder lr.
    Spatial,
    /// Attention + positional (+ norms) train with layer-wise decayed
    /// lrs; encoder MLPs stay frozen.
    Proposed,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FinetunePolicy {
    pub strategy: FinetuneStrategy,
    pub base_lr_encoder: f64,
    pub base_lr_decoder: f64,
    pub beta: f64,
}

impl FinetunePolicy {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta > 0.0 && self.beta <= 1.0) {
            return Err(Error::config(format!("beta must be in (0, 1], got {}", self.beta)));
        }
        if self.base_lr_encoder <= 0.0 || self.base_lr_decoder <= 0.0 {
            return Err(Error::config("learning rates must be positive"));
        }
        Ok(())
    }
}

/// Learning rate per encoder layer, index 1..=L: the last layer gets
/// `base_lr` and each shallower layer is scaled by `beta`.
pub fn layerwise_lr(base_lr: f64, beta: f64, num_layers: usize) -> Result<Vec<f64>> {
    if beta <= 0.0 {
        return Err(Error::config(format!("beta must be positive, got {beta}")));
    }
    if num_layers == 0 {
        return Err(Error::config("num_layers must be >= 1"));
    }
    let mut lrs = vec![0.0; num_layers];
    lrs[num_layers - 1] = base_lr;
    for l in (0..num_layers.saturating_sub(1)).rev() {
        lrs[l] = lrs[l + 1] * beta;
    }
    Ok(lrs)
}

/// One optimizer group produced by the policy.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ParamGroup {
    pub name: String,
    pub layer_index: usize,
    pub role: ParamRole,
    pub lr: f64,
    pub trainable: bool,
}

/// Apply a policy to the store: sets per-parameter trainability and
/// learning rate, and returns the resulting groups. The text encoder
/// stays frozen under every strategy.
pub fn assign_param_groups(
    store: &mut ParamStore,
    policy: &FinetunePolicy,
    encoder_layers: usize,
) -> Result<Vec<ParamGroup>> {
    policy.validate()?;
    let lrs = layerwise_lr(policy.base_lr_encoder, policy.beta, encoder_layers)?;
    let layer_lr = |layer_index: usize| -> f64 {
        // layer_index 0 (positional table) trains with the shallowest
        // layer's rate.
        let idx = layer_index.clamp(1, encoder_layers);
        lrs[idx - 1]
    };

    let mut groups = Vec::new();
    for (id, param) in store.iter() {
        let (trainable, lr) = match param.role {
            ParamRole::Text => (false, 0.0),
            ParamRole::Decoder => (true, policy.base_lr_decoder),
            ParamRole::Mlp => match policy.strategy {
                FinetuneStrategy::Full => (true, policy.base_lr_encoder),
                _ => (false, 0.0),
            },
            ParamRole::Attention | ParamRole::Positional | ParamRole::Norm => {
                match policy.strategy {
                    FinetuneStrategy::DecoderOnly => (false, 0.0),
                    FinetuneStrategy::Full | FinetuneStrategy::Spatial => {
                        (true, policy.base_lr_encoder)
                    }
                    FinetuneStrategy::Proposed => (true, layer_lr(param.layer_index)),
                }
            }
        };
        groups.push(ParamGroup {
            name: param.name.clone(),
            layer_index: param.layer_index,
            role: param.role,
            lr,
            trainable,
        });
        let _ = id;
    }
    for ((_, param), group) in store.iter_mut().zip(&groups) {
        param.trainable = group.trainable;
        param.lr = group.lr;
    }
    Ok(groups)
}
