//! Vision-language encoder contract: dense visual features, text
//! features, auxiliary guidance features, and the fine-tuning policy.

mod aux;
mod checkpoint;
mod finetune;
mod params;
mod text;
mod visual;

pub use aux::{AuxEncoder, GuidanceFeatures, GuidanceLevel};
pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointHeader};
pub use finetune::{assign_param_groups, layerwise_lr, FinetunePolicy, FinetuneStrategy, ParamGroup};
pub use params::{Param, ParamId, ParamRole, ParamStore, ENCODER_ROLES};
pub use text::{ToyTextEncoder, TEXT_NOISE_NORM};
pub use visual::{DenseVisualFeatures, ToyVisualEncoder};

use ndarray::Array3;

/// Convert an 8-bit image to the f64 array the encoders consume.
pub fn image_to_f64(image: &ndarray::Array3<u8>) -> Array3<f64> {
    image.mapv(|v| v as f64)
}

/// Reflect-pad an image so both spatial dims are multiples of `k`.
/// Returns the padded image and the original size for cropping
/// predictions back.
pub fn reflect_pad_to_multiple(image: &Array3<f64>, k: usize) -> (Array3<f64>, (usize, usize)) {
    let (h, w, c) = image.dim();
    let ph = h.div_ceil(k) * k;
    let pw = w.div_ceil(k) * k;
    if ph == h && pw == w {
        return (image.clone(), (h, w));
    }
    let reflect = |v: usize, n: usize| -> usize {
        if v < n {
            v
        } else {
            let over = v - n + 1;
            n.saturating_sub(1 + over).max(0)
        }
    };
    let mut out = Array3::zeros((ph, pw, c));
    for y in 0..ph {
        for x in 0..pw {
            let sy = reflect(y, h);
            let sx = reflect(x, w);
            for ch in 0..c {
                out[[y, x, ch]] = image[[sy, sx, ch]];
            }
        }
    }
    (out, (h, w))
}
