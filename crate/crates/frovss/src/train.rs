//! Losses, evaluation helpers, and the supervised training loop.

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::data::SegmentationSample;
use crate::encoders::{assign_param_groups, image_to_f64, FinetunePolicy};
use crate::error::{Error, Result};
use crate::eval::{miou, ConfusionMatrix, IouReport, MeanConvention, IGNORE_INDEX};
use crate::model::SegModel;
use crate::opt::AdamW;
use crate::rng::stream;
use crate::tape::{NodeId, Tape};

/// Scores are clamped into `[CLAMP, 1-CLAMP]` inside the logs.
pub const LOSS_CLAMP: f64 = 1e-6;

/// Per-pixel binary cross-entropy against one-hot labels, summed over
/// categories and averaged over valid (non-ignored) pixels.
///
/// Reference implementation used by the oracles and the metrics; the
/// differentiable twin is [`bce_loss_node`].
pub fn source_loss(scores: &Array2<f64>, targets: &Array2<f64>, valid: &[bool]) -> f64 {
    assert_eq!(scores.dim(), targets.dim());
    assert_eq!(scores.nrows(), valid.len());
    let n_valid = valid.iter().filter(|v| **v).count();
    if n_valid == 0 {
        log::warn!("source_loss: every pixel is ignored, loss is 0");
        return 0.0;
    }
    let mut total = 0.0;
    for (i, ok) in valid.iter().enumerate() {
        if !ok {
            continue;
        }
        for (s, y) in scores.row(i).iter().zip(targets.row(i).iter()) {
            let s = s.clamp(LOSS_CLAMP, 1.0 - LOSS_CLAMP);
            total -= y * s.ln() + (1.0 - y) * (1.0 - s).ln();
        }
    }
    total / n_valid as f64
}

/// Quality-weighted form: `q * source_loss`.
pub fn mixed_loss(scores: &Array2<f64>, targets: &Array2<f64>, valid: &[bool], q: f64) -> f64 {
    q * source_loss(scores, targets, valid)
}

/// Tape version of the (optionally quality-weighted) loss.
///
/// `targets` must be one-hot rows; ignored pixels carry all-zero
/// weight rows. Returns a scalar node.
pub fn bce_loss_node(
    tape: &mut Tape,
    scores: NodeId,
    targets: &Array2<f64>,
    valid: &[bool],
    weight: f64,
) -> NodeId {
    let dims = tape.value(scores).dim();
    assert_eq!(dims, targets.dim());
    let n_valid = valid.iter().filter(|v| **v).count();
    if n_valid == 0 || weight == 0.0 {
        return tape.constant(Array2::zeros((1, 1)));
    }
    let scale = weight / n_valid as f64;
    let mut pos = Array2::zeros(dims);
    let mut neg = Array2::zeros(dims);
    for i in 0..dims.0 {
        if !valid[i] {
            continue;
        }
        for j in 0..dims.1 {
            if targets[[i, j]] > 0.5 {
                pos[[i, j]] = scale;
            } else {
                neg[[i, j]] = scale;
            }
        }
    }
    let clamped = tape.clamp(scores, LOSS_CLAMP, 1.0 - LOSS_CLAMP);
    let ln_s = tape.ln(clamped);
    let one_minus = tape.scale(clamped, -1.0);
    let one_minus = tape.add_scalar(one_minus, 1.0);
    let ln_1ms = tape.ln(one_minus);
    let pos_term = tape.mul_const(ln_s, pos);
    let neg_term = tape.mul_const(ln_1ms, neg);
    let sum = tape.add(pos_term, neg_term);
    let total = tape.sum_all(sum);
    tape.scale(total, -1.0)
}

/// One-hot targets (and validity mask) for a label map under the
/// model's current vocabulary. Rows follow pixel scan order.
pub fn one_hot_targets(
    label: &Array2<u8>,
    index_of: &[u8],
) -> Result<(Array2<f64>, Vec<bool>)> {
    let n = index_of.len();
    let (h, w) = label.dim();
    let mut col_of = [usize::MAX; 256];
    for (col, id) in index_of.iter().enumerate() {
        col_of[*id as usize] = col;
    }
    let mut targets = Array2::zeros((h * w, n));
    let mut valid = vec![false; h * w];
    for (i, v) in label.iter().enumerate() {
        if *v == IGNORE_INDEX {
            continue;
        }
        let col = col_of[*v as usize];
        if col == usize::MAX {
            return Err(Error::model(format!(
                "label {v} is outside the current vocabulary"
            )));
        }
        targets[[i, col]] = 1.0;
        valid[i] = true;
    }
    Ok((targets, valid))
}

/// One evaluation record; serialized as JSON lines.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub iter: u64,
    pub miou: f64,
    pub per_class_iou: std::collections::BTreeMap<String, f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gamma: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub q_mean: Option<f64>,
}

/// Evaluate a model over labeled samples.
pub fn eval_model(
    model: &SegModel,
    samples: &[SegmentationSample],
    convention: MeanConvention,
) -> Result<IouReport> {
    let index_of = model.index_of();
    let mut col_of = [usize::MAX; 256];
    for (col, id) in index_of.iter().enumerate() {
        col_of[*id as usize] = col;
    }
    let mut cm = ConfusionMatrix::new(index_of.len());
    for sample in samples {
        let label = sample
            .label
            .as_ref()
            .ok_or_else(|| Error::model("evaluation requires labeled samples"))?;
        let pred_ids = model.predict_labels(&sample.image)?;
        let map = |ids: &Array2<u8>, total: bool| -> Result<Array2<u8>> {
            let mut out = Array2::zeros(ids.dim());
            for (o, v) in out.iter_mut().zip(ids.iter()) {
                if *v == IGNORE_INDEX && !total {
                    *o = IGNORE_INDEX;
                    continue;
                }
                let col = col_of[*v as usize];
                if col == usize::MAX {
                    return Err(Error::model(format!(
                        "label {v} is outside the current vocabulary"
                    )));
                }
                *o = col as u8;
            }
            Ok(out)
        };
        let pred = map(&pred_ids, true)?;
        let gt = map(label, false)?;
        cm.accumulate(&pred, &gt)?;
    }
    Ok(miou(&cm, convention))
}

pub fn report_to_record(
    iter: u64,
    report: &IouReport,
    names: &[String],
    gamma: Option<f64>,
    q_mean: Option<f64>,
) -> MetricsRecord {
    let mut per_class = std::collections::BTreeMap::new();
    for entry in &report.per_class {
        let name = names
            .get(entry.class_id as usize)
            .cloned()
            .unwrap_or_else(|| format!("class_{}", entry.class_id));
        per_class.insert(name, entry.iou);
    }
    MetricsRecord {
        iter,
        miou: report.miou,
        per_class_iou: per_class,
        gamma,
        q_mean,
    }
}

#[derive(Debug, Clone)]
pub struct SupervisedOptions {
    pub iterations: u64,
    pub batch: usize,
    pub eval_interval: u64,
    pub seed: u64,
    pub policy: FinetunePolicy,
    pub weight_decay: f64,
    /// Stop as soon as a periodic evaluation reaches this mIoU.
    pub stop_at_miou: Option<f64>,
    pub convention: MeanConvention,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub metrics: Vec<MetricsRecord>,
    /// Iteration at which `stop_at_miou` was first reached.
    pub reached_at: Option<u64>,
    pub final_miou: f64,
}

pub(crate) fn batch_images(samples: &[&SegmentationSample]) -> Vec<Array3<f64>> {
    samples.iter().map(|s| image_to_f64(&s.image)).collect()
}

/// Collect per-parameter gradients off a tape after `backward`.
pub(crate) fn collect_grads(
    tape: &Tape,
    staged: &[NodeId],
) -> Vec<Option<Array2<f64>>> {
    staged.iter().map(|id| tape.grad(*id).cloned()).collect()
}

/// Supervised training on labeled samples, evaluating on `val` every
/// `eval_interval` iterations.
pub fn train_supervised(
    model: &mut SegModel,
    train: &[SegmentationSample],
    val: &[SegmentationSample],
    opts: &SupervisedOptions,
) -> Result<TrainOutcome> {
    if train.is_empty() {
        return Err(Error::config("training set is empty"));
    }
    let groups = assign_param_groups(&mut model.store, &opts.policy, model.cfg.encoder_layers)?;
    let _ = groups;
    let mut opt = AdamW::new(&model.store, opts.weight_decay);
    let mut order_rng = stream(opts.seed, "data-order");
    let names: Vec<String> = model.vocab.categories.iter().map(|c| c.name.clone()).collect();
    let index_of = model.index_of();

    let mut metrics = Vec::new();
    let mut reached_at = None;
    let mut final_miou = 0.0;

    for iter in 1..=opts.iterations {
        use rand::Rng;
        let picks: Vec<&SegmentationSample> = (0..opts.batch)
            .map(|_| &train[order_rng.gen_range(0..train.len())])
            .collect();
        let images = batch_images(&picks);

        let mut tape = Tape::new();
        let staged = model.store.stage(&mut tape);
        let scores = model.forward_batch(&mut tape, &staged, &images)?;

        let (h, w, _) = images[0].dim();
        let mut targets = Array2::zeros((picks.len() * h * w, index_of.len()));
        let mut valid = vec![false; picks.len() * h * w];
        for (b, sample) in picks.iter().enumerate() {
            let label = sample
                .label
                .as_ref()
                .ok_or_else(|| Error::model("supervised training needs labels"))?;
            let (t, v) = one_hot_targets(label, &index_of)?;
            targets
                .slice_mut(ndarray::s![b * h * w..(b + 1) * h * w, ..])
                .assign(&t);
            valid[b * h * w..(b + 1) * h * w].copy_from_slice(&v);
        }
        let loss = bce_loss_node(&mut tape, scores, &targets, &valid, 1.0);
        let loss_value = tape.value(loss)[[0, 0]];
        if !loss_value.is_finite() {
            return Err(Error::Diverged {
                iteration: iter,
                message: format!("loss became {loss_value}"),
            });
        }
        tape.backward(loss);
        let grads = collect_grads(&tape, &staged);
        drop(tape);
        opt.step(&mut model.store, &grads);

        if iter % opts.eval_interval == 0 || iter == opts.iterations {
            let report = eval_model(model, val, opts.convention)?;
            final_miou = report.miou;
            metrics.push(report_to_record(iter, &report, &names, None, None));
            if let Some(target) = opts.stop_at_miou {
                if report.miou >= target {
                    reached_at = Some(iter);
                    break;
                }
            }
        }
    }

    Ok(TrainOutcome {
        metrics,
        reached_at,
        final_miou,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn perfect_confident_prediction_has_near_zero_loss() {
        let scores = array![[1.0, 0.0], [0.0, 1.0]];
        let targets = array![[1.0, 0.0], [0.0, 1.0]];
        let valid = vec![true, true];
        let loss = source_loss(&scores, &targets, &valid);
        assert!(loss < 1e-4, "clamped confident loss should be tiny, got {loss}");
    }

    #[test]
    fn uniform_half_scores_give_two_ln_two_per_pixel() {
        // closed form: each pixel contributes -ln(0.5) per category
        let scores = array![[0.5, 0.5], [0.5, 0.5], [0.5, 0.5]];
        let targets = array![[1.0, 0.0], [0.0, 1.0], [1.0, 0.0]];
        let valid = vec![true, true, true];
        let loss = source_loss(&scores, &targets, &valid);
        assert!((loss - 2.0 * (2.0f64).ln()).abs() < 1e-12);
        assert!((loss - 1.3862943611198906).abs() < 1e-12);
    }

    #[test]
    fn loss_matches_scalar_loop_oracle_on_fixture() {
        use rand::Rng;
        let mut rng = crate::rng::stream(3, "loss-oracle");
        let (rows, n) = (10, 3);
        let scores = Array2::from_shape_fn((rows, n), |_| rng.gen_range(0.01..0.99));
        let mut targets = Array2::zeros((rows, n));
        let mut valid = vec![true; rows];
        valid[7] = false;
        for i in 0..rows {
            let hot = rng.gen_range(0..n);
            targets[[i, hot]] = 1.0;
        }
        let got = source_loss(&scores, &targets, &valid);

        // independent scalar loop
        let mut total = 0.0;
        let mut count = 0;
        for i in 0..rows {
            if !valid[i] {
                continue;
            }
            count += 1;
            for j in 0..n {
                let s = scores[[i, j]].clamp(1e-6, 1.0 - 1e-6);
                let y = targets[[i, j]];
                total -= y * s.ln() + (1.0 - y) * (1.0 - s).ln();
            }
        }
        let oracle = total / count as f64;
        assert!((got - oracle).abs() < 1e-12);
    }

    #[test]
    fn all_pixels_ignored_gives_zero_loss() {
        let scores = array![[0.9, 0.1]];
        let targets = array![[1.0, 0.0]];
        let loss = source_loss(&scores, &targets, &[false]);
        assert_eq!(loss, 0.0);
    }

    #[test]
    fn tape_loss_equals_reference_loss_and_is_linear_in_weight() {
        use rand::Rng;
        let mut rng = crate::rng::stream(5, "loss-tape");
        let (rows, n) = (8, 3);
        let raw = Array2::from_shape_fn((rows, n), |_| rng.gen_range(0.05..0.95));
        let mut targets = Array2::zeros((rows, n));
        for i in 0..rows {
            targets[[i, rng.gen_range(0..n)]] = 1.0;
        }
        let valid = vec![true; rows];

        let reference = source_loss(&raw, &targets, &valid);
        let mut tape = Tape::new();
        let scores = tape.constant(raw.clone());
        let l1 = bce_loss_node(&mut tape, scores, &targets, &valid, 1.0);
        assert!((tape.value(l1)[[0, 0]] - reference).abs() < 1e-12);

        // mixed_loss(q) = q * mixed_loss(1)
        let lq = bce_loss_node(&mut tape, scores, &targets, &valid, 0.37);
        assert!((tape.value(lq)[[0, 0]] - 0.37 * reference).abs() < 1e-12);
        assert!((mixed_loss(&raw, &targets, &valid, 0.37) - 0.37 * reference).abs() < 1e-12);
        assert_eq!(mixed_loss(&raw, &targets, &valid, 0.0), 0.0);
    }

    #[test]
    fn one_hot_respects_vocabulary_and_ignore() {
        let label = array![[0u8, 3], [255, 9]];
        let index_of = vec![0u8, 3, 9];
        let (targets, valid) = one_hot_targets(&label, &index_of).unwrap();
        assert_eq!(valid, vec![true, true, false, true]);
        assert_eq!(targets[[0, 0]], 1.0);
        assert_eq!(targets[[1, 1]], 1.0);
        assert_eq!(targets[[3, 2]], 1.0);
        assert_eq!(targets.row(2).sum(), 0.0);

        let bad = array![[7u8]];
        assert!(one_hot_targets(&bad, &index_of).is_err());
    }
}
