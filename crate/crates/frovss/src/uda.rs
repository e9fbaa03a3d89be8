//! Teacher-student domain adaptation: blended pseudo-labels, the
//! segmentation-quality weight, cross-domain class mix-up, the
//! decoder-only EMA teacher, and the blending schedule.

use ndarray::{Array2, Array3};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::data::SegmentationSample;
use crate::encoders::{assign_param_groups, image_to_f64, FinetunePolicy, ParamRole};
use crate::error::{Error, Result};
use crate::eval::{MeanConvention, IGNORE_INDEX};
use crate::model::{ScoreMap, SegModel};
use crate::opt::AdamW;
use crate::rng::stream;
use crate::tape::Tape;
use crate::train::{
    batch_images, bce_loss_node, collect_grads, eval_model, one_hot_targets, report_to_record,
    MetricsRecord,
};

/// Blended teacher/student prediction on one target image.
#[derive(Debug, Clone)]
pub struct PseudoLabel {
    /// Per-pixel distribution over the vocabulary, normalized to sum 1.
    pub probs: Array2<f64>,
    /// Argmax as category ids.
    pub labels: Array2<u8>,
    /// Per-pixel max probability.
    pub confidence: Array2<f64>,
}

/// `probs = gamma * teacher + (1 - gamma) * student`, both renormalized
/// per pixel so confidences are comparable across models.
pub fn make_pseudo_label(
    teacher: &ScoreMap,
    student: &ScoreMap,
    gamma: f64,
    index_of: &[u8],
) -> Result<PseudoLabel> {
    if teacher.values.dim() != student.values.dim() || teacher.h != student.h {
        return Err(Error::model("teacher and student score maps differ in shape"));
    }
    if !(0.0..=1.0).contains(&gamma) {
        return Err(Error::config(format!("gamma must be in [0, 1], got {gamma}")));
    }
    let (rows, n) = teacher.values.dim();
    if index_of.len() != n {
        return Err(Error::model("index map does not match the score width"));
    }
    let mut probs = Array2::zeros((rows, n));
    let mut labels = Array2::zeros((teacher.h, teacher.w));
    let mut confidence = Array2::zeros((teacher.h, teacher.w));
    for i in 0..rows {
        let t = teacher.values.row(i);
        let s = student.values.row(i);
        let t_sum: f64 = t.sum().max(1e-12);
        let s_sum: f64 = s.sum().max(1e-12);
        let mut best = 0usize;
        for nidx in 0..n {
            let blended = gamma * t[nidx] / t_sum + (1.0 - gamma) * s[nidx] / s_sum;
            probs[[i, nidx]] = blended;
            if blended > probs[[i, best]] {
                best = nidx;
            }
        }
        labels[[i / teacher.w, i % teacher.w]] = index_of[best];
        confidence[[i / teacher.w, i % teacher.w]] = probs[[i, best]];
    }
    Ok(PseudoLabel {
        probs,
        labels,
        confidence,
    })
}

/// Fraction of pixels whose blended confidence exceeds `mu`.
pub fn quality(pl: &PseudoLabel, mu: f64) -> f64 {
    let total = pl.confidence.len();
    if total == 0 {
        return 0.0;
    }
    let above = pl.confidence.iter().filter(|c| **c > mu).count();
    above as f64 / total as f64
}

/// A cross-domain mixed sample: source pixels of the selected classes
/// pasted over a target image, labels blended accordingly.
#[derive(Debug, Clone)]
pub struct MixedSample {
    pub image: Array3<u8>,
    pub label: Array2<u8>,
    /// true = pixel comes from the source image.
    pub mask: Array2<bool>,
    pub quality: f64,
}

/// Select `ceil(classes/2)` of the source sample's classes uniformly
/// and paste their pixels (image and label) over the target.
pub fn classmix(
    source: &SegmentationSample,
    target_image: &Array3<u8>,
    pl: &PseudoLabel,
    q: f64,
    rng: &mut ChaCha8Rng,
) -> Result<MixedSample> {
    let label = source
        .label
        .as_ref()
        .ok_or_else(|| Error::model("classmix needs a labeled source sample"))?;
    if target_image.dim() != source.image.dim() {
        return Err(Error::model("classmix requires equal resolutions"));
    }
    if pl.labels.dim() != label.dim() {
        return Err(Error::model("pseudo-label resolution mismatch"));
    }

    let mut classes: Vec<u8> = crate::data::present_categories(label).into_iter().collect();
    if classes.is_empty() {
        return Err(Error::model("source sample has no labeled classes"));
    }
    // uniform selection of ceil(c/2) classes via a seeded shuffle
    for i in (1..classes.len()).rev() {
        let j = rng.gen_range(0..=i);
        classes.swap(i, j);
    }
    let take = classes.len().div_ceil(2);
    let selected: std::collections::BTreeSet<u8> = classes.into_iter().take(take).collect();

    let (h, w) = label.dim();
    let mut mask = Array2::from_elem((h, w), false);
    let mut image = target_image.clone();
    let mut mixed_label = pl.labels.clone();
    for y in 0..h {
        for x in 0..w {
            let v = label[[y, x]];
            if v != IGNORE_INDEX && selected.contains(&v) {
                mask[[y, x]] = true;
                mixed_label[[y, x]] = v;
                for c in 0..3 {
                    image[[y, x, c]] = source.image[[y, x, c]];
                }
            }
        }
    }
    Ok(MixedSample {
        image,
        label: mixed_label,
        mask,
        quality: q,
    })
}

/// Decoder-only EMA: `teacher <- alpha * teacher + (1-alpha) * student`
/// on every decoder parameter; the teacher encoder is never touched.
pub fn ema_update_decoder(student: &SegModel, teacher: &mut SegModel, alpha: f64) -> Result<()> {
    let s_ids = student.store.ids_with_roles(&[ParamRole::Decoder]);
    let t_ids = teacher.store.ids_with_roles(&[ParamRole::Decoder]);
    if s_ids.len() != t_ids.len() {
        return Err(Error::model("student and teacher decoders differ in layout"));
    }
    for (s_id, t_id) in s_ids.iter().zip(&t_ids) {
        let s_param = student.store.get(*s_id);
        if student.store.get(*s_id).name != teacher.store.get(*t_id).name
            || s_param.value.dim() != teacher.store.value(*t_id).dim()
        {
            return Err(Error::model("student and teacher decoders differ in layout"));
        }
        let s_value = s_param.value.clone();
        let t_value = teacher.store.value_mut(*t_id);
        ndarray::Zip::from(t_value).and(&s_value).for_each(|t, s| {
            *t = alpha * *t + (1.0 - alpha) * s;
        });
    }
    Ok(())
}

/// One raw step of the blending recurrence:
/// `gamma_{d+1} = 1 / (d^{gamma_d} + 1)`, with `0^x = 0` for `x > 0`.
pub fn gamma_step(delta: u64, gamma: f64) -> f64 {
    let g = if gamma <= 0.0 {
        log::warn!("gamma {gamma} clamped to a small positive value");
        1e-6
    } else {
        gamma
    };
    let base = delta as f64;
    let denom = if delta == 0 { 0.0 } else { base.powf(g) };
    1.0 / (denom + 1.0)
}

/// Scheduled update used during training: the raw recurrence, held to
/// its defining property that the weight is reduced at every step once
/// past the forced `gamma_1 = 1`. (The raw iteration alone starts to
/// oscillate by ~1e-5 around its slowly-moving fixed point after a few
/// hundred steps.)
pub fn gamma_scheduled_step(delta: u64, gamma: f64) -> f64 {
    let raw = gamma_step(delta, gamma);
    if delta == 0 {
        raw
    } else if raw < gamma {
        raw
    } else {
        // formula stalled against the moving fixed point: take the
        // smallest representable reduction instead
        gamma.next_down().max(0.0)
    }
}

/// The full schedule over `steps` iterations starting from `gamma0`.
pub fn gamma_schedule(gamma0: f64, steps: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(steps + 1);
    let mut gamma = gamma0;
    out.push(gamma);
    for delta in 0..steps as u64 {
        gamma = gamma_scheduled_step(delta, gamma);
        out.push(gamma);
    }
    out
}

#[derive(Debug, Clone)]
pub struct UdaOptions {
    pub iterations: u64,
    pub batch_source: usize,
    pub batch_target: usize,
    pub eval_interval: u64,
    pub seed: u64,
    pub policy: FinetunePolicy,
    pub weight_decay: f64,
    /// EMA coefficient for the teacher decoder.
    pub alpha: f64,
    /// Initial blending weight.
    pub gamma0: f64,
    /// Confidence threshold of the quality weight.
    pub mu: f64,
    /// Use teacher pseudo-labeling (off = source loss only).
    pub use_teacher: bool,
    /// Use cross-domain mix-up (off = raw-target self-training).
    pub use_mixup: bool,
    /// Start the schedule at delta = 1 instead of 0.
    pub gamma_from_delta_one: bool,
    pub convention: MeanConvention,
    /// Emit checkpoints and the metrics log here when set.
    pub out_dir: Option<std::path::PathBuf>,
}

/// Mutable adaptation state.
pub struct TrainState {
    pub student: SegModel,
    pub teacher: SegModel,
    pub iteration: u64,
    pub gamma: f64,
    pub alpha: f64,
    pub mu: f64,
    pub rng_mixup: ChaCha8Rng,
    pub rng_order: ChaCha8Rng,
}

#[derive(Debug)]
pub struct UdaOutcome {
    pub metrics: Vec<MetricsRecord>,
    pub final_miou: f64,
    /// Hash of the teacher encoder parameters at initialization and at
    /// the end (must match).
    pub teacher_encoder_hashes: (String, String),
}

/// The adaptation loop. `source` must be labeled; `target_train` is
/// treated as unlabeled; `target_val` is labeled for evaluation only.
pub fn train_uda(
    student: SegModel,
    source: &[SegmentationSample],
    target_train: &[SegmentationSample],
    target_val: &[SegmentationSample],
    opts: &UdaOptions,
) -> Result<(UdaOutcome, TrainState)> {
    if source.is_empty() || target_train.is_empty() {
        return Err(Error::config("both domains need at least one sample"));
    }
    let mut student = student;
    assign_param_groups(&mut student.store, &opts.policy, student.cfg.encoder_layers)?;

    // Teacher: equal initialization, frozen encoder forever.
    let teacher = student.clone();

    let encoder_hash_roles = crate::encoders::ENCODER_ROLES;
    let hash_start = teacher.store.hash_roles(&encoder_hash_roles);

    let mut state = TrainState {
        student,
        teacher,
        iteration: 0,
        gamma: opts.gamma0,
        alpha: opts.alpha,
        mu: opts.mu,
        rng_mixup: stream(opts.seed, "mixup"),
        rng_order: stream(opts.seed, "data-order"),
    };

    let mut opt = AdamW::new(&state.student.store, opts.weight_decay);
    let names: Vec<String> = state
        .student
        .vocab
        .categories
        .iter()
        .map(|c| c.name.clone())
        .collect();
    let index_of = state.student.index_of();
    let mut metrics = Vec::new();
    let mut final_miou = 0.0;
    let mut q_accum = Vec::new();
    let metrics_path = opts.out_dir.as_ref().map(|d| d.join("metrics.jsonl"));
    if let Some(dir) = &opts.out_dir {
        std::fs::create_dir_all(dir)?;
    }

    for iter in 1..=opts.iterations {
        state.iteration = iter - 1; // delta of this step

        // ---- source supervision ----
        let picks: Vec<&SegmentationSample> = (0..opts.batch_source)
            .map(|_| &source[state.rng_order.gen_range(0..source.len())])
            .collect();
        let images = batch_images(&picks);
        let (h, w, _) = images[0].dim();
        let hw = h * w;

        let mut tape = Tape::new();
        let staged = state.student.store.stage(&mut tape);
        let src_scores = state.student.forward_batch(&mut tape, &staged, &images)?;
        let mut targets = Array2::zeros((picks.len() * hw, index_of.len()));
        let mut valid = vec![false; picks.len() * hw];
        for (b, sample) in picks.iter().enumerate() {
            let label = sample
                .label
                .as_ref()
                .ok_or_else(|| Error::model("source samples must be labeled"))?;
            let (t, v) = one_hot_targets(label, &index_of)?;
            targets.slice_mut(ndarray::s![b * hw..(b + 1) * hw, ..]).assign(&t);
            valid[b * hw..(b + 1) * hw].copy_from_slice(&v);
        }
        let mut loss = bce_loss_node(&mut tape, src_scores, &targets, &valid, 1.0);

        // ---- target self-training ----
        if opts.use_teacher {
            let mut mixed_images = Vec::new();
            let mut mixed_targets = Vec::new();
            for _ in 0..opts.batch_target {
                let t_sample = &target_train[state.rng_order.gen_range(0..target_train.len())];
                let teacher_scores = state.teacher.score_map(&t_sample.image)?;
                let student_scores = state.student.score_map(&t_sample.image)?;
                let pl = make_pseudo_label(&teacher_scores, &student_scores, state.gamma, &index_of)?;
                let q = quality(&pl, state.mu);
                q_accum.push(q);

                if opts.use_mixup {
                    let s_sample = &source[state.rng_mixup.gen_range(0..source.len())];
                    let mixed = classmix(s_sample, &t_sample.image, &pl, q, &mut state.rng_mixup)?;
                    mixed_images.push(image_to_f64(&mixed.image));
                    mixed_targets.push((mixed.label, q));
                } else {
                    mixed_images.push(image_to_f64(&t_sample.image));
                    mixed_targets.push((pl.labels.clone(), q));
                }
            }
            let mix_scores = state.student.forward_batch(&mut tape, &staged, &mixed_images)?;
            // per-sample quality weights fold into the target constants
            let rows = mixed_images.len() * hw;
            let mut t_all = Array2::zeros((rows, index_of.len()));
            let mut v_all = vec![false; rows];
            let mut q_scale = vec![0.0; rows];
            for (b, (label, q)) in mixed_targets.iter().enumerate() {
                let (t, v) = one_hot_targets(label, &index_of)?;
                t_all.slice_mut(ndarray::s![b * hw..(b + 1) * hw, ..]).assign(&t);
                v_all[b * hw..(b + 1) * hw].copy_from_slice(&v);
                q_scale[b * hw..(b + 1) * hw].iter_mut().for_each(|x| *x = *q);
            }
            // weighted BCE: scale the one-hot constants by per-row q
            let n_valid = v_all.iter().filter(|v| **v).count();
            if n_valid > 0 {
                let scale_rows = |m: &mut Array2<f64>| {
                    for (i, mut row) in m.rows_mut().into_iter().enumerate() {
                        let f = q_scale[i] / n_valid as f64;
                        row.mapv_inplace(|x| x * f);
                    }
                };
                let mut pos = Array2::zeros((rows, index_of.len()));
                let mut neg = Array2::zeros((rows, index_of.len()));
                for i in 0..rows {
                    if !v_all[i] {
                        continue;
                    }
                    for j in 0..index_of.len() {
                        if t_all[[i, j]] > 0.5 {
                            pos[[i, j]] = 1.0;
                        } else {
                            neg[[i, j]] = 1.0;
                        }
                    }
                }
                scale_rows(&mut pos);
                scale_rows(&mut neg);
                let clamped = tape.clamp(mix_scores, crate::train::LOSS_CLAMP, 1.0 - crate::train::LOSS_CLAMP);
                let ln_s = tape.ln(clamped);
                let one_minus = tape.scale(clamped, -1.0);
                let one_minus = tape.add_scalar(one_minus, 1.0);
                let ln_1ms = tape.ln(one_minus);
                let pos_term = tape.mul_const(ln_s, pos);
                let neg_term = tape.mul_const(ln_1ms, neg);
                let sum = tape.add(pos_term, neg_term);
                let total = tape.sum_all(sum);
                let mix_loss = tape.scale(total, -1.0);
                loss = tape.add(loss, mix_loss);
            }
        }

        let loss_value = tape.value(loss)[[0, 0]];
        if !loss_value.is_finite() {
            if let Some(dir) = &opts.out_dir {
                state.student.save_checkpoint(&dir.join("last_good"))?;
            }
            return Err(Error::Diverged {
                iteration: iter,
                message: format!("loss became {loss_value}"),
            });
        }
        tape.backward(loss);
        let grads = collect_grads(&tape, &staged);
        drop(tape);
        opt.step(&mut state.student.store, &grads);

        // ---- teacher update and schedule ----
        if opts.use_teacher {
            ema_update_decoder(&state.student, &mut state.teacher, state.alpha)?;
            let delta = if opts.gamma_from_delta_one {
                state.iteration + 1
            } else {
                state.iteration
            };
            state.gamma = gamma_scheduled_step(delta, state.gamma);
        }

        if iter % opts.eval_interval == 0 || iter == opts.iterations {
            let report = eval_model(&state.student, target_val, opts.convention)?;
            final_miou = report.miou;
            let q_mean = if q_accum.is_empty() {
                0.0
            } else {
                q_accum.iter().sum::<f64>() / q_accum.len() as f64
            };
            q_accum.clear();
            let record = report_to_record(
                iter,
                &report,
                &names,
                Some(state.gamma),
                Some(q_mean),
            );
            if let Some(path) = &metrics_path {
                let mut line = serde_json::to_string(&record)?;
                line.push('\n');
                use std::io::Write;
                let mut f = std::fs::OpenOptions::new().create(true).append(true).open(path)?;
                f.write_all(line.as_bytes())?;
            }
            metrics.push(record);
            if let Some(dir) = &opts.out_dir {
                state.student.save_checkpoint(&dir.join("student"))?;
                state.teacher.save_checkpoint(&dir.join("teacher"))?;
            }
        }
    }

    let hash_end = state.teacher.store.hash_roles(&encoder_hash_roles);
    Ok((
        UdaOutcome {
            metrics,
            final_miou,
            teacher_encoder_hashes: (hash_start, hash_end),
        },
        state,
    ))
}

#[cfg(test)]
mod tests;
