use ndarray::Array2;
use rand::Rng;

use super::*;
use crate::encoders::{GuidanceLevel, ParamStore};
use crate::rng::{hash_f64s, stream};
use crate::tape::gradcheck::check_gradients;
use crate::vocab::SemanticAnchor;

fn small_cfg(guidance: bool) -> DecoderConfig {
    DecoderConfig {
        hidden: 4,
        prompts: 2,
        patch: 4,
        anchor_dim: 3,
        window: 2,
        heads: 2,
        swin_dim: 4,
        text_dim: 4,
        aspp_rates: vec![1, 2],
        aspp_branch: 3,
        guidance_channels: if guidance { 2 } else { 0 },
        guidance_proj: 2,
    }
}

fn build(guidance: bool) -> (ParamStore, Decoder) {
    let mut store = ParamStore::new();
    let dec = Decoder::new(&mut store, small_cfg(guidance), 42).unwrap();
    (store, dec)
}

fn randn(rows: usize, cols: usize, label: &str) -> Array2<f64> {
    let mut rng = stream(5, label);
    Array2::from_shape_fn((rows, cols), |_| rng.gen_range(-1.0..1.0))
}

fn anchors(n: usize, dim: usize, label: &str) -> Vec<SemanticAnchor> {
    let mat = randn(n, dim, label);
    (0..n)
        .map(|i| SemanticAnchor {
            category_id: i as u32,
            vector: mat.row(i).to_vec(),
            weights: vec![1.0],
        })
        .collect()
}

fn synthetic_guidance(batch: usize, strides: &[(usize, usize, usize)], g: usize) -> Vec<crate::encoders::GuidanceFeatures> {
    (0..batch)
        .map(|b| crate::encoders::GuidanceFeatures {
            levels: strides
                .iter()
                .map(|(s, h, w)| GuidanceLevel {
                    stride: *s,
                    h: *h,
                    w: *w,
                    data: randn(h * w, g, &format!("g{b}s{s}")),
                })
                .collect(),
        })
        .collect()
}

#[test]
fn embed_shape_contract_and_mismatch() {
    let (store, dec) = build(false);
    let mut tape = Tape::new();
    let staged = store.stage_frozen(&mut tape);
    let cost = tape.constant(randn(2 * 16, 3 * 2, "cost")); // batch 2, 4x4 grid, N=3, M=2
    let hv = dec.embed_cost(&mut tape, &staged, cost, 2, 4, 4, 3).unwrap();
    assert_eq!(hv.stage, Stage::Embedded);
    assert_eq!(tape.value(hv.node).dim(), (2 * 3 * 16, 4));

    // M mismatch: 3 prompt columns per category against a M=2 embedding
    let bad = tape.constant(randn(2 * 16, 3 * 3, "bad"));
    assert!(dec.embed_cost(&mut tape, &staged, bad, 2, 4, 4, 3).is_err());
}

#[test]
fn embed_with_identity_map_passes_costs_through() {
    let mut store = ParamStore::new();
    let cfg = DecoderConfig {
        prompts: 1,
        ..small_cfg(false)
    };
    let dec = Decoder::new(&mut store, cfg, 1).unwrap();
    // identity-initialized map for M=1: channel 0 copies the input
    let ids = store.ids_with_roles(&[crate::encoders::ParamRole::Decoder]);
    let embed_w = ids[0];
    let mut w = Array2::zeros((1, 4));
    w[[0, 0]] = 1.0;
    *store.value_mut(embed_w) = w;

    let mut tape = Tape::new();
    let staged = store.stage_frozen(&mut tape);
    let cost_values = randn(16, 2, "c1"); // batch 1, 4x4, N=2, M=1
    let cost = tape.constant(cost_values.clone());
    let hv = dec.embed_cost(&mut tape, &staged, cost, 1, 4, 4, 2).unwrap();
    let out = tape.value(hv.node);
    // category-major rows: (n*16 + i) channel 0 equals cost[i, n]
    for n in 0..2 {
        for i in 0..16 {
            assert!((out[[n * 16 + i, 0]] - cost_values[[i, n]]).abs() < 1e-6);
        }
    }
}

#[test]
fn embed_matches_dense_matmul_oracle() {
    let (mut store, dec) = build(false);
    let w_fixture = randn(2, 4, "wfix");
    let b_fixture = randn(1, 4, "bfix");
    let ids = store.ids_with_roles(&[crate::encoders::ParamRole::Decoder]);
    *store.value_mut(ids[0]) = w_fixture.clone();
    *store.value_mut(ids[1]) = b_fixture.clone();

    let mut tape = Tape::new();
    let staged = store.stage_frozen(&mut tape);
    let cost_values = randn(16, 2 * 2, "cfix"); // batch 1, 4x4, N=2, M=2
    let cost = tape.constant(cost_values.clone());
    let hv = dec.embed_cost(&mut tape, &staged, cost, 1, 4, 4, 2).unwrap();
    let out = tape.value(hv.node);

    for n in 0..2 {
        for i in 0..16 {
            for ch in 0..4 {
                let mut oracle = b_fixture[[0, ch]];
                for m in 0..2 {
                    oracle += cost_values[[i, n * 2 + m]] * w_fixture[[m, ch]];
                }
                assert!((out[[n * 16 + i, ch]] - oracle).abs() < 1e-9);
            }
        }
    }
}

#[test]
fn aspp_zero_initialized_fusion_is_identity() {
    let (store, dec) = build(false);
    let mut tape = Tape::new();
    let staged = store.stage_frozen(&mut tape);
    let cost = tape.constant(randn(16, 2 * 2, "c2"));
    let hv = dec.embed_cost(&mut tape, &staged, cost, 1, 4, 4, 2).unwrap();
    let refined = dec.spatial_refine(&mut tape, &staged, &hv).unwrap();
    assert_eq!(refined.stage, Stage::Refined);
    let a = tape.value(hv.node);
    let b = tape.value(refined.node);
    assert_eq!(a.dim(), b.dim());
    for (x, y) in a.iter().zip(b.iter()) {
        assert_eq!(x, y, "residual with zero-initialized fusion must be exact");
    }
}

#[test]
fn aspp_constant_input_stays_spatially_constant() {
    let (mut store, dec) = build(false);
    // randomize the fusion so the branches actually contribute
    let fuse_id = store
        .iter()
        .find(|(_, p)| p.name == "dec.aspp.fuse.w")
        .map(|(id, _)| id)
        .unwrap();
    *store.value_mut(fuse_id) = randn(2 * 3, 4, "fuse");

    let mut tape = Tape::new();
    let staged = store.stage_frozen(&mut tape);
    // constant over space, distinct per (category, channel)
    let mut cost = Array2::zeros((16, 4));
    for i in 0..16 {
        for c in 0..4 {
            cost[[i, c]] = 0.3 + 0.2 * c as f64;
        }
    }
    let cost = tape.constant(cost);
    let hv = dec.embed_cost(&mut tape, &staged, cost, 1, 4, 4, 2).unwrap();
    let refined = dec.spatial_refine(&mut tape, &staged, &hv).unwrap();
    let out = tape.value(refined.node);
    for item in 0..2 {
        for ch in 0..4 {
            let first = out[[item * 16, ch]];
            for pix in 0..16 {
                assert!(
                    (out[[item * 16 + pix, ch]] - first).abs() < 1e-9,
                    "reflect-padded convolutions keep constants constant"
                );
            }
        }
    }
}

#[test]
fn aspp_shrinks_oversized_dilations() {
    let mut store = ParamStore::new();
    let cfg = DecoderConfig {
        aspp_rates: vec![1, 4],
        window: 1,
        ..small_cfg(false)
    };
    let dec = Decoder::new(&mut store, cfg, 3).unwrap();
    let mut tape = Tape::new();
    let staged = store.stage_frozen(&mut tape);
    // 2x2 grid: dilation 4 cannot reflect-pad and must be skipped
    let cost = tape.constant(randn(4, 2 * 2, "c3"));
    let hv = dec.embed_cost(&mut tape, &staged, cost, 1, 2, 2, 2).unwrap();
    let refined = dec.spatial_refine(&mut tape, &staged, &hv).unwrap();
    assert_eq!(tape.value(refined.node).dim(), (2 * 4, 4));
}

#[test]
fn fusion_without_guidance_keeps_shape() {
    let (store, dec) = build(false);
    let mut tape = Tape::new();
    let staged = store.stage_frozen(&mut tape);
    let cost = tape.constant(randn(16, 2 * 2, "c4"));
    let hv = dec.embed_cost(&mut tape, &staged, cost, 1, 4, 4, 2).unwrap();
    let refined = dec.spatial_refine(&mut tape, &staged, &hv).unwrap();
    let guidance = StagedGuidance { levels: Vec::new() };
    let fused = dec.fuse_guidance(&mut tape, &staged, &refined, &guidance).unwrap();
    assert_eq!(fused.stage, Stage::Fused);
    assert_eq!(tape.value(fused.node).dim(), (2 * 16, 4));
}

#[test]
fn fusion_with_guidance_matches_golden_digest() {
    let (store, dec) = build(true);
    let mut tape = Tape::new();
    let staged = store.stage_frozen(&mut tape);
    let cost = tape.constant(randn(2 * 16, 2 * 2, "c5"));
    let hv = dec.embed_cost(&mut tape, &staged, cost, 2, 4, 4, 2).unwrap();
    let refined = dec.spatial_refine(&mut tape, &staged, &hv).unwrap();
    let pyramids = synthetic_guidance(2, &[(4, 4, 4), (2, 8, 8), (1, 16, 16)], 2);
    let guidance = StagedGuidance::stage(&pyramids).unwrap();
    let fused = dec.fuse_guidance(&mut tape, &staged, &refined, &guidance).unwrap();
    let digest = hash_f64s(&tape.value(fused.node).iter().cloned().collect::<Vec<_>>());
    assert_eq!(digest, "31df51e14cc0419585872d88536abc46a5916c1a04b940d09c8fbf7420dbe923");
}

#[test]
fn text_guide_is_category_equivariant() {
    let (store, dec) = build(false);
    let n = 3;
    let perm = [2usize, 0, 1];
    let anchor_set = anchors(n, 3, "anch");

    let run = |order: &[usize]| -> Array2<f64> {
        let mut tape = Tape::new();
        let staged = store.stage_frozen(&mut tape);
        // build a fused-stage volume whose category blocks follow `order`
        let base = randn(n * 16, 4, "tg-base");
        let mut permuted = Array2::zeros((n * 16, 4));
        for (slot, &src) in order.iter().enumerate() {
            permuted
                .slice_mut(ndarray::s![slot * 16..(slot + 1) * 16, ..])
                .assign(&base.slice(ndarray::s![src * 16..(src + 1) * 16, ..]));
        }
        let node = tape.constant(permuted);
        let hv = HiddenVolume {
            node,
            stage: Stage::Fused,
            layout: VolumeLayout {
                batch: 1,
                n_cats: n,
                h: 4,
                w: 4,
            },
        };
        let reordered: Vec<SemanticAnchor> =
            order.iter().map(|&i| anchor_set[i].clone()).collect();
        let out = dec.text_guide(&mut tape, &staged, &hv, &reordered).unwrap();
        tape.value(out.node).clone()
    };

    let base = run(&[0, 1, 2]);
    let permuted = run(&perm);
    for (slot, &src) in perm.iter().enumerate() {
        for i in 0..16 {
            for c in 0..4 {
                assert!(
                    (permuted[[slot * 16 + i, c]] - base[[src * 16 + i, c]]).abs() < 1e-9,
                    "permuting categories must permute outputs"
                );
            }
        }
    }
}

#[test]
fn text_guide_rejects_bad_anchors() {
    let (store, dec) = build(false);
    let mut tape = Tape::new();
    let staged = store.stage_frozen(&mut tape);
    let cost = tape.constant(randn(16, 2 * 2, "c6"));
    let hv = dec.embed_cost(&mut tape, &staged, cost, 1, 4, 4, 2).unwrap();
    let refined = dec.spatial_refine(&mut tape, &staged, &hv).unwrap();
    let guidance = StagedGuidance { levels: Vec::new() };
    let fused = dec.fuse_guidance(&mut tape, &staged, &refined, &guidance).unwrap();
    // wrong count
    assert!(dec.text_guide(&mut tape, &staged, &fused, &anchors(1, 3, "a1")).is_err());
    // wrong dimension
    assert!(dec.text_guide(&mut tape, &staged, &fused, &anchors(2, 5, "a2")).is_err());
}

#[test]
fn text_guide_golden_digest() {
    let (store, dec) = build(false);
    let mut tape = Tape::new();
    let staged = store.stage_frozen(&mut tape);
    let node = tape.constant(randn(2 * 16, 4, "tg-fix"));
    let hv = HiddenVolume {
        node,
        stage: Stage::Fused,
        layout: VolumeLayout {
            batch: 1,
            n_cats: 2,
            h: 4,
            w: 4,
        },
    };
    let out = dec.text_guide(&mut tape, &staged, &hv, &anchors(2, 3, "tg-anch")).unwrap();
    assert_eq!(out.stage, Stage::TextGuided);
    let digest = hash_f64s(&tape.value(out.node).iter().cloned().collect::<Vec<_>>());
    assert_eq!(digest, "7387b5bba6845b5f466bf65bf2a9e4abe9561a3175b143da63bb6cfc85aeff8e");
}

#[test]
fn upsample_recovers_full_resolution() {
    let (store, dec) = build(true);
    let mut tape = Tape::new();
    let staged = store.stage_frozen(&mut tape);
    let node = tape.constant(randn(2 * 16, 4, "up-fix"));
    let hv = HiddenVolume {
        node,
        stage: Stage::TextGuided,
        layout: VolumeLayout {
            batch: 1,
            n_cats: 2,
            h: 4,
            w: 4,
        },
    };
    let pyramids = synthetic_guidance(1, &[(4, 4, 4), (2, 8, 8), (1, 16, 16)], 2);
    let guidance = StagedGuidance::stage(&pyramids).unwrap();
    let up = dec.upsample(&mut tape, &staged, &hv, &guidance).unwrap();
    assert_eq!(up.stage, Stage::Upsampled);
    assert_eq!((up.layout.h, up.layout.w), (16, 16));
    assert_eq!(tape.value(up.node).dim(), (2 * 256, 4));
}

#[test]
fn upsample_iteration_count_follows_patch_size() {
    assert_eq!(small_cfg(false).upsample_iterations(), 2);
    let cfg16 = DecoderConfig {
        patch: 16,
        ..small_cfg(false)
    };
    // k=16: four x2 iterations (two x4 stages' worth)
    assert_eq!(cfg16.upsample_iterations(), 4);
    let bad = DecoderConfig {
        patch: 12,
        ..small_cfg(false)
    };
    assert!(bad.validate().is_err());
}

#[test]
fn predict_is_half_at_zero_and_monotone() {
    let (mut store, dec) = build(false);
    let head_w = store
        .iter()
        .find(|(_, p)| p.name == "dec.head.w")
        .map(|(id, _)| id)
        .unwrap();
    *store.value_mut(head_w) = Array2::zeros((4, 1));

    let mut tape = Tape::new();
    let staged = store.stage_frozen(&mut tape);
    let node = tape.constant(randn(2 * 16, 4, "pr"));
    let hv = HiddenVolume {
        node,
        stage: Stage::Upsampled,
        layout: VolumeLayout {
            batch: 1,
            n_cats: 2,
            h: 4,
            w: 4,
        },
    };
    let scores = dec.predict(&mut tape, &staged, &hv).unwrap();
    for v in tape.value(scores).iter() {
        assert_eq!(*v, 0.5, "zero weights and bias give exactly 0.5");
    }

    // positive weight: increasing the channel increases the score
    let (store, dec) = build(false);
    let run = |delta: f64| -> f64 {
        let mut tape = Tape::new();
        let staged = store.stage_frozen(&mut tape);
        let mut values = randn(16, 4, "pr2");
        values[[3, 1]] += delta;
        let node = tape.constant(values);
        let hv = HiddenVolume {
            node,
            stage: Stage::Upsampled,
            layout: VolumeLayout {
                batch: 1,
                n_cats: 1,
                h: 4,
                w: 4,
            },
        };
        let scores = dec.predict(&mut tape, &staged, &hv).unwrap();
        tape.value(scores)[[3, 0]]
    };
    assert!(run(1.0) > run(0.0));

    // scalar oracle: sigmoid(w . F + b)
    let (store, dec) = build(false);
    let mut tape = Tape::new();
    let staged = store.stage_frozen(&mut tape);
    let values = randn(16, 4, "pr3");
    let node = tape.constant(values.clone());
    let hv = HiddenVolume {
        node,
        stage: Stage::Upsampled,
        layout: VolumeLayout {
            batch: 1,
            n_cats: 1,
            h: 4,
            w: 4,
        },
    };
    let scores = dec.predict(&mut tape, &staged, &hv).unwrap();
    let w = store.value(store.iter().find(|(_, p)| p.name == "dec.head.w").unwrap().0).clone();
    let b = store.value(store.iter().find(|(_, p)| p.name == "dec.head.b").unwrap().0)[[0, 0]];
    for i in 0..16 {
        let mut logit = b;
        for c in 0..4 {
            logit += values[[i, c]] * w[[c, 0]];
        }
        let oracle = 1.0 / (1.0 + (-logit).exp());
        assert!((tape.value(scores)[[i, 0]] - oracle).abs() < 1e-12);
    }
}

#[test]
fn predict_outputs_stay_strictly_inside_unit_interval() {
    let (store, dec) = build(false);
    let mut tape = Tape::new();
    let staged = store.stage_frozen(&mut tape);
    let extreme = Array2::from_elem((16, 4), 1e6);
    let node = tape.constant(extreme);
    let hv = HiddenVolume {
        node,
        stage: Stage::Upsampled,
        layout: VolumeLayout {
            batch: 1,
            n_cats: 1,
            h: 4,
            w: 4,
        },
    };
    let scores = dec.predict(&mut tape, &staged, &hv).unwrap();
    for v in tape.value(scores).iter() {
        assert!(*v > 0.0 && *v < 1.0);
    }
}

#[test]
fn full_stack_gradients_match_finite_differences() {
    // End-to-end through every decoder stage with respect to leading
    // parameters of each kind.
    let (store, dec) = build(true);
    let cost_fix = randn(16, 2 * 2, "gc-cost");
    let pyramids = synthetic_guidance(1, &[(4, 4, 4), (2, 8, 8), (1, 16, 16)], 2);
    let anchor_set = anchors(2, 3, "gc-anch");

    let picks = ["dec.embed.w", "dec.aspp.r1.w", "dec.fuse.in.w", "dec.textguide.wq", "dec.up0.mix.w", "dec.head.w"];
    let pick_ids: Vec<ParamId> = picks
        .iter()
        .map(|name| store.iter().find(|(_, p)| &p.name == name).unwrap().0)
        .collect();
    let initial: Vec<Array2<f64>> = pick_ids.iter().map(|id| store.value(*id).clone()).collect();

    check_gradients(
        &initial,
        |tape, ids| {
            // stage all params; overwrite the picked ones with leaves
            let mut staged = Vec::with_capacity(store.len());
            for (pid, p) in store.iter() {
                if let Some(pos) = pick_ids.iter().position(|x| *x == pid) {
                    staged.push(ids[pos]);
                } else {
                    staged.push(tape.constant(p.value.clone()));
                }
            }
            let cost = tape.constant(cost_fix.clone());
            let hv = dec.embed_cost(tape, &staged, cost, 1, 4, 4, 2).unwrap();
            let hv = dec.spatial_refine(tape, &staged, &hv).unwrap();
            let guidance = StagedGuidance::stage(&pyramids).unwrap();
            let hv = dec.fuse_guidance(tape, &staged, &hv, &guidance).unwrap();
            let hv = dec.text_guide(tape, &staged, &hv, &anchor_set).unwrap();
            let hv = dec.upsample(tape, &staged, &hv, &guidance).unwrap();
            let scores = dec.predict(tape, &staged, &hv).unwrap();
            // fixed random projection to a scalar
            let w = tape.constant(randn(256, 2, "gc-w"));
            let prod = tape.mul(scores, w);
            tape.sum_all(prod)
        },
        1e-5,
        2e-4,
    );
}
