//! Language-guided cost volume: cosine similarities between dense
//! visual features and robust text embeddings.

use ndarray::{Array2, Array3};

use crate::encoders::DenseVisualFeatures;
use crate::error::{Error, Result};
use crate::tape::{NodeId, Tape};
use crate::vocab::TextEmbeddingSet;

/// Norms are clamped here before division; upstream invariants forbid
/// zero vectors, the clamp only guards NaN propagation in training.
pub const NORM_FLOOR: f64 = 1e-12;

/// `values[i, m, n]` with `i` over the `h' x w'` grid in scan order.
#[derive(Debug, Clone)]
pub struct CostVolume {
    pub values: Array3<f64>,
    pub spatial_dims: (usize, usize),
}

impl CostVolume {
    pub fn m(&self) -> usize {
        self.values.dim().1
    }

    pub fn n(&self) -> usize {
        self.values.dim().2
    }
}

/// Cosine similarity between every visual feature and every prompt
/// embedding of every category.
pub fn cost_volume(ev: &DenseVisualFeatures, tes: &[TextEmbeddingSet]) -> Result<CostVolume> {
    if tes.is_empty() {
        return Err(Error::config("need at least one category"));
    }
    let d = ev.features.ncols();
    let m = tes[0].m();
    for (n, set) in tes.iter().enumerate() {
        if set.m() != m {
            return Err(Error::config(format!(
                "category {n} has M={} prompts, expected uniform M={m}",
                set.m()
            )));
        }
        if set.dim() != d {
            return Err(Error::model(format!(
                "category {n} embeddings have dim {}, visual features have {d}",
                set.dim()
            )));
        }
    }

    let hw = ev.features.nrows();
    let mut values = Array3::zeros((hw, m, tes.len()));
    let mut visual_norms = Vec::with_capacity(hw);
    for (i, row) in ev.features.rows().into_iter().enumerate() {
        let norm = row.dot(&row).sqrt();
        if norm < NORM_FLOOR {
            return Err(Error::model(format!("visual feature {i} has zero norm")));
        }
        visual_norms.push(norm);
    }
    for (n, set) in tes.iter().enumerate() {
        for (mi, emb) in set.embeddings.iter().enumerate() {
            let tnorm = emb.iter().map(|v| v * v).sum::<f64>().sqrt();
            if tnorm < NORM_FLOOR {
                return Err(Error::model(format!(
                    "text embedding (m={mi}, n={n}) has zero norm"
                )));
            }
            for i in 0..hw {
                let dot: f64 = ev
                    .features
                    .row(i)
                    .iter()
                    .zip(emb.iter())
                    .map(|(a, b)| a * b)
                    .sum();
                values[[i, mi, n]] = dot / (visual_norms[i] * tnorm);
            }
        }
    }
    Ok(CostVolume {
        values,
        spatial_dims: ev.grid,
    })
}

/// Column-packed text matrix for the in-graph route: `[d, N*M]` with
/// column `n * M + m` holding the L2-normalized embedding (m, n).
pub fn packed_text_matrix(tes: &[TextEmbeddingSet]) -> Result<Array2<f64>> {
    let d = tes
        .first()
        .map(TextEmbeddingSet::dim)
        .ok_or_else(|| Error::config("need at least one category"))?;
    let m = tes[0].m();
    let mut out = Array2::zeros((d, tes.len() * m));
    for (n, set) in tes.iter().enumerate() {
        if set.m() != m || set.dim() != d {
            return Err(Error::config("embedding sets are not uniform"));
        }
        for (mi, emb) in set.embeddings.iter().enumerate() {
            let norm = emb.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm < NORM_FLOOR {
                return Err(Error::model(format!(
                    "text embedding (m={mi}, n={n}) has zero norm"
                )));
            }
            for k in 0..d {
                out[[k, n * m + mi]] = emb[k] / norm;
            }
        }
    }
    Ok(out)
}

/// In-graph cost volume: rows of `features` are visual vectors, and
/// the result is `[rows, N*M]` with column `n * M + m` (so a row-major
/// reshape to `[rows*N, M]` groups the prompt axis). Gradients flow
/// into the visual features only; the text side is frozen.
pub fn cost_volume_node(tape: &mut Tape, features: NodeId, packed_text: &Array2<f64>) -> NodeId {
    let sq = tape.mul(features, features);
    let sumsq = tape.row_sum(sq);
    let clamped = tape.clamp(sumsq, NORM_FLOOR * NORM_FLOOR, f64::INFINITY);
    let norm = tape.sqrt(clamped);
    let inv = tape.recip(norm);
    let unit = tape.row_scale(features, inv);
    let text = tape.constant(packed_text.clone());
    tape.matmul(unit, text)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn dense(rows: usize, d: usize, values: Vec<f64>) -> DenseVisualFeatures {
        DenseVisualFeatures {
            features: Array2::from_shape_vec((rows, d), values).unwrap(),
            grid: (1, rows),
            patch_size: 8,
            source_resolution: (8, 8 * rows),
        }
    }

    fn single_set(embs: Vec<Vec<f64>>) -> TextEmbeddingSet {
        TextEmbeddingSet {
            category_id: 0,
            embeddings: embs,
        }
    }

    #[test]
    fn identical_vectors_have_unit_similarity() {
        let ev = dense(1, 3, vec![1.0, 2.0, 2.0]);
        let tes = vec![single_set(vec![vec![1.0, 2.0, 2.0]])];
        let cv = cost_volume(&ev, &tes).unwrap();
        assert!((cv.values[[0, 0, 0]] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn orthogonal_and_opposite_vectors() {
        let ev = dense(2, 2, vec![1.0, 0.0, 1.0, 0.0]);
        let tes = vec![single_set(vec![vec![0.0, 1.0], vec![-1.0, 0.0]])];
        let cv = cost_volume(&ev, &tes).unwrap();
        assert!((cv.values[[0, 0, 0]]).abs() < 1e-12);
        assert!((cv.values[[0, 1, 0]] + 1.0).abs() < 1e-12);
    }

    #[test]
    fn matches_three_nested_loop_oracle() {
        let mut rng = crate::rng::stream(17, "cost-oracle");
        let (hw, d, m, n) = (9, 5, 2, 2);
        let feats: Vec<f64> = (0..hw * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let ev = dense(hw, d, feats.clone());
        let tes: Vec<TextEmbeddingSet> = (0..n)
            .map(|cat| TextEmbeddingSet {
                category_id: cat as u32,
                embeddings: (0..m)
                    .map(|_| (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect())
                    .collect(),
            })
            .collect();
        let cv = cost_volume(&ev, &tes).unwrap();
        assert_eq!(cv.values.dim(), (hw, m, n));

        for i in 0..hw {
            for mi in 0..m {
                for ni in 0..n {
                    // independent brute-force cosine
                    let v = &feats[i * d..(i + 1) * d];
                    let t = &tes[ni].embeddings[mi];
                    let mut dot = 0.0;
                    let mut nv = 0.0;
                    let mut nt = 0.0;
                    for k in 0..d {
                        dot += v[k] * t[k];
                        nv += v[k] * v[k];
                        nt += t[k] * t[k];
                    }
                    let oracle = dot / (nv.sqrt() * nt.sqrt());
                    assert!(
                        (cv.values[[i, mi, ni]] - oracle).abs() < 1e-6,
                        "mismatch at ({i},{mi},{ni})"
                    );
                }
            }
        }
    }

    #[test]
    fn zero_norm_vector_is_named() {
        let ev = dense(2, 2, vec![1.0, 0.0, 0.0, 0.0]);
        let tes = vec![single_set(vec![vec![1.0, 0.0]])];
        let err = cost_volume(&ev, &tes).unwrap_err();
        assert!(err.to_string().contains("visual feature 1"));

        let ev = dense(1, 2, vec![1.0, 0.0]);
        let tes = vec![single_set(vec![vec![0.0, 0.0]])];
        let err = cost_volume(&ev, &tes).unwrap_err();
        assert!(err.to_string().contains("m=0, n=0"));
    }

    #[test]
    fn graph_route_matches_plain_route() {
        let mut rng = crate::rng::stream(23, "cost-graph");
        let (hw, d, m, n) = (6, 4, 3, 2);
        let feats: Vec<f64> = (0..hw * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let ev = dense(hw, d, feats.clone());
        let tes: Vec<TextEmbeddingSet> = (0..n)
            .map(|cat| TextEmbeddingSet {
                category_id: cat as u32,
                embeddings: (0..m)
                    .map(|_| (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect())
                    .collect(),
            })
            .collect();
        let plain = cost_volume(&ev, &tes).unwrap();

        let mut tape = Tape::new();
        let f = tape.constant(ev.features.clone());
        let packed = packed_text_matrix(&tes).unwrap();
        let node = cost_volume_node(&mut tape, f, &packed);
        let graph = tape.value(node);
        for i in 0..hw {
            for mi in 0..m {
                for ni in 0..n {
                    assert!(
                        (graph[[i, ni * m + mi]] - plain.values[[i, mi, ni]]).abs() < 1e-9
                    );
                }
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(40))]

        /// Scaling the visual features by any positive constant leaves
        /// the cost volume unchanged.
        #[test]
        fn scale_invariance(c in 1e-3f64..100.0, seed in 0u64..500) {
            let mut rng = crate::rng::stream(seed, "cost-scale");
            let (hw, d) = (4usize, 3usize);
            let feats: Vec<f64> = (0..hw * d).map(|_| rng.gen_range(0.1..1.0)).collect();
            let scaled: Vec<f64> = feats.iter().map(|v| c * v).collect();
            let tes = vec![single_set(vec![
                (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            ])];
            let a = cost_volume(&dense(hw, d, feats), &tes).unwrap();
            let b = cost_volume(&dense(hw, d, scaled), &tes).unwrap();
            for (x, y) in a.values.iter().zip(b.values.iter()) {
                prop_assert!((x - y).abs() < 1e-6);
            }
        }

        /// Every entry lies in [-1, 1] and the shape is (hw, M, N).
        #[test]
        fn bounded_and_shaped(seed in 0u64..500) {
            let mut rng = crate::rng::stream(seed, "cost-bounds");
            let (hw, d, m, n) = (5usize, 4usize, 2usize, 3usize);
            let feats: Vec<f64> = (0..hw * d).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let tes: Vec<TextEmbeddingSet> = (0..n)
                .map(|cat| TextEmbeddingSet {
                    category_id: cat as u32,
                    embeddings: (0..m)
                        .map(|_| (0..d).map(|_| rng.gen_range(-2.0..2.0)).collect())
                        .collect(),
                })
                .collect();
            // reroll any zero-ish vectors
            prop_assume!(feats.chunks(d).all(|c| c.iter().map(|v| v * v).sum::<f64>() > 1e-6));
            let cv = cost_volume(&dense(hw, d, feats), &tes).unwrap();
            prop_assert_eq!(cv.values.dim(), (hw, m, n));
            for v in cv.values.iter() {
                prop_assert!((-1.0 - 1e-6..=1.0 + 1e-6).contains(v));
            }
        }
    }
}
