use std::collections::BTreeMap;

use proptest::prelude::*;

use super::*;

fn cat(id: u32, name: &str, synonyms: &[&str], desc: Option<&str>) -> CategorySpec {
    CategorySpec {
        id,
        name: name.to_string(),
        synonyms: synonyms.iter().map(|s| s.to_string()).collect(),
        annotator_description: desc.map(|s| s.to_string()),
    }
}

fn table(entries: &[(&str, &[&str])]) -> TableSynonymProvider {
    let mut t = BTreeMap::new();
    for (k, vs) in entries {
        t.insert(k.to_string(), vs.iter().map(|s| s.to_string()).collect());
    }
    TableSynonymProvider { table: t }
}

struct FailingProvider;
impl SynonymProvider for FailingProvider {
    fn synonyms(&self, _name: &str) -> crate::Result<Vec<String>> {
        Err(crate::Error::config("provider offline"))
    }
}

/// Table-backed encoder: each known string maps to a fixed vector.
struct VectorTableEncoder {
    dim: usize,
    table: BTreeMap<String, Vec<f64>>,
}

impl TextEncoder for VectorTableEncoder {
    fn dim(&self) -> usize {
        self.dim
    }
    fn encode_text(&self, prompt: &str) -> Vec<f64> {
        self.table
            .get(prompt)
            .cloned()
            .unwrap_or_else(|| vec![1.0; self.dim])
    }
}

#[test]
fn expand_drops_tokens_claimed_by_other_categories() {
    let ontology = vec![
        cat(1, "car", &[], None),
        cat(2, "bus", &["vehicle"], None),
    ];
    let provider = table(&[("car", &["automobile", "vehicle"])]);
    let exp = expand_synonyms(&ontology[0], &ontology, &provider);
    assert_eq!(exp.names, vec!["car", "automobile"]);
    assert!(exp.warnings.is_empty());
}

#[test]
fn expand_identity_when_provider_has_nothing() {
    let ontology = vec![cat(1, "sky", &[], None)];
    let provider = table(&[]);
    let exp = expand_synonyms(&ontology[0], &ontology, &provider);
    assert_eq!(exp.names, vec!["sky"]);
}

#[test]
fn expand_falls_back_to_name_on_provider_failure() {
    let ontology = vec![cat(1, "car", &[], None)];
    let exp = expand_synonyms(&ontology[0], &ontology, &FailingProvider);
    assert_eq!(exp.names, vec!["car"]);
    assert_eq!(exp.warnings.len(), 1);
    assert!(exp.warnings[0].contains("car"));
}

#[test]
fn expand_five_category_fixture_matches_hand_enumeration() {
    // Enumerated by hand before implementation: for each category,
    // [name] + provider tokens minus anything claimed (declared or
    // provided) by another category.
    let ontology = vec![
        cat(0, "road", &["street"], None),
        cat(1, "car", &[], None),
        cat(2, "bus", &["vehicle"], None),
        cat(3, "sky", &[], None),
        cat(4, "person", &["pedestrian"], None),
    ];
    let provider = table(&[
        ("road", &["street", "roadway"]),
        ("car", &["automobile", "vehicle", "auto"]),
        ("bus", &["coach", "vehicle"]),
        ("sky", &[]),
        ("person", &["human", "pedestrian", "car"]),
    ]);

    let expected: Vec<Vec<&str>> = vec![
        vec!["road", "street", "roadway"],
        vec!["car", "automobile", "auto"],
        vec!["bus", "coach", "vehicle"],
        vec!["sky"],
        vec!["person", "human", "pedestrian"],
    ];
    for (spec, want) in ontology.iter().zip(&expected) {
        let exp = expand_synonyms(spec, &ontology, &provider);
        assert_eq!(&exp.names, want, "category '{}'", spec.name);
    }
}

#[test]
fn prompt_set_single_template_single_name() {
    let spec = cat(1, "car", &[], None);
    let ps = build_prompt_set(&spec, &["A photo of a {}".into()], &["car".into()]).unwrap();
    assert_eq!(ps.prompts, vec!["A photo of a car"]);
    assert_eq!(ps.len(), 1);
}

#[test]
fn prompt_set_appends_description_variants() {
    let spec = cat(1, "car", &[], Some("a road vehicle with four wheels"));
    let ps = build_prompt_set(&spec, &["A photo of a {}".into()], &["car".into()]).unwrap();
    assert_eq!(ps.len(), 2);
    assert_eq!(ps.prompts[1], "A photo of a car, a road vehicle with four wheels");
}

#[test]
fn prompt_set_m_is_product_of_counts() {
    let spec = cat(1, "car", &[], Some("a road vehicle"));
    let ps = build_prompt_set(
        &spec,
        &["A photo of a {}".into(), "A picture of the {}".into()],
        &["car".into(), "automobile".into()],
    )
    .unwrap();
    assert_eq!(ps.len(), 8); // 2 templates x 2 names x (1 + description)
}

#[test]
fn prompt_set_rejects_bad_templates() {
    let spec = cat(1, "car", &[], None);
    assert!(build_prompt_set(&spec, &["A photo of a car".into()], &["car".into()]).is_err());
    assert!(build_prompt_set(&spec, &["{} and {}".into()], &["car".into()]).is_err());
}

#[test]
fn augmentation_insertion_points_match_their_families() {
    let spec = cat(1, "car", &[], None);
    let ps = build_prompt_set(&spec, &["A photo of a {}".into()], &["car".into()]).unwrap();
    let specs = vec![
        AugmentationSpec::new(AugmentationKind::Object, vec!["Vintage".into()]).unwrap(),
        AugmentationSpec::new(AugmentationKind::Photometry, vec!["with High Contrast".into()])
            .unwrap(),
        AugmentationSpec::new(AugmentationKind::Background, vec!["in the Countryside".into()])
            .unwrap(),
    ];
    let grid = augment_prompts(&ps, &specs).unwrap();
    assert_eq!(grid.m(), 1);
    assert_eq!(grid.a(), 3);
    assert_eq!(grid.variants[0][0], "A photo of a Vintage car");
    assert_eq!(grid.variants[0][1], "A photo of a car, with High Contrast");
    assert_eq!(grid.variants[0][2], "A photo of a car in the Countryside");
}

#[test]
fn colliding_fragment_keeps_unmodified_prompt() {
    let spec = cat(1, "car", &[], None);
    let ps = build_prompt_set(&spec, &["A photo of a Vintage {}".into()], &["car".into()]).unwrap();
    let specs =
        vec![AugmentationSpec::new(AugmentationKind::Object, vec!["Vintage".into()]).unwrap()];
    let grid = augment_prompts(&ps, &specs).unwrap();
    assert_eq!(grid.variants[0][0], "A photo of a Vintage car");
}

#[test]
fn robust_embeddings_mean_of_identical_vectors_is_identity() {
    let grid = AugmentedPromptSet {
        category_id: 0,
        variants: vec![vec!["p a".into(), "p b".into(), "p c".into()]],
    };
    let mut t = BTreeMap::new();
    for key in ["p a", "p b", "p c"] {
        t.insert(key.to_string(), vec![0.3, -0.7]);
    }
    let enc = VectorTableEncoder { dim: 2, table: t };
    let tes = robust_embeddings(&grid, &enc).unwrap();
    assert!((tes.embeddings[0][0] - 0.3).abs() < 1e-12);
    assert!((tes.embeddings[0][1] + 0.7).abs() < 1e-12);
}

#[test]
fn robust_embeddings_averages_basis_vectors() {
    let grid = AugmentedPromptSet {
        category_id: 0,
        variants: vec![vec!["x".into(), "y".into()]],
    };
    let mut t = BTreeMap::new();
    t.insert("x".to_string(), vec![1.0, 0.0]);
    t.insert("y".to_string(), vec![0.0, 1.0]);
    let enc = VectorTableEncoder { dim: 2, table: t };
    let tes = robust_embeddings(&grid, &enc).unwrap();
    assert_eq!(tes.embeddings, vec![vec![0.5, 0.5]]);
}

#[test]
fn robust_embeddings_matches_brute_force_mean_oracle() {
    // Fixture 3x4 grid with deterministic vectors; the oracle is an
    // independent summation loop over the raw encodings.
    let m = 3;
    let a = 4;
    let d = 5;
    let mut table = BTreeMap::new();
    let mut variants = Vec::new();
    for mi in 0..m {
        let mut row = Vec::new();
        for ai in 0..a {
            let key = format!("prompt {mi} variant {ai}");
            let vec: Vec<f64> = (0..d)
                .map(|k| ((mi * 31 + ai * 7 + k * 3) as f64).sin())
                .collect();
            table.insert(key.clone(), vec);
            row.push(key);
        }
        variants.push(row);
    }
    let enc = VectorTableEncoder { dim: d, table: table.clone() };
    let grid = AugmentedPromptSet { category_id: 2, variants: variants.clone() };
    let tes = robust_embeddings(&grid, &enc).unwrap();

    for (mi, row) in variants.iter().enumerate() {
        let mut oracle = vec![0.0; d];
        for key in row {
            for (acc, v) in oracle.iter_mut().zip(&table[key]) {
                *acc += v;
            }
        }
        for v in oracle.iter_mut() {
            *v /= a as f64;
        }
        for k in 0..d {
            assert!((tes.embeddings[mi][k] - oracle[k]).abs() < 1e-12);
        }
    }
}

#[test]
fn robust_embeddings_rejects_nan_and_names_the_prompt() {
    struct NanEncoder;
    impl TextEncoder for NanEncoder {
        fn dim(&self) -> usize {
            2
        }
        fn encode_text(&self, _prompt: &str) -> Vec<f64> {
            vec![f64::NAN, 0.0]
        }
    }
    let grid = AugmentedPromptSet {
        category_id: 0,
        variants: vec![vec!["the bad prompt".into()]],
    };
    let err = robust_embeddings(&grid, &NanEncoder).unwrap_err();
    assert!(err.to_string().contains("the bad prompt"));
}

#[test]
fn anchor_defaults_to_uniform_mean() {
    let tes = TextEmbeddingSet {
        category_id: 0,
        embeddings: vec![vec![1.0, 0.0], vec![0.0, 1.0]],
    };
    let anchor = semantic_anchor(&tes, None).unwrap();
    assert_eq!(anchor.vector, vec![0.5, 0.5]);
    assert_eq!(anchor.weights, vec![0.5, 0.5]);
}

#[test]
fn anchor_one_hot_selects_one_embedding() {
    let tes = TextEmbeddingSet {
        category_id: 0,
        embeddings: vec![vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0]],
    };
    let anchor = semantic_anchor(&tes, Some(&[0.0, 0.0, 1.0])).unwrap();
    assert_eq!(anchor.vector, vec![5.0, 6.0]);
}

#[test]
fn anchor_weighted_combination_matches_dot_product_oracle() {
    let e0 = vec![0.2, -0.4, 0.9];
    let e1 = vec![-0.1, 0.5, 0.3];
    let tes = TextEmbeddingSet {
        category_id: 0,
        embeddings: vec![e0.clone(), e1.clone()],
    };
    let anchor = semantic_anchor(&tes, Some(&[0.25, 0.75])).unwrap();
    for k in 0..3 {
        let oracle = 0.25 * e0[k] + 0.75 * e1[k];
        assert!((anchor.vector[k] - oracle).abs() < 1e-15);
    }
}

#[test]
fn anchor_rejects_wrong_weight_count() {
    let tes = TextEmbeddingSet {
        category_id: 0,
        embeddings: vec![vec![1.0], vec![2.0]],
    };
    assert!(semantic_anchor(&tes, Some(&[1.0])).is_err());
}

#[test]
fn export_import_round_trip_at_f32_precision() {
    let sets = vec![
        TextEmbeddingSet {
            category_id: 0,
            embeddings: vec![vec![0.125, -0.5], vec![1.0, 2.0]],
        },
        TextEmbeddingSet {
            category_id: 1,
            embeddings: vec![vec![3.0, -4.25], vec![0.0625, 9.5]],
        },
    ];
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("emb.bin");
    export_embeddings(&sets, &path).unwrap();
    let loaded = import_embeddings(&path).unwrap();
    assert_eq!(loaded.len(), 2);
    for (a, b) in sets.iter().zip(&loaded) {
        assert_eq!(a.embeddings, b.embeddings); // exact: values are f32-representable
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    /// Dedup soundness: no normalized token is shared by two categories
    /// after expansion, whatever the provider returns.
    #[test]
    fn dedup_soundness(raw in proptest::collection::vec(
        (proptest::collection::vec("[a-e]{1,3}", 0..4), proptest::collection::vec("[a-e]{1,3}", 0..4)),
        2..5,
    )) {
        let ontology: Vec<CategorySpec> = raw
            .iter()
            .enumerate()
            .map(|(i, (declared, _))| CategorySpec {
                id: i as u32,
                // unique names by construction
                name: format!("name{i}"),
                synonyms: declared.clone(),
                annotator_description: None,
            })
            .collect();
        let provider = TableSynonymProvider {
            table: raw
                .iter()
                .enumerate()
                .map(|(i, (_, provided))| (format!("name{i}"), provided.clone()))
                .collect(),
        };

        let expansions: Vec<Vec<String>> = ontology
            .iter()
            .map(|s| expand_synonyms(s, &ontology, &provider).names)
            .collect();
        let mut seen = std::collections::BTreeMap::new();
        for (ci, names) in expansions.iter().enumerate() {
            for n in names {
                let norm = normalize(n);
                if let Some(prev) = seen.insert(norm.clone(), ci) {
                    prop_assert!(prev == ci, "token '{norm}' shared by categories {prev} and {ci}");
                }
            }
        }
    }

    /// Grid rectangularity: |variants| == M x A for all inputs.
    #[test]
    fn grid_is_rectangular(
        m in 1usize..5,
        frag_obj in proptest::collection::vec("[A-Z][a-z]{1,5}", 1..3),
        frag_ph in proptest::collection::vec("[a-z]{2,6}", 1..3),
    ) {
        let spec = CategorySpec {
            id: 0,
            name: "car".into(),
            synonyms: vec![],
            annotator_description: None,
        };
        let templates: Vec<String> =
            (0..m).map(|i| format!("Template {i} about a {{}}")).collect();
        let ps = build_prompt_set(&spec, &templates, &["car".into()]).unwrap();
        let specs = vec![
            AugmentationSpec::new(AugmentationKind::Object, frag_obj.clone()).unwrap(),
            AugmentationSpec::new(AugmentationKind::Photometry, frag_ph.clone()).unwrap(),
        ];
        let grid = augment_prompts(&ps, &specs).unwrap();
        let a = frag_obj.len() + frag_ph.len();
        prop_assert_eq!(grid.m(), m);
        let total: usize = grid.variants.iter().map(Vec::len).sum();
        prop_assert_eq!(total, m * a);
        for row in &grid.variants {
            prop_assert_eq!(row.len(), a);
            for v in row {
                prop_assert!(v.contains("car"));
            }
        }
    }

    /// Mean linearity: scaling every encoded variant by c scales the
    /// robust embedding by c.
    #[test]
    fn mean_linearity(c in -3.0f64..3.0, seed in 0u64..1000) {
        use rand::Rng;
        let mut rng = crate::rng::stream(seed, "mean-linearity");
        let (m, a, d) = (2usize, 3usize, 4usize);
        let mut base = BTreeMap::new();
        let mut scaled = BTreeMap::new();
        let mut variants = Vec::new();
        for mi in 0..m {
            let mut row = Vec::new();
            for ai in 0..a {
                let key = format!("m{mi}a{ai}");
                let v: Vec<f64> = (0..d).map(|_| rng.gen_range(0.1..1.0)).collect();
                base.insert(key.clone(), v.clone());
                scaled.insert(key.clone(), v.iter().map(|x| c * x).collect());
                row.push(key);
            }
            variants.push(row);
        }
        let grid = AugmentedPromptSet { category_id: 0, variants };
        let e1 = robust_embeddings(&grid, &VectorTableEncoder { dim: d, table: base });
        let e2 = robust_embeddings(&grid, &VectorTableEncoder { dim: d, table: scaled });
        // c == 0 collapses embeddings to zero, which is rejected.
        if c.abs() > 1e-9 {
            let (e1, e2) = (e1.unwrap(), e2.unwrap());
            for (r1, r2) in e1.embeddings.iter().zip(&e2.embeddings) {
                for (v1, v2) in r1.iter().zip(r2) {
                    prop_assert!((c * v1 - v2).abs() < 1e-9);
                }
            }
        }
    }

    /// Anchor with uniform weights equals the per-category mean.
    #[test]
    fn anchor_uniform_is_mean(m in 1usize..6, d in 1usize..5, seed in 0u64..1000) {
        use rand::Rng;
        let mut rng = crate::rng::stream(seed, "anchor-mean");
        let embeddings: Vec<Vec<f64>> = (0..m)
            .map(|_| (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        let tes = TextEmbeddingSet { category_id: 0, embeddings: embeddings.clone() };
        let anchor = semantic_anchor(&tes, None).unwrap();
        for k in 0..d {
            let mean: f64 = embeddings.iter().map(|e| e[k]).sum::<f64>() / m as f64;
            prop_assert!((anchor.vector[k] - mean).abs() < 1e-7);
        }
    }
}
