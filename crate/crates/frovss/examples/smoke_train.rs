use frovss::data::{gen_dataset, load_dataset, Domain, DomainSpec, PhotometricShift};
use frovss::encoders::{FinetunePolicy, FinetuneStrategy};
use frovss::eval::MeanConvention;
use frovss::model::{ModelConfig, SegModel};
use frovss::presets::*;
use frovss::train::{train_supervised, SupervisedOptions};
use frovss::vocab::{build_vocabulary, PromptOptions};

fn main() {
    let t0 = std::time::Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let spec = DomainSpec {
        categories: vec![0, 1, 2, 3, 5, 6],
        photometric_shift: PhotometricShift::none(),
        texture_noise: 4.0,
        num_images: 40,
        seed: 100,
        size: 64,
    };
    gen_dataset(&spec, Domain::Source, "toy", true, &dir.path().join("train")).unwrap();
    let val_spec = DomainSpec { num_images: 10, seed: 101, ..spec.clone() };
    gen_dataset(&val_spec, Domain::Source, "toy", true, &dir.path().join("val")).unwrap();
    let train = load_dataset(&dir.path().join("train")).unwrap();
    let val = load_dataset(&dir.path().join("val")).unwrap();
    println!("data gen+load: {:?}", t0.elapsed());

    let world = toy_world();
    let source_ont = toy_source_ontology();
    let text = frovss::encoders::ToyTextEncoder::new(&world, 16, 42).unwrap();
    let vocab = build_vocabulary(
        &source_ont,
        &toy_synonym_provider(),
        &PromptOptions { templates: toy_templates(), augment: true, augmentations: toy_augmentations().specs().unwrap() },
        &text,
    ).unwrap();
    println!("vocab: N={} M={}", vocab.n(), vocab.m());

    let cfg = ModelConfig {
        hidden_dim: 8,
        aspp_branch: 4,
        guidance_strides: vec![8, 4, 2, 1],
        ..ModelConfig::default()
    };
    let mut model = SegModel::new(cfg, 42, &world, vocab, None).unwrap();
    println!("model built: {:?} ({} params)", t0.elapsed(),
        model.store.iter().map(|(_, p)| p.value.len()).sum::<usize>());

    // untrained baseline
    let report = frovss::train::eval_model(&model, &val.samples, MeanConvention::ExcludeAbsent).unwrap();
    println!("untrained miou: {:.4}", report.miou);

    let opts = SupervisedOptions {
        iterations: 200,
        batch: 4,
        eval_interval: 50,
        seed: 42,
        policy: FinetunePolicy {
            strategy: FinetuneStrategy::Proposed,
            base_lr_encoder: 1e-3,
            base_lr_decoder: 2e-3,
            beta: 0.95,
        },
        weight_decay: 1e-4,
        stop_at_miou: None,
        convention: MeanConvention::ExcludeAbsent,
    };
    let t1 = std::time::Instant::now();
    let outcome = train_supervised(&mut model, &train.samples, &val.samples, &opts).unwrap();
    for m in &outcome.metrics {
        println!("iter {:4}  miou {:.4}", m.iter, m.miou);
    }
    println!("train 200 iters: {:?} ({:.0} ms/iter)", t1.elapsed(), t1.elapsed().as_millis() as f64 / 200.0);
}
