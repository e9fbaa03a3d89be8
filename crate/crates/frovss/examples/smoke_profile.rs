use frovss::data::{generate_sample, Domain, DomainSpec, PhotometricShift};
use frovss::encoders::image_to_f64;
use frovss::model::{ModelConfig, SegModel};
use frovss::presets::*;
use frovss::tape::Tape;
use frovss::train::{bce_loss_node, one_hot_targets};
use frovss::vocab::{build_vocabulary, PromptOptions};

fn main() {
    let world = toy_world();
    let text = frovss::encoders::ToyTextEncoder::new(&world, 16, 42).unwrap();
    let vocab = build_vocabulary(
        &toy_source_ontology(), &toy_synonym_provider(),
        &PromptOptions { templates: toy_templates(), augment: true, augmentations: toy_augmentations().specs().unwrap() },
        &text,
    ).unwrap();
    let cfg = ModelConfig { hidden_dim: 8, aspp_branch: 4, guidance_strides: vec![8,4,2,1], ..ModelConfig::default() };
    let mut model = SegModel::new(cfg, 42, &world, vocab, None).unwrap();
    // make everything trainable so backward cost is realistic
    frovss::encoders::assign_param_groups(&mut model.store, &frovss::encoders::FinetunePolicy {
        strategy: frovss::encoders::FinetuneStrategy::Proposed,
        base_lr_encoder: 1e-3, base_lr_decoder: 2e-3, beta: 0.95,
    }, model.cfg.encoder_layers).unwrap();

    let spec = DomainSpec { categories: vec![0,1,2,3,5,6], photometric_shift: PhotometricShift::none(),
        texture_noise: 4.0, num_images: 4, seed: 7, size: 64 };
    let samples: Vec<_> = (0..4).map(|i| generate_sample(&spec, Domain::Source, i)).collect();
    let images: Vec<_> = samples.iter().map(|s| image_to_f64(&s.image)).collect();
    let index_of = model.index_of();

    for round in 0..3 {
        let t0 = std::time::Instant::now();
        let mut tape = Tape::new();
        let staged = model.store.stage(&mut tape);
        let scores = model.forward_batch(&mut tape, &staged, &images).unwrap();
        let t_fwd = t0.elapsed();

        let mut targets = ndarray::Array2::zeros((4 * 64 * 64, index_of.len()));
        let mut valid = vec![false; 4 * 64 * 64];
        for (b, s) in samples.iter().enumerate() {
            let (t, v) = one_hot_targets(s.label.as_ref().unwrap(), &index_of).unwrap();
            targets.slice_mut(ndarray::s![b*4096..(b+1)*4096, ..]).assign(&t);
            valid[b*4096..(b+1)*4096].copy_from_slice(&v);
        }
        let loss = bce_loss_node(&mut tape, scores, &targets, &valid, 1.0);
        let t1 = std::time::Instant::now();
        tape.backward(loss);
        let t_bwd = t1.elapsed();
        println!("round {round}: forward {t_fwd:?}  backward {t_bwd:?}  nodes {}", tape.len());
    }
}
