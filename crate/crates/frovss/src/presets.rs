//! Built-in toy-world fixtures and run presets.
//!
//! The toy world has seven categories (backdrop plus six shapes) with
//! synonym tables and annotator descriptions; the presets wire them
//! into ready-to-run configurations used by the examples, the CLI
//! defaults, and the acceptance suite.

use crate::vocab::{AugmentationFile, CategorySpec, TableSynonymProvider};

pub const TOY_ONTOLOGY_JSON: &str = include_str!("../assets/toy_ontology.json");
pub const TOY_SYNONYMS_JSON: &str = include_str!("../assets/toy_synonyms.json");
pub const TOY_AUGMENTATIONS_JSON: &str = include_str!("../assets/toy_augmentations.json");

/// The full seven-category toy ontology (the encoders' "pretraining
/// world").
pub fn toy_world() -> Vec<CategorySpec> {
    serde_json::from_str(TOY_ONTOLOGY_JSON).expect("embedded ontology is valid")
}

/// The toy ontology without the target-private `cross` category.
pub fn toy_source_ontology() -> Vec<CategorySpec> {
    toy_world()
        .into_iter()
        .filter(|c| c.name != "cross")
        .collect()
}

pub fn toy_synonym_provider() -> TableSynonymProvider {
    TableSynonymProvider {
        table: serde_json::from_str(TOY_SYNONYMS_JSON).expect("embedded synonym table is valid"),
    }
}

pub fn toy_augmentations() -> AugmentationFile {
    serde_json::from_str(TOY_AUGMENTATIONS_JSON).expect("embedded augmentations are valid")
}

/// Default prompt templates.
pub fn toy_templates() -> Vec<String> {
    vec![
        "A photo of a {}".to_string(),
        "A rendered scene containing a {}".to_string(),
    ]
}
