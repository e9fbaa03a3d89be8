//! Category vocabulary: synonym expansion, prompt construction, the
//! three prompt augmentation families, robust mean text embeddings and
//! per-category semantic anchors.

use std::collections::BTreeSet;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One category of the segmentation ontology.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CategorySpec {
    pub id: u32,
    pub name: String,
    #[serde(default)]
    pub synonyms: Vec<String>,
    #[serde(default)]
    pub annotator_description: Option<String>,
}

/// Lowercase + trim; the normalization used for all duplicate checks.
pub fn normalize(token: &str) -> String {
    token.trim().to_lowercase()
}

impl CategorySpec {
    /// Name plus declared synonyms, normalized. These are the strings
    /// the category "claims" for cross-category deduplication.
    pub fn claimed_tokens(&self) -> BTreeSet<String> {
        let mut set = BTreeSet::new();
        set.insert(normalize(&self.name));
        for s in &self.synonyms {
            set.insert(normalize(s));
        }
        set
    }
}

/// Load an ontology file: a JSON list of category objects.
pub fn load_ontology(path: &Path) -> Result<Vec<CategorySpec>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::data(format!("cannot read ontology: {e}"), Some(path.into())))?;
    let specs: Vec<CategorySpec> = serde_json::from_str(&text)?;
    validate_ontology(&specs)?;
    Ok(specs)
}

pub fn validate_ontology(specs: &[CategorySpec]) -> Result<()> {
    let mut ids = BTreeSet::new();
    let mut names = BTreeSet::new();
    for spec in specs {
        if spec.name.trim().is_empty() {
            return Err(Error::config(format!("category {} has an empty name", spec.id)));
        }
        if !ids.insert(spec.id) {
            return Err(Error::config(format!("duplicate category id {}", spec.id)));
        }
        if !names.insert(normalize(&spec.name)) {
            return Err(Error::config(format!("duplicate category name '{}'", spec.name)));
        }
        let mut seen = BTreeSet::new();
        for syn in &spec.synonyms {
            if !seen.insert(normalize(syn)) {
                return Err(Error::config(format!(
                    "category '{}' declares duplicate synonym '{}'",
                    spec.name, syn
                )));
            }
        }
    }
    Ok(())
}

/// Source of synonyms for a category name.
pub trait SynonymProvider {
    fn synonyms(&self, name: &str) -> Result<Vec<String>>;
}

/// Deterministic table-backed provider used in tests and the toy
/// pipeline.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct TableSynonymProvider {
    pub table: std::collections::BTreeMap<String, Vec<String>>,
}

impl TableSynonymProvider {
    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::data(format!("cannot read synonym table: {e}"), Some(path.into())))?;
        Ok(Self {
            table: serde_json::from_str(&text)?,
        })
    }
}

impl SynonymProvider for TableSynonymProvider {
    fn synonyms(&self, name: &str) -> Result<Vec<String>> {
        Ok(self.table.get(&normalize(name)).cloned().unwrap_or_default())
    }
}

/// Placeholder for a live LLM endpoint. Construction succeeds so
/// configs can reference it, but queries are rejected until an actual
/// client is wired in; tests and the toy pipeline use
/// [`TableSynonymProvider`].
#[derive(Debug, Clone)]
pub struct HttpSynonymProvider {
    pub endpoint: String,
}

impl SynonymProvider for HttpSynonymProvider {
    fn synonyms(&self, _name: &str) -> Result<Vec<String>> {
        Err(Error::config(format!(
            "http synonym provider ({}) is not wired to a client; use a synonym table",
            self.endpoint
        )))
    }
}

/// Result of [`expand_synonyms`]: the usable names plus any warnings
/// (e.g. provider failures that fell back to the bare name).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SynonymExpansion {
    pub names: Vec<String>,
    pub warnings: Vec<String>,
}

/// Expand a category's name through the provider, dropping any token
/// claimed by another category so that expansions of distinct
/// categories never share a normalized token. Tokens declared in the
/// ontology always beat provider suggestions: a declared synonym is
/// dropped only when some *other* category declares it too, while a
/// provider-only token is also dropped when any other category's
/// provider offers the same string. Order is stable: the name first,
/// then provider order.
pub fn expand_synonyms(
    spec: &CategorySpec,
    ontology: &[CategorySpec],
    provider: &dyn SynonymProvider,
) -> SynonymExpansion {
    let self_declared = spec.claimed_tokens();
    let mut declared_foreign = BTreeSet::new();
    let mut provided_foreign = BTreeSet::new();
    for other in ontology {
        if other.id != spec.id {
            declared_foreign.extend(other.claimed_tokens());
            if let Ok(provided) = provider.synonyms(&other.name) {
                provided_foreign.extend(provided.iter().map(|s| normalize(s)));
            }
        }
    }

    let mut names = vec![spec.name.clone()];
    let mut seen: BTreeSet<String> = BTreeSet::new();
    seen.insert(normalize(&spec.name));
    let mut warnings = Vec::new();

    match provider.synonyms(&spec.name) {
        Ok(candidates) => {
            for cand in candidates {
                let norm = normalize(&cand);
                if norm.is_empty() || declared_foreign.contains(&norm) {
                    continue;
                }
                if !self_declared.contains(&norm) && provided_foreign.contains(&norm) {
                    continue;
                }
                if !seen.insert(norm) {
                    continue;
                }
                names.push(cand);
            }
        }
        Err(e) => {
            warnings.push(format!("synonym provider failed for '{}': {e}", spec.name));
        }
    }

    SynonymExpansion { names, warnings }
}

/// The `M` prompts of one category. `names` records which category
/// alias each prompt mentions, which the augmentation step needs for
/// fragment placement.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptSet {
    pub category_id: u32,
    pub prompts: Vec<String>,
    names: Vec<String>,
}

impl PromptSet {
    pub fn len(&self) -> usize {
        self.prompts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.prompts.is_empty()
    }
}

/// Instantiate every template with every name; when a description is
/// present, add one extra ", <description>" variant per (template,
/// name) pair, so `M = |templates| * |names| * (1 + has_description)`.
pub fn build_prompt_set(
    spec: &CategorySpec,
    templates: &[String],
    names: &[String],
) -> Result<PromptSet> {
    if templates.is_empty() || names.is_empty() {
        return Err(Error::config("templates and names must be non-empty"));
    }
    for t in templates {
        if t.matches("{}").count() != 1 {
            return Err(Error::config(format!(
                "template '{t}' must contain exactly one {{}} placeholder"
            )));
        }
    }

    let mut prompts = Vec::new();
    let mut used = Vec::new();
    let mut emit = |text: String, name: &str| -> Result<()> {
        if prompts.contains(&text) {
            return Err(Error::config(format!("duplicate prompt '{text}'")));
        }
        prompts.push(text);
        used.push(name.to_string());
        Ok(())
    };

    for t in templates {
        for name in names {
            emit(t.replace("{}", name), name)?;
        }
    }
    if let Some(desc) = &spec.annotator_description {
        for t in templates {
            for name in names {
                emit(format!("{}, {desc}", t.replace("{}", name)), name)?;
            }
        }
    }

    Ok(PromptSet {
        category_id: spec.id,
        prompts,
        names: used,
    })
}

/// The three augmentation families.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AugmentationKind {
    /// Adjective inserted before the class name.
    Object,
    /// Image-level characteristic appended after a comma.
    Photometry,
    /// Positional phrase inserted after the class name.
    Background,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AugmentationSpec {
    pub kind: AugmentationKind,
    pub fragments: Vec<String>,
}

impl AugmentationSpec {
    pub fn new(kind: AugmentationKind, fragments: Vec<String>) -> Result<Self> {
        if fragments.is_empty() {
            return Err(Error::config("augmentation fragments must be non-empty"));
        }
        Ok(Self { kind, fragments })
    }
}

/// Augmentation file: `{"object": [...], "photometry": [...], "background": [...]}`.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct AugmentationFile {
    #[serde(default)]
    pub object: Vec<String>,
    #[serde(default)]
    pub photometry: Vec<String>,
    #[serde(default)]
    pub background: Vec<String>,
}

impl AugmentationFile {
    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            Error::data(format!("cannot read augmentation file: {e}"), Some(path.into()))
        })?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn specs(&self) -> Result<Vec<AugmentationSpec>> {
        let mut specs = Vec::new();
        if !self.object.is_empty() {
            specs.push(AugmentationSpec::new(AugmentationKind::Object, self.object.clone())?);
        }
        if !self.photometry.is_empty() {
            specs.push(AugmentationSpec::new(
                AugmentationKind::Photometry,
                self.photometry.clone(),
            )?);
        }
        if !self.background.is_empty() {
            specs.push(AugmentationSpec::new(
                AugmentationKind::Background,
                self.background.clone(),
            )?);
        }
        if specs.is_empty() {
            return Err(Error::config("augmentation file defines no fragments"));
        }
        Ok(specs)
    }
}

/// Rectangular `M x A` grid of augmented prompt variants.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AugmentedPromptSet {
    pub category_id: u32,
    /// `variants[m][a]`.
    pub variants: Vec<Vec<String>>,
}

impl AugmentedPromptSet {
    pub fn m(&self) -> usize {
        self.variants.len()
    }

    pub fn a(&self) -> usize {
        self.variants.first().map_or(0, Vec::len)
    }
}

fn apply_fragment(prompt: &str, name: &str, kind: AugmentationKind, fragment: &str) -> Option<String> {
    if prompt.contains(fragment) {
        return None; // collision: keep the unmodified prompt
    }
    match kind {
        AugmentationKind::Object => prompt
            .find(name)
            .map(|pos| format!("{}{fragment} {}", &prompt[..pos], &prompt[pos..])),
        AugmentationKind::Photometry => Some(format!("{prompt}, {fragment}")),
        AugmentationKind::Background => prompt.find(name).map(|pos| {
            let end = pos + name.len();
            format!("{} {fragment}{}", &prompt[..end], &prompt[end..])
        }),
    }
}

/// Apply every fragment of every augmentation family to every prompt.
/// Fragments that collide with the prompt text (or prompts whose name
/// cannot be located) fall back to the unmodified prompt, keeping the
/// grid rectangular.
pub fn augment_prompts(ps: &PromptSet, specs: &[AugmentationSpec]) -> Result<AugmentedPromptSet> {
    if specs.is_empty() {
        return Err(Error::config("augmentation spec list must be non-empty"));
    }
    let mut variants = Vec::with_capacity(ps.prompts.len());
    for (prompt, name) in ps.prompts.iter().zip(&ps.names) {
        let mut row = Vec::new();
        for spec in specs {
            for fragment in &spec.fragments {
                row.push(
                    apply_fragment(prompt, name, spec.kind, fragment)
                        .unwrap_or_else(|| prompt.clone()),
                );
            }
        }
        variants.push(row);
    }
    Ok(AugmentedPromptSet {
        category_id: ps.category_id,
        variants,
    })
}

/// Treat plain prompts as a degenerate `M x 1` grid (augmentation
/// disabled).
pub fn identity_grid(ps: &PromptSet) -> AugmentedPromptSet {
    AugmentedPromptSet {
        category_id: ps.category_id,
        variants: ps.prompts.iter().map(|p| vec![p.clone()]).collect(),
    }
}

/// Anything that maps text to a fixed-dimension embedding.
pub trait TextEncoder {
    fn dim(&self) -> usize;
    fn encode_text(&self, prompt: &str) -> Vec<f64>;
}

/// Robust per-prompt embeddings: the mean over each prompt's `A`
/// augmented variants.
#[derive(Debug, Clone, PartialEq)]
pub struct TextEmbeddingSet {
    pub category_id: u32,
    /// `M` vectors of dimension `d`.
    pub embeddings: Vec<Vec<f64>>,
}

impl TextEmbeddingSet {
    pub fn m(&self) -> usize {
        self.embeddings.len()
    }

    pub fn dim(&self) -> usize {
        self.embeddings.first().map_or(0, Vec::len)
    }
}

pub fn robust_embeddings(
    aps: &AugmentedPromptSet,
    encoder: &dyn TextEncoder,
) -> Result<TextEmbeddingSet> {
    let d = encoder.dim();
    let mut embeddings = Vec::with_capacity(aps.variants.len());
    for row in &aps.variants {
        if row.is_empty() {
            return Err(Error::config("augmented grid has an empty row"));
        }
        let mut mean = vec![0.0; d];
        for variant in row {
            let e = encoder.encode_text(variant);
            if e.len() != d {
                return Err(Error::model(format!(
                    "encoder returned {} dims, expected {d}",
                    e.len()
                )));
            }
            if e.iter().any(|v| !v.is_finite()) {
                return Err(Error::model(format!(
                    "encoder returned a non-finite embedding for prompt '{variant}'"
                )));
            }
            for (m, v) in mean.iter_mut().zip(&e) {
                *m += v;
            }
        }
        let a = row.len() as f64;
        mean.iter_mut().for_each(|m| *m /= a);
        if mean.iter().all(|v| *v == 0.0) {
            return Err(Error::model(format!(
                "robust embedding for category {} collapsed to zero",
                aps.category_id
            )));
        }
        embeddings.push(mean);
    }
    Ok(TextEmbeddingSet {
        category_id: aps.category_id,
        embeddings,
    })
}

/// Per-category anchor: a weighted combination of the category's `M`
/// robust embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct SemanticAnchor {
    pub category_id: u32,
    pub vector: Vec<f64>,
    pub weights: Vec<f64>,
}

pub fn semantic_anchor(tes: &TextEmbeddingSet, weights: Option<&[f64]>) -> Result<SemanticAnchor> {
    let m = tes.m();
    let weights: Vec<f64> = match weights {
        Some(w) => {
            if w.len() != m {
                return Err(Error::config(format!(
                    "anchor weights have {} entries, category has M={m} prompts",
                    w.len()
                )));
            }
            let sum: f64 = w.iter().sum();
            if (sum - 1.0).abs() > 1e-6 {
                return Err(Error::config(format!("anchor weights sum to {sum}, expected 1")));
            }
            w.to_vec()
        }
        None => vec![1.0 / m as f64; m],
    };

    let d = tes.dim();
    let mut vector = vec![0.0; d];
    for (w, e) in weights.iter().zip(&tes.embeddings) {
        for (acc, v) in vector.iter_mut().zip(e) {
            *acc += w * v;
        }
    }
    Ok(SemanticAnchor {
        category_id: tes.category_id,
        vector,
        weights,
    })
}

/// Write embedding sets in the export format: one JSON header line
/// `{"d":..,"M":..,"N":..}` followed by raw little-endian f32 values,
/// category-major then prompt-major.
pub fn export_embeddings(sets: &[TextEmbeddingSet], path: &Path) -> Result<()> {
    let n = sets.len();
    let m = sets.first().map_or(0, TextEmbeddingSet::m);
    let d = sets.first().map_or(0, TextEmbeddingSet::dim);
    for s in sets {
        if s.m() != m || s.dim() != d {
            return Err(Error::config("embedding sets are not uniform in M and d"));
        }
    }
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    let header = serde_json::json!({"d": d, "M": m, "N": n});
    writeln!(file, "{header}")?;
    for set in sets {
        for emb in &set.embeddings {
            for v in emb {
                file.write_all(&(*v as f32).to_le_bytes())?;
            }
        }
    }
    Ok(())
}

/// Read back an embedding export; returns `(d, sets)`.
pub fn import_embeddings(path: &Path) -> Result<Vec<TextEmbeddingSet>> {
    let mut file = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut header = Vec::new();
    {
        use std::io::BufRead;
        file.read_until(b'\n', &mut header)?;
    }
    let header: serde_json::Value = serde_json::from_slice(&header)?;
    let d = header["d"].as_u64().unwrap_or(0) as usize;
    let m = header["M"].as_u64().unwrap_or(0) as usize;
    let n = header["N"].as_u64().unwrap_or(0) as usize;
    let mut raw = Vec::new();
    file.read_to_end(&mut raw)?;
    if raw.len() != n * m * d * 4 {
        return Err(Error::data(
            format!("embedding blob has {} bytes, expected {}", raw.len(), n * m * d * 4),
            Some(path.into()),
        ));
    }
    let mut sets = Vec::with_capacity(n);
    let mut off = 0;
    for cat in 0..n {
        let mut embeddings = Vec::with_capacity(m);
        for _ in 0..m {
            let mut e = Vec::with_capacity(d);
            for _ in 0..d {
                let bytes: [u8; 4] = raw[off..off + 4].try_into().unwrap();
                e.push(f32::from_le_bytes(bytes) as f64);
                off += 4;
            }
            embeddings.push(e);
        }
        sets.push(TextEmbeddingSet {
            category_id: cat as u32,
            embeddings,
        });
    }
    Ok(sets)
}

/// Everything the model needs for one vocabulary: per-category robust
/// embeddings and anchors, in ontology order.
#[derive(Debug, Clone)]
pub struct VocabularyBundle {
    pub categories: Vec<CategorySpec>,
    pub embeddings: Vec<TextEmbeddingSet>,
    pub anchors: Vec<SemanticAnchor>,
    pub warnings: Vec<String>,
}

impl VocabularyBundle {
    pub fn n(&self) -> usize {
        self.categories.len()
    }

    pub fn m(&self) -> usize {
        self.embeddings.first().map_or(0, TextEmbeddingSet::m)
    }
}

/// Options controlling prompt construction for a whole ontology.
#[derive(Debug, Clone)]
pub struct PromptOptions {
    pub templates: Vec<String>,
    /// Apply the augmentation families (off = identity grid).
    pub augment: bool,
    pub augmentations: Vec<AugmentationSpec>,
}

/// Build the full text side for an ontology.
///
/// `M` must be equal across categories, so the per-category name lists
/// are trimmed to the smallest expansion, and description variants are
/// generated only when every category has a description.
pub fn build_vocabulary(
    ontology: &[CategorySpec],
    provider: &dyn SynonymProvider,
    options: &PromptOptions,
    encoder: &dyn TextEncoder,
) -> Result<VocabularyBundle> {
    validate_ontology(ontology)?;
    let mut expansions = Vec::with_capacity(ontology.len());
    let mut warnings = Vec::new();
    for spec in ontology {
        let exp = expand_synonyms(spec, ontology, provider);
        warnings.extend(exp.warnings.iter().cloned());
        expansions.push(exp.names);
    }
    let common = expansions.iter().map(Vec::len).min().unwrap_or(0).max(1);
    let all_described = ontology.iter().all(|c| c.annotator_description.is_some());

    let mut embeddings = Vec::with_capacity(ontology.len());
    let mut anchors = Vec::with_capacity(ontology.len());
    for (spec, names) in ontology.iter().zip(&expansions) {
        let names = &names[..common.min(names.len())];
        let spec_for_prompts = if all_described {
            spec.clone()
        } else {
            CategorySpec {
                annotator_description: None,
                ..spec.clone()
            }
        };
        let ps = build_prompt_set(&spec_for_prompts, &options.templates, names)?;
        let grid = if options.augment {
            augment_prompts(&ps, &options.augmentations)?
        } else {
            identity_grid(&ps)
        };
        let tes = robust_embeddings(&grid, encoder)?;
        let anchor = semantic_anchor(&tes, None)?;
        embeddings.push(tes);
        anchors.push(anchor);
    }

    let m0 = embeddings[0].m();
    if embeddings.iter().any(|e| e.m() != m0) {
        return Err(Error::config("prompt counts are not uniform across categories"));
    }

    Ok(VocabularyBundle {
        categories: ontology.to_vec(),
        embeddings,
        anchors,
        warnings,
    })
}

#[cfg(test)]
mod tests;
