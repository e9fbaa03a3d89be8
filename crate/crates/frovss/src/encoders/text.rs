//! Deterministic toy text encoder.
//!
//! Each category name maps to one row of a seeded orthonormal basis;
//! synonyms sit close to their parent, and the rest of a prompt
//! contributes a bounded, string-hashed perturbation. Prompts that
//! mention no known token fall back to a whole-string hash, so the
//! encoder stays total over arbitrary vocabularies.

use ndarray::{Array1, Array2};
use rand::Rng;

use crate::error::{Error, Result};
use crate::rng::stream;
use crate::vocab::{CategorySpec, TextEncoder};

/// Norm of the perturbation contributed by non-category tokens.
pub const TEXT_NOISE_NORM: f64 = 0.3;
/// Offset of a synonym embedding from its parent category.
const SYNONYM_OFFSET: f64 = 0.12;

#[derive(Debug, Clone)]
struct TokenEntry {
    token: String,
    embedding: Array1<f64>,
}

#[derive(Debug, Clone)]
pub struct ToyTextEncoder {
    dim: usize,
    seed: u64,
    /// Known tokens sorted by descending length, ties by first
    /// registration, so the longest mention wins.
    tokens: Vec<TokenEntry>,
    /// Orthonormal basis rows; the first `num_categories` are the
    /// canonical category embeddings, the rest span the nuisance
    /// subspace used by the visual encoder.
    basis: Array2<f64>,
    num_categories: usize,
}

/// Seeded orthonormal basis via Gram-Schmidt on a random matrix.
fn orthonormal_basis(dim: usize, seed: u64) -> Array2<f64> {
    let mut rng = stream(seed, "text-basis");
    let mut basis = Array2::<f64>::zeros((dim, dim));
    for i in 0..dim {
        loop {
            let mut v: Array1<f64> = Array1::from_iter((0..dim).map(|_| rng.gen_range(-1.0..1.0)));
            for j in 0..i {
                let proj = v.dot(&basis.row(j));
                v.scaled_add(-proj, &basis.row(j).to_owned());
            }
            let norm = v.dot(&v).sqrt();
            if norm > 1e-6 {
                v.mapv_inplace(|x| x / norm);
                basis.row_mut(i).assign(&v);
                break;
            }
        }
    }
    basis
}

/// Deterministic unit vector derived from a string.
fn hashed_direction(dim: usize, seed: u64, label: &str) -> Array1<f64> {
    let mut rng = stream(seed, &format!("text-hash/{label}"));
    loop {
        let v: Array1<f64> = Array1::from_iter((0..dim).map(|_| rng.gen_range(-1.0..1.0)));
        let norm = v.dot(&v).sqrt();
        if norm > 1e-6 {
            return v.mapv(|x| x / norm);
        }
    }
}

fn normalized(mut v: Array1<f64>) -> Array1<f64> {
    let norm = v.dot(&v).sqrt().max(1e-12);
    v.mapv_inplace(|x| x / norm);
    v
}

/// True when `hay[pos..pos+len]` sits on word boundaries.
fn on_word_boundary(hay: &str, pos: usize, len: usize) -> bool {
    let before_ok = pos == 0
        || !hay[..pos]
            .chars()
            .next_back()
            .is_some_and(|c| c.is_alphanumeric());
    let after_ok = pos + len == hay.len()
        || !hay[pos + len..]
            .chars()
            .next()
            .is_some_and(|c| c.is_alphanumeric());
    before_ok && after_ok
}

impl ToyTextEncoder {
    /// The encoder "pretrains" on an ontology: every category name and
    /// declared synonym becomes a known token.
    pub fn new(ontology: &[CategorySpec], dim: usize, seed: u64) -> Result<Self> {
        if dim < ontology.len() {
            return Err(Error::config(format!(
                "embedding dim {dim} cannot hold {} orthonormal categories",
                ontology.len()
            )));
        }
        let basis = orthonormal_basis(dim, seed);
        let mut tokens = Vec::new();
        for (row, spec) in ontology.iter().enumerate() {
            let canonical = basis.row(row).to_owned();
            tokens.push(TokenEntry {
                token: spec.name.to_lowercase(),
                embedding: canonical.clone(),
            });
            for syn in &spec.synonyms {
                let offset = hashed_direction(dim, seed, &format!("synonym/{}", syn.to_lowercase()));
                let emb = normalized(&canonical + &(offset * SYNONYM_OFFSET));
                tokens.push(TokenEntry {
                    token: syn.to_lowercase(),
                    embedding: emb,
                });
            }
        }
        tokens.sort_by(|a, b| b.token.len().cmp(&a.token.len()));
        Ok(ToyTextEncoder {
            dim,
            seed,
            tokens,
            basis,
            num_categories: ontology.len(),
        })
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Canonical embedding of the `row`-th ontology entry.
    pub fn category_embedding(&self, row: usize) -> Array1<f64> {
        self.basis.row(row).to_owned()
    }

    /// Basis rows beyond the categories; spans directions orthogonal
    /// to every category embedding.
    pub fn nuisance_basis(&self) -> Array2<f64> {
        self.basis
            .slice(ndarray::s![self.num_categories.., ..])
            .to_owned()
    }

    pub fn num_categories(&self) -> usize {
        self.num_categories
    }

    /// The text-side parameter block (the token embedding table);
    /// registered in the parameter store so freezing invariants can
    /// hash it.
    pub fn token_table(&self) -> Array2<f64> {
        let mut table = Array2::zeros((self.tokens.len(), self.dim));
        for (i, t) in self.tokens.iter().enumerate() {
            table.row_mut(i).assign(&t.embedding);
        }
        table
    }

    /// Longest known token mentioned in the prompt, with its span.
    fn find_token(&self, lowered: &str) -> Option<(usize, usize, &TokenEntry)> {
        for entry in &self.tokens {
            let mut search_from = 0;
            while let Some(rel) = lowered[search_from..].find(&entry.token) {
                let pos = search_from + rel;
                if on_word_boundary(lowered, pos, entry.token.len()) {
                    return Some((pos, entry.token.len(), entry));
                }
                search_from = pos + 1;
            }
        }
        None
    }
}

impl TextEncoder for ToyTextEncoder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn encode_text(&self, prompt: &str) -> Vec<f64> {
        let lowered = prompt.to_lowercase();
        match self.find_token(&lowered) {
            Some((pos, len, entry)) => {
                let rest: String = format!("{}{}", &lowered[..pos], &lowered[pos + len..])
                    .trim()
                    .to_string();
                let mut v = entry.embedding.clone();
                if !rest.is_empty() {
                    let noise = hashed_direction(self.dim, self.seed, &rest);
                    v = &v + &(noise * TEXT_NOISE_NORM);
                }
                normalized(v).to_vec()
            }
            None => hashed_direction(self.dim, self.seed, &format!("unknown/{lowered}")).to_vec(),
        }
    }
}
