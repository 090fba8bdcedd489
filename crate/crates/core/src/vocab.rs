//! Category vocabularies, text embeddings and prompt-ensemble classification.

use std::path::Path;

use candle_core::{DType, Tensor};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{named_rng, normal_vec, tensor_from};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Category {
    pub id: usize,
    pub name: String,
    /// Synonyms, subcategories and plurals. The first entry is the name itself.
    #[serde(default)]
    pub variants: Vec<String>,
}

/// An ordered category list with ids `0..len`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Vocabulary {
    categories: Vec<Category>,
}

impl Vocabulary {
    /// Validates ids and names, putting each name first in its variant list.
    pub fn new(mut categories: Vec<Category>) -> Result<Self> {
        for (i, c) in categories.iter_mut().enumerate() {
            if c.id != i {
                return Err(Error::config(format!(
                    "category ids must be contiguous from 0; position {i} has id {}",
                    c.id
                )));
            }
            if c.name.trim().is_empty() {
                return Err(Error::config(format!("category {i} has an empty name")));
            }
            c.variants.retain(|v| v != &c.name);
            c.variants.insert(0, c.name.clone());
            if let Some(v) = c.variants.iter().find(|v| v.trim().is_empty()) {
                return Err(Error::config(format!(
                    "category `{}` has an empty variant {v:?}",
                    c.name
                )));
            }
        }
        Ok(Self { categories })
    }

    /// Categories with no variants beyond their names.
    pub fn from_names<S: AsRef<str>>(names: &[S]) -> Result<Self> {
        Self::new(
            names
                .iter()
                .enumerate()
                .map(|(id, n)| Category {
                    id,
                    name: n.as_ref().to_string(),
                    variants: Vec::new(),
                })
                .collect(),
        )
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let categories: Vec<Category> = serde_json::from_str(&text)?;
        Self::new(categories)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.categories)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.categories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.categories.is_empty()
    }

    pub fn categories(&self) -> &[Category] {
        &self.categories
    }

    pub fn id_of(&self, name: &str) -> Option<usize> {
        self.categories.iter().position(|c| c.name == name)
    }

    /// The same categories with variant lists reduced to the primary name.
    pub fn without_variants(&self) -> Self {
        Self {
            categories: self
                .categories
                .iter()
                .map(|c| Category {
                    variants: vec![c.name.clone()],
                    ..c.clone()
                })
                .collect(),
        }
    }

    /// Keeps the listed old ids (in order) and returns the old → new id map.
    pub fn retain(&self, keep: &[usize]) -> (Self, Vec<Option<usize>>) {
        let mut map = vec![None; self.len()];
        let mut categories = Vec::with_capacity(keep.len());
        for (new_id, &old) in keep.iter().enumerate() {
            map[old] = Some(new_id);
            categories.push(Category {
                id: new_id,
                ..self.categories[old].clone()
            });
        }
        (Self { categories }, map)
    }
}

/// Maps a text prompt to a fixed-dimension vector.
pub trait TextEncoder {
    fn dim(&self) -> usize;
    fn encode(&self, text: &str) -> Result<Vec<f64>>;
}

/// Bag-of-tokens encoder: every lower-cased token owns a seeded Gaussian
/// vector, and a prompt embeds to the normalized sum of its token vectors.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HashTextEncoder {
    pub dim: usize,
    pub seed: u64,
}

impl HashTextEncoder {
    pub fn new(dim: usize, seed: u64) -> Self {
        Self { dim, seed }
    }
}

impl TextEncoder for HashTextEncoder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn encode(&self, text: &str) -> Result<Vec<f64>> {
        let lower = text.to_lowercase();
        let tokens: Vec<&str> = lower
            .split(|c: char| !c.is_alphanumeric())
            .filter(|t| !t.is_empty())
            .collect();
        if tokens.is_empty() {
            return Err(Error::domain(format!("cannot encode empty prompt {text:?}")));
        }
        let mut acc = vec![0.0; self.dim];
        for tok in tokens {
            let mut rng = named_rng(self.seed, &format!("token:{tok}"));
            for (a, v) in acc.iter_mut().zip(normal_vec(&mut rng, self.dim)) {
                *a += v;
            }
        }
        Ok(normalize(acc))
    }
}

/// Scales a vector to unit L2 norm; the zero vector is returned unchanged.
pub fn normalize(mut v: Vec<f64>) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
    v
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Unit-norm embeddings for every variant of every category.
#[derive(Debug, Clone, PartialEq)]
pub struct TextEmbeddingSet {
    dim: usize,
    per_variant: Vec<Vec<Vec<f64>>>,
}

impl TextEmbeddingSet {
    /// Builds a set directly from per-category variant vectors (normalized here).
    pub fn from_vectors(per_variant: Vec<Vec<Vec<f64>>>) -> Result<Self> {
        let dim = per_variant
            .first()
            .and_then(|v| v.first())
            .map(|v| v.len())
            .ok_or_else(|| Error::config("text embedding set needs at least one category"))?;
        let mut out = Vec::with_capacity(per_variant.len());
        for (c, variants) in per_variant.into_iter().enumerate() {
            if variants.is_empty() {
                return Err(Error::config(format!("category {c} has no variants")));
            }
            let mut vs = Vec::with_capacity(variants.len());
            for v in variants {
                if v.len() != dim {
                    return Err(Error::shape(format!(
                        "category {c} has a {}-dim variant, expected {dim}",
                        v.len()
                    )));
                }
                vs.push(normalize(v));
            }
            out.push(vs);
        }
        Ok(Self {
            dim,
            per_variant: out,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_categories(&self) -> usize {
        self.per_variant.len()
    }

    pub fn variants(&self, category: usize) -> &[Vec<f64>] {
        &self.per_variant[category]
    }

    /// The canonical (primary-name) embedding of a category.
    pub fn primary(&self, category: usize) -> &[f64] {
        &self.per_variant[category][0]
    }

    /// `|C| × D` matrix of primary embeddings.
    pub fn matrix(&self, dtype: DType) -> Result<Tensor> {
        let data: Vec<f64> = self.per_variant.iter().flat_map(|v| v[0].clone()).collect();
        tensor_from(data, &[self.num_categories(), self.dim], dtype)
    }

    /// The same set restricted to primary names.
    pub fn primary_only(&self) -> Self {
        Self {
            dim: self.dim,
            per_variant: self.per_variant.iter().map(|v| vec![v[0].clone()]).collect(),
        }
    }

    /// Appends a copy of variant `variant` of `category` (used by invariance checks).
    pub fn with_duplicate_variant(&self, category: usize, variant: usize) -> Self {
        let mut out = self.clone();
        let v = out.per_variant[category][variant].clone();
        out.per_variant[category].push(v);
        out
    }

    /// Appends an arbitrary variant vector to a category.
    pub fn with_extra_variant(&self, category: usize, v: Vec<f64>) -> Result<Self> {
        if v.len() != self.dim {
            return Err(Error::shape("variant dimension mismatch"));
        }
        let mut out = self.clone();
        out.per_variant[category].push(normalize(v));
        Ok(out)
    }
}

/// Embeds every variant of every category with `encoder`.
pub fn embed_categories(vocab: &Vocabulary, encoder: &dyn TextEncoder) -> Result<TextEmbeddingSet> {
    if vocab.is_empty() {
        return Err(Error::config("vocabulary is empty"));
    }
    let per_variant = vocab
        .categories()
        .iter()
        .map(|c| c.variants.iter().map(|v| encoder.encode(v)).collect())
        .collect::<Result<Vec<Vec<_>>>>()?;
    TextEmbeddingSet::from_vectors(per_variant)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Classification {
    pub category: usize,
    pub probabilities: Vec<f64>,
}

/// Per-category logits: the best variant's `⟨embedding, t⟩ / tau`.
pub fn ensemble_logits(embedding: &[f64], tes: &TextEmbeddingSet, tau: f64) -> Result<Vec<f64>> {
    if !(tau > 0.0) {
        return Err(Error::domain(format!("temperature must be positive, got {tau}")));
    }
    if embedding.len() != tes.dim() {
        return Err(Error::shape(format!(
            "embedding has {} dims, text set has {}",
            embedding.len(),
            tes.dim()
        )));
    }
    Ok(tes
        .per_variant
        .iter()
        .map(|vs| {
            vs.iter()
                .map(|v| dot(embedding, v) / tau)
                .fold(f64::NEG_INFINITY, f64::max)
        })
        .collect())
}

/// Classifies an embedding against a prompt-ensembled vocabulary.
pub fn ensemble_classify(
    embedding: &[f64],
    tes: &TextEmbeddingSet,
    tau: f64,
) -> Result<Classification> {
    let logits = ensemble_logits(embedding, tes, tau)?;
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    let probabilities: Vec<f64> = exps.iter().map(|e| e / z).collect();
    let mut category = 0;
    for (c, &l) in logits.iter().enumerate() {
        if l > logits[category] {
            category = c;
        }
    }
    Ok(Classification {
        category,
        probabilities,
    })
}

/// Accuracy of ensemble and single-name classification on noisy variant queries.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OpenVocabScores {
    pub ensemble: f64,
    pub single_name: f64,
}

/// Synthetic open-vocabulary benchmark: each query is a randomly chosen
/// variant's embedding plus isotropic noise of norm about `noise`, to be
/// recognised as that variant's category.
pub fn open_vocab_benchmark(
    tes: &TextEmbeddingSet,
    num_queries: usize,
    noise: f64,
    tau: f64,
    seed: u64,
) -> Result<OpenVocabScores> {
    let single = tes.primary_only();
    let mut rng = named_rng(seed, "open-vocab-benchmark");
    let d = tes.dim();
    let (mut hit_e, mut hit_s) = (0usize, 0usize);
    for _ in 0..num_queries {
        let c = rng.random_range(0..tes.num_categories());
        let k = rng.random_range(0..tes.variants(c).len());
        let eps = normal_vec(&mut rng, d);
        let q: Vec<f64> = tes.variants(c)[k]
            .iter()
            .zip(&eps)
            .map(|(v, e)| v + noise * e / (d as f64).sqrt())
            .collect();
        let q = normalize(q);
        hit_e += (ensemble_classify(&q, tes, tau)?.category == c) as usize;
        hit_s += (ensemble_classify(&q, &single, tau)?.category == c) as usize;
    }
    let n = num_queries.max(1) as f64;
    Ok(OpenVocabScores {
        ensemble: hit_e as f64 / n,
        single_name: hit_s as f64 / n,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn name_is_first_variant() {
        let v = Vocabulary::new(vec![Category {
            id: 0,
            name: "frog".into(),
            variants: vec!["toad".into(), "frog".into()],
        }])
        .unwrap();
        assert_eq!(v.categories()[0].variants, vec!["frog", "toad"]);
    }

    #[test]
    fn non_contiguous_ids_rejected() {
        let err = Vocabulary::new(vec![Category {
            id: 1,
            name: "a".into(),
            variants: vec![],
        }])
        .unwrap_err();
        assert!(err.is_config());
    }

    #[test]
    fn encoder_is_unit_norm_and_case_insensitive() {
        let enc = HashTextEncoder::new(32, 3);
        let a = enc.encode("Tree Frog").unwrap();
        let b = enc.encode("tree  frog").unwrap();
        assert_eq!(a, b);
        assert!((dot(&a, &a) - 1.0).abs() < 1e-12);
        assert!(enc.encode("  ").is_err());
    }

    #[test]
    fn non_positive_tau_is_domain_error() {
        let tes = TextEmbeddingSet::from_vectors(vec![vec![vec![1.0, 0.0]]]).unwrap();
        assert!(matches!(
            ensemble_classify(&[1.0, 0.0], &tes, 0.0),
            Err(Error::Domain(_))
        ));
    }
}
