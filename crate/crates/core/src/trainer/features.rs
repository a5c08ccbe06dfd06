use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::TrainError;
use crate::hashing::fnv1a64;

/// Hashed word n-gram features.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureSpec {
    pub ngram_lo: usize,
    pub ngram_hi: usize,
    /// Power of two in `[2^10, 2^22]`.
    pub hash_dim: usize,
    pub tf_idf: bool,
    pub lowercase: bool,
}

impl Default for FeatureSpec {
    fn default() -> Self {
        Self { ngram_lo: 1, ngram_hi: 1, hash_dim: 1 << 18, tf_idf: true, lowercase: true }
    }
}

impl FeatureSpec {
    pub fn validate(&self) -> Result<(), TrainError> {
        if !(1 <= self.ngram_lo && self.ngram_lo <= self.ngram_hi && self.ngram_hi <= 3) {
            return Err(TrainError::InvalidSpec(format!(
                "n-gram range ({}, {}) must satisfy 1 <= lo <= hi <= 3",
                self.ngram_lo, self.ngram_hi
            )));
        }
        if !self.hash_dim.is_power_of_two() || !((1 << 10)..=(1 << 22)).contains(&self.hash_dim) {
            return Err(TrainError::InvalidSpec(format!(
                "hash_dim {} must be a power of two in [2^10, 2^22]",
                self.hash_dim
            )));
        }
        Ok(())
    }
}

/// Sparse vector with strictly increasing indices.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SparseVec {
    pub indices: Vec<u32>,
    pub values: Vec<f64>,
}

impl SparseVec {
    pub fn nnz(&self) -> usize {
        self.indices.len()
    }

    pub fn is_zero(&self) -> bool {
        self.values.iter().all(|&v| v == 0.0)
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.indices.iter().map(|&i| i as usize).zip(self.values.iter().copied())
    }

    pub fn dot(&self, dense: &[f64]) -> f64 {
        self.iter().map(|(i, v)| dense[i] * v).sum()
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    fn from_counts(counts: BTreeMap<u32, f64>) -> Self {
        let (indices, values) = counts.into_iter().unzip();
        Self { indices, values }
    }
}

/// Word tokens: maximal runs of alphanumeric characters.
pub fn tokenize(text: &str, lowercase: bool) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(|t| if lowercase { t.to_lowercase() } else { t.to_string() })
        .collect()
}

/// The n-grams of `text` for every n in the spec's range, joined by a space.
pub fn ngrams(text: &str, spec: &FeatureSpec) -> Vec<String> {
    let tokens = tokenize(text, spec.lowercase);
    let mut out = Vec::new();
    for n in spec.ngram_lo..=spec.ngram_hi {
        if tokens.len() < n {
            break;
        }
        out.extend(tokens.windows(n).map(|w| w.join(" ")));
    }
    out
}

fn slot(gram: &str, dim: usize) -> u32 {
    (fnv1a64(gram.as_bytes()) & (dim as u64 - 1)) as u32
}

/// Raw hashed n-gram counts.
pub fn hashed_counts(text: &str, spec: &FeatureSpec) -> SparseVec {
    let mut counts: BTreeMap<u32, f64> = BTreeMap::new();
    for g in ngrams(text, spec) {
        *counts.entry(slot(&g, spec.hash_dim)).or_default() += 1.0;
    }
    SparseVec::from_counts(counts)
}

/// Smoothed inverse document frequencies, `ln((1 + N) / (1 + df)) + 1`,
/// fitted on the training split only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdfTable {
    pub n_docs: u64,
    /// Document frequency per hashed slot; absent slots have df = 0.
    pub df: BTreeMap<u32, u64>,
}

impl IdfTable {
    pub fn fit<'a>(texts: impl IntoIterator<Item = &'a str>, spec: &FeatureSpec) -> Self {
        let mut df: BTreeMap<u32, u64> = BTreeMap::new();
        let mut n_docs = 0;
        for t in texts {
            n_docs += 1;
            for &i in &hashed_counts(t, spec).indices {
                *df.entry(i).or_default() += 1;
            }
        }
        Self { n_docs, df }
    }

    pub fn idf(&self, slot: u32) -> f64 {
        let df = self.df.get(&slot).copied().unwrap_or(0);
        ((1.0 + self.n_docs as f64) / (1.0 + df as f64)).ln() + 1.0
    }
}

/// Feature extractor: spec plus (optionally) its fitted idf table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Featurizer {
    pub spec: FeatureSpec,
    pub idf: Option<IdfTable>,
}

impl Featurizer {
    pub fn fit<'a>(spec: FeatureSpec, texts: impl IntoIterator<Item = &'a str>) -> Result<Self, TrainError> {
        spec.validate()?;
        let idf = spec.tf_idf.then(|| IdfTable::fit(texts, &spec));
        Ok(Self { spec, idf })
    }

    /// Hashed counts, idf-weighted when fitted, then L2-normalized.
    pub fn transform(&self, text: &str) -> SparseVec {
        featurize(text, &self.spec, self.idf.as_ref())
    }
}

pub fn featurize(text: &str, spec: &FeatureSpec, idf: Option<&IdfTable>) -> SparseVec {
    let mut v = hashed_counts(text, spec);
    if let Some(idf) = idf {
        for (i, val) in v.indices.iter().zip(v.values.iter_mut()) {
            *val *= idf.idf(*i);
        }
    }
    let norm = v.norm();
    if norm > 0.0 {
        v.values.iter_mut().for_each(|x| *x /= norm);
    }
    v
}
