//! Bag-of-words featurizer for the built-in classifier.
//!
//! Tokens are lowercased maximal runs of Unicode alphanumerics, so
//! apostrophes split words (`can't` becomes `can`, `t`). Documents are
//! truncated to `max_tokens` tokens before counting.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Weighting {
    Counts,
    TfIdf,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct FeaturizerConfig {
    pub max_tokens: usize,
    pub min_doc_freq: usize,
    pub weighting: Weighting,
}

impl Default for FeaturizerConfig {
    fn default() -> Self {
        Self {
            max_tokens: 250,
            min_doc_freq: 2,
            weighting: Weighting::TfIdf,
        }
    }
}

impl FeaturizerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_tokens == 0 {
            return Err(Error::Config("max_tokens must be at least 1".into()));
        }
        if self.min_doc_freq == 0 {
            return Err(Error::Config("min_doc_freq must be at least 1".into()));
        }
        Ok(())
    }
}

pub fn tokenize(text: &str, max_tokens: usize) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .take(max_tokens)
        .map(str::to_lowercase)
        .collect()
}

/// Sparse vector with strictly increasing indices below `dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector {
    dim: usize,
    entries: Vec<(usize, f64)>,
}

impl FeatureVector {
    pub fn zeros(dim: usize) -> Self {
        Self {
            dim,
            entries: Vec::new(),
        }
    }

    /// Builds a vector from `(index, value)` pairs, sorting by index. Zero
    /// entries are dropped.
    pub fn from_pairs(dim: usize, mut entries: Vec<(usize, f64)>) -> Result<Self> {
        entries.sort_by_key(|e| e.0);
        entries.retain(|e| e.1 != 0.0);
        for w in entries.windows(2) {
            if w[0].0 == w[1].0 {
                return Err(Error::Invalid(format!("duplicate feature index {}", w[0].0)));
            }
        }
        if let Some(&(i, _)) = entries.last() {
            if i >= dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    got: i + 1,
                });
            }
        }
        if entries.iter().any(|e| !e.1.is_finite()) {
            return Err(Error::Invalid("non-finite feature value".into()));
        }
        Ok(Self { dim, entries })
    }

    pub fn dense(values: &[f64]) -> Result<Self> {
        Self::from_pairs(values.len(), values.iter().copied().enumerate().collect())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn entries(&self) -> &[(usize, f64)] {
        &self.entries
    }

    pub fn norm(&self) -> f64 {
        self.entries.iter().map(|e| e.1 * e.1).sum::<f64>().sqrt()
    }

    pub fn to_dense(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        for &(i, v) in &self.entries {
            out[i] = v;
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    config: FeaturizerConfig,
    n_docs: usize,
    tokens: Vec<String>,
    doc_freq: Vec<usize>,
    index: HashMap<String, usize>,
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum VocabRecord {
    Header {
        config: FeaturizerConfig,
        n_docs: usize,
    },
    Entry {
        token: String,
        index: usize,
        doc_freq: usize,
    },
}

impl Vocabulary {
    pub fn fit<'a>(texts: impl IntoIterator<Item = &'a str>, config: &FeaturizerConfig) -> Result<Self> {
        config.validate()?;
        let mut df: BTreeMap<String, usize> = BTreeMap::new();
        let mut n_docs = 0;
        for text in texts {
            n_docs += 1;
            let unique: HashSet<String> = tokenize(text, config.max_tokens).into_iter().collect();
            for tok in unique {
                *df.entry(tok).or_default() += 1;
            }
        }
        if n_docs == 0 {
            return Err(Error::Invalid("cannot fit a vocabulary on an empty corpus".into()));
        }
        // BTreeMap iteration is lexicographic, which fixes index assignment.
        let (tokens, doc_freq): (Vec<_>, Vec<_>) = df.into_iter().filter(|(_, n)| *n >= config.min_doc_freq).unzip();
        if tokens.is_empty() {
            return Err(Error::EmptyVocabulary {
                min_doc_freq: config.min_doc_freq,
            });
        }
        Ok(Self::from_parts(config.clone(), n_docs, tokens, doc_freq))
    }

    fn from_parts(config: FeaturizerConfig, n_docs: usize, tokens: Vec<String>, doc_freq: Vec<usize>) -> Self {
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Self {
            config,
            n_docs,
            tokens,
            doc_freq,
            index,
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn config(&self) -> &FeaturizerConfig {
        &self.config
    }

    pub fn index_of(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn doc_freq(&self, index: usize) -> usize {
        self.doc_freq[index]
    }

    pub fn idf(&self, index: usize) -> f64 {
        ((1.0 + self.n_docs as f64) / (1.0 + self.doc_freq[index] as f64)).ln() + 1.0
    }

    pub fn transform(&self, text: &str) -> FeatureVector {
        let mut counts: BTreeMap<usize, f64> = BTreeMap::new();
        for tok in tokenize(text, self.config.max_tokens) {
            if let Some(i) = self.index_of(&tok) {
                *counts.entry(i).or_default() += 1.0;
            }
        }
        let mut entries: Vec<(usize, f64)> = counts.into_iter().collect();
        if self.config.weighting == Weighting::TfIdf {
            for e in &mut entries {
                e.1 *= self.idf(e.0);
            }
            let norm = entries.iter().map(|e| e.1 * e.1).sum::<f64>().sqrt();
            if norm > 0.0 {
                for e in &mut entries {
                    e.1 /= norm;
                }
            }
        }
        FeatureVector {
            dim: self.len(),
            entries,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let header = VocabRecord::Header {
            config: self.config.clone(),
            n_docs: self.n_docs,
        };
        let entries = self
            .tokens
            .iter()
            .zip(&self.doc_freq)
            .enumerate()
            .map(|(index, (t, &df))| VocabRecord::Entry {
                token: t.clone(),
                index,
                doc_freq: df,
            });
        io::write_jsonl(path, std::iter::once(header).chain(entries))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let records: Vec<(usize, VocabRecord)> = io::read_jsonl(path)?;
        let mut iter = records.into_iter();
        let malformed = |line, message: &str| Error::MalformedRow {
            path: path.to_path_buf(),
            line,
            message: message.to_string(),
        };
        let (config, n_docs) = match iter.next() {
            Some((_, VocabRecord::Header { config, n_docs })) => (config, n_docs),
            Some((line, _)) => return Err(malformed(line, "expected vocabulary header")),
            None => {
                return Err(Error::NoRecords {
                    path: path.to_path_buf(),
                })
            }
        };
        let mut tokens = Vec::new();
        let mut doc_freq = Vec::new();
        for (line, rec) in iter {
            match rec {
                VocabRecord::Entry {
                    token,
                    index,
                    doc_freq: df,
                } if index == tokens.len() => {
                    tokens.push(token);
                    doc_freq.push(df);
                }
                _ => return Err(malformed(line, "vocabulary entries must be dense and in index order")),
            }
        }
        Ok(Self::from_parts(config, n_docs, tokens, doc_freq))
    }
}
