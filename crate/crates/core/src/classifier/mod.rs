//! Probabilistic classifiers behind a common [`Backend`] interface.
//!
//! The built-in backend is a softmax regression over bag-of-words (or
//! supplied dense) features, trained with class-weighted cross-entropy and
//! Adam. External backends run as child processes speaking newline-delimited
//! JSON; see [`external`].
//!
//! Everywhere a class is picked from a probability row, ties go to the lowest
//! class index.

mod builtin;
pub mod external;
mod softmax;

use serde::{Deserialize, Serialize};

use crate::corpus::{ClassIndex, Dataset};
use crate::error::{Error, Result};
use crate::featurizer::FeaturizerConfig;

pub use builtin::BuiltinBackend;
pub use external::ExternalBackend;
pub use softmax::{loss_and_grad, train, Examples, TrainedModel};

/// Index of the largest entry; the lowest index wins ties.
pub fn argmax(row: &[f64]) -> ClassIndex {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Row-stochastic matrix of predicted class probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbMatrix {
    k: usize,
    data: Vec<f64>,
}

impl ProbMatrix {
    pub const ROW_SUM_TOLERANCE: f64 = 1e-9;

    /// Validates that every row has `k` entries in [0, 1] summing to 1
    /// within `tolerance`.
    pub fn from_rows(k: usize, rows: Vec<Vec<f64>>, tolerance: f64) -> Result<Self> {
        let mut data = Vec::with_capacity(rows.len() * k);
        for (i, row) in rows.into_iter().enumerate() {
            check_row(i, &row, k, tolerance)?;
            data.extend(row);
        }
        Ok(Self { k, data })
    }

    /// Rescales rows of non-negative scores to sum to one. Returns the
    /// matrix and the indices of rows whose sum was off by more than
    /// `tolerance` before rescaling; rows with a zero or non-finite sum are
    /// rejected.
    pub fn renormalized(k: usize, rows: Vec<Vec<f64>>, tolerance: f64) -> Result<(Self, Vec<usize>)> {
        let mut adjusted = Vec::new();
        let mut data = Vec::with_capacity(rows.len() * k);
        for (i, row) in rows.into_iter().enumerate() {
            if row.len() != k {
                return Err(Error::Invalid(format!(
                    "probability row {i} has {} entries, expected {k}",
                    row.len()
                )));
            }
            if row.iter().any(|p| !p.is_finite() || *p < 0.0) {
                return Err(Error::Invalid(format!(
                    "probability row {i} has negative or non-finite entries"
                )));
            }
            let sum: f64 = row.iter().sum();
            if !(sum > 0.0 && sum.is_finite()) {
                return Err(Error::Invalid(format!("probability row {i} sums to {sum}")));
            }
            if (sum - 1.0).abs() > tolerance {
                adjusted.push(i);
            }
            data.extend(row.iter().map(|p| p / sum));
        }
        Ok((Self { k, data }, adjusted))
    }

    pub(crate) fn from_flat(k: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len() % k, 0);
        Self { k, data }
    }

    pub fn num_classes(&self) -> usize {
        self.k
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.k
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.k..(i + 1) * self.k]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks(self.k)
    }

    pub fn argmax(&self, i: usize) -> ClassIndex {
        argmax(self.row(i))
    }

    /// Largest probability in row `i`.
    pub fn confidence(&self, i: usize) -> f64 {
        self.row(i)[self.argmax(i)]
    }

    pub fn predictions(&self) -> Vec<ClassIndex> {
        self.rows().map(argmax).collect()
    }
}

fn check_row(i: usize, row: &[f64], k: usize, tolerance: f64) -> Result<()> {
    if row.len() != k {
        return Err(Error::Invalid(format!(
            "probability row {i} has {} entries, expected {k}",
            row.len()
        )));
    }
    if row.iter().any(|p| !p.is_finite() || *p < 0.0 || *p > 1.0) {
        return Err(Error::Invalid(format!(
            "probability row {i} has entries outside [0, 1]"
        )));
    }
    let sum: f64 = row.iter().sum();
    if (sum - 1.0).abs() > tolerance {
        return Err(Error::Invalid(format!("probability row {i} sums to {sum}")));
    }
    Ok(())
}

/// Loss weights `N / (K * n_c)`: the balanced weighting, unit for a uniform
/// class distribution.
pub fn inverse_class_frequency(counts: &[usize]) -> Result<Vec<f64>> {
    if let Some(c) = counts.iter().position(|&n| n == 0) {
        return Err(Error::Invalid(format!("class {c} has no samples")));
    }
    let total: usize = counts.iter().sum();
    let k = counts.len() as f64;
    Ok(counts.iter().map(|&n| total as f64 / (k * n as f64)).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum ClassWeighting {
    #[default]
    InverseFrequency,
    Uniform,
    Explicit(Vec<f64>),
}

impl ClassWeighting {
    pub fn resolve(&self, counts: &[usize]) -> Result<Vec<f64>> {
        let weights = match self {
            ClassWeighting::InverseFrequency => inverse_class_frequency(counts)?,
            ClassWeighting::Uniform => vec![1.0; counts.len()],
            ClassWeighting::Explicit(w) => {
                if w.len() != counts.len() {
                    return Err(Error::Config(format!(
                        "{} class weights given for {} classes",
                        w.len(),
                        counts.len()
                    )));
                }
                w.clone()
            }
        };
        if weights.iter().any(|w| !w.is_finite() || *w <= 0.0) {
            return Err(Error::Config("class weights must be finite and positive".into()));
        }
        Ok(weights)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClassifierConfig {
    pub class_weights: ClassWeighting,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self {
            class_weights: ClassWeighting::InverseFrequency,
            learning_rate: 0.05,
            epochs: 30,
            batch_size: 32,
            seed: 0,
        }
    }
}

impl ClassifierConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(Error::Config("learning_rate must be finite and non-negative".into()));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct FitSummary {
    pub val_accuracy: Option<f64>,
}

/// A trainable probabilistic classifier.
pub trait Backend: Send {
    /// Human-readable identity used in error messages.
    fn describe(&self) -> String;

    /// Trains from scratch on `train`; `validation` (possibly empty) selects
    /// the checkpoint.
    fn fit(&mut self, train: &Dataset, validation: &Dataset) -> Result<FitSummary>;

    /// One probability row per item, in item order.
    fn predict_proba(&mut self, items: &Dataset) -> Result<ProbMatrix>;
}

/// Makes independent backends, one per run or fold.
pub trait BackendFactory: Sync {
    fn create(&self, seed: u64) -> Result<Box<dyn Backend>>;
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum BackendSpec {
    #[default]
    Builtin,
    External {
        command: Vec<String>,
        #[serde(default = "default_timeout_secs")]
        timeout_secs: u64,
    },
}

fn default_timeout_secs() -> u64 {
    600
}

/// Everything needed to build a backend: which kind, and its configuration.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct BackendConfig {
    pub backend: BackendSpec,
    pub classifier: ClassifierConfig,
    pub featurizer: FeaturizerConfig,
}

impl BackendConfig {
    pub fn validate(&self) -> Result<()> {
        self.classifier.validate()?;
        self.featurizer.validate()?;
        if let BackendSpec::External { command, .. } = &self.backend {
            if command.is_empty() || command[0].is_empty() {
                return Err(Error::Config("external backend command is empty".into()));
            }
        }
        Ok(())
    }
}

impl BackendFactory for BackendConfig {
    fn create(&self, seed: u64) -> Result<Box<dyn Backend>> {
        self.validate()?;
        let classifier = ClassifierConfig {
            seed,
            ..self.classifier.clone()
        };
        Ok(match &self.backend {
            BackendSpec::Builtin => Box::new(BuiltinBackend::new(classifier, self.featurizer.clone())),
            BackendSpec::External { command, timeout_secs } => Box::new(ExternalBackend::spawn(
                command,
                std::time::Duration::from_secs(*timeout_secs),
                classifier,
            )?),
        })
    }
}
