//! Self-training with Stratified Confidence Sampling (SCS).
//!
//! Each iteration trains the backend on the labeled set plus every
//! pseudo-label acquired so far, predicts the still-unlabeled posts, and
//! moves the most confident fraction `p` of *each predicted class* into the
//! pseudo-labeled pool. Stratifying by predicted class keeps minority classes
//! from being crowded out the way a global confidence threshold would.
//!
//! The loop stops when the unlabeled pool drops below `stop_threshold`, when
//! an iteration acquires nothing, when the pool is empty, or after
//! `max_iterations`. Whatever remains is labeled by a final model trained on
//! labeled and pseudo-labeled data together.

use std::cmp::Ordering;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::classifier::{Backend, ProbMatrix};
use crate::corpus::{ClassIndex, Dataset, Item, Origin};
use crate::error::{Error, Result};
use crate::io;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SelfTrainConfig {
    /// Fraction of each predicted class acquired per iteration, in (0, 1].
    pub acquisition_rate: f64,
    pub stop_threshold: usize,
    pub max_iterations: usize,
}

impl Default for SelfTrainConfig {
    fn default() -> Self {
        Self {
            acquisition_rate: 0.25,
            stop_threshold: 200,
            max_iterations: 50,
        }
    }
}

impl SelfTrainConfig {
    pub fn validate(&self) -> Result<()> {
        check_rate(self.acquisition_rate)
    }
}

fn check_rate(p: f64) -> Result<()> {
    if !(p > 0.0 && p <= 1.0) {
        return Err(Error::Config(format!("acquisition rate must be in (0, 1], got {p}")));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Acquired {
    pub id: String,
    pub label: ClassIndex,
    pub confidence: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct AcquisitionResult {
    /// Grouped by class, most confident first within a class.
    pub selected: Vec<Acquired>,
    pub per_class_counts: Vec<usize>,
}

impl AcquisitionResult {
    pub fn len(&self) -> usize {
        self.selected.len()
    }

    pub fn is_empty(&self) -> bool {
        self.selected.is_empty()
    }
}

/// `floor(p * m)`, nudged so that products like `0.29 * 100` which land a
/// hair below an integer still round to it.
fn quota(p: f64, m: usize) -> usize {
    ((p * m as f64) + 1e-9).floor() as usize
}

/// Rows of `probs` grouped by predicted class, each group sorted by
/// confidence descending and then id ascending.
fn ranked_by_class<'a>(probs: &ProbMatrix, ids: &[&'a str]) -> Vec<Vec<(f64, &'a str)>> {
    let mut groups: Vec<Vec<(f64, &str)>> = vec![Vec::new(); probs.num_classes()];
    for (i, &id) in ids.iter().enumerate() {
        groups[probs.argmax(i)].push((probs.confidence(i), id));
    }
    for group in &mut groups {
        group.sort_by(|a, b| {
            b.0.partial_cmp(&a.0)
                .unwrap_or(Ordering::Equal)
                .then_with(|| a.1.cmp(b.1))
        });
    }
    groups
}

fn check_ids(probs: &ProbMatrix, ids: &[&str]) -> Result<()> {
    if probs.is_empty() {
        return Err(Error::Invalid("empty probability matrix".into()));
    }
    if probs.len() != ids.len() {
        return Err(Error::Invalid(format!(
            "{} probability rows for {} ids",
            probs.len(),
            ids.len()
        )));
    }
    Ok(())
}

/// Stratified Confidence Sampling: within each predicted class `r` with
/// `m_r` members, select the `floor(p * m_r)` most confident samples.
pub fn scs_select(probs: &ProbMatrix, ids: &[&str], p: f64) -> Result<AcquisitionResult> {
    check_ids(probs, ids)?;
    check_rate(p)?;
    let mut result = AcquisitionResult {
        selected: Vec::new(),
        per_class_counts: vec![0; probs.num_classes()],
    };
    for (class, group) in ranked_by_class(probs, ids).into_iter().enumerate() {
        let n = quota(p, group.len());
        result.per_class_counts[class] = n;
        result
            .selected
            .extend(group.into_iter().take(n).map(|(confidence, id)| Acquired {
                id: id.to_string(),
                label: class,
                confidence,
            }));
    }
    Ok(result)
}

/// Global-threshold acquisition: every sample whose top probability is
/// strictly greater than `threshold`. Kept as a comparison baseline; it
/// favours whichever class the model is most confident about.
pub fn threshold_select(probs: &ProbMatrix, ids: &[&str], threshold: f64) -> Result<AcquisitionResult> {
    check_ids(probs, ids)?;
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::Config(format!(
            "confidence threshold must be in (0, 1), got {threshold}"
        )));
    }
    let mut result = AcquisitionResult {
        selected: Vec::new(),
        per_class_counts: vec![0; probs.num_classes()],
    };
    for (class, group) in ranked_by_class(probs, ids).into_iter().enumerate() {
        for (confidence, id) in group.into_iter().filter(|g| g.0 > threshold) {
            result.per_class_counts[class] += 1;
            result.selected.push(Acquired {
                id: id.to_string(),
                label: class,
                confidence,
            });
        }
    }
    Ok(result)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iter: usize,
    /// Unlabeled posts left after this iteration's acquisitions.
    pub remaining: usize,
    pub acquired: Vec<usize>,
    pub val_accuracy: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StopReason {
    BelowThreshold,
    EmptySelection,
    Exhausted,
    MaxIterations,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelfTrainTrace {
    /// One record per iteration that acquired at least one post.
    pub iterations: Vec<IterationRecord>,
    pub stop_reason: StopReason,
    /// Posts labeled by the final model rather than by SCS.
    pub remainder: usize,
}

impl SelfTrainTrace {
    pub fn save_jsonl(&self, path: &Path) -> Result<()> {
        io::write_jsonl(path, &self.iterations)
    }
}

#[derive(Debug, Clone)]
pub struct SelfTrainOutput {
    /// Every initially unlabeled post, in input order, with origin `pseudo`.
    pub pseudo_labeled: Dataset,
    /// Confidence of each pseudo-label when it was assigned, parallel to
    /// `pseudo_labeled`.
    pub confidences: Vec<f64>,
    pub trace: SelfTrainTrace,
}

/// Labels every post of `remaining` with the argmax of `backend`'s
/// prediction. Returns labels and their confidences.
pub fn label_remainder(backend: &mut dyn Backend, remaining: &Dataset) -> Result<(Vec<ClassIndex>, Vec<f64>)> {
    if remaining.is_empty() {
        return Ok((Vec::new(), Vec::new()));
    }
    let probs = backend.predict_proba(remaining)?;
    if probs.len() != remaining.len() {
        return Err(Error::Invalid(format!(
            "backend returned {} rows for {} posts",
            probs.len(),
            remaining.len()
        )));
    }
    Ok((0..probs.len()).map(|i| (probs.argmax(i), probs.confidence(i))).unzip())
}

fn training_pool(labeled: &Dataset, unlabeled: &Dataset, acquired: &[Option<(ClassIndex, f64)>]) -> Result<Dataset> {
    let mut items = labeled.items().to_vec();
    for (item, acq) in unlabeled.items().iter().zip(acquired) {
        if let Some((class, _)) = acq {
            items.push(Item::labeled(item.post.clone(), *class, Origin::Pseudo));
        }
    }
    Dataset::new(labeled.shared_schema(), items)
}

pub fn self_train(
    labeled: &Dataset,
    unlabeled: &Dataset,
    validation: &Dataset,
    backend: &mut dyn Backend,
    config: &SelfTrainConfig,
) -> Result<SelfTrainOutput> {
    config.validate()?;
    labeled.labels()?;
    validation.labels()?;
    if labeled.schema() != unlabeled.schema() || labeled.schema() != validation.schema() {
        return Err(Error::Schema("labeled, unlabeled and validation schemas differ".into()));
    }
    if let Some(item) = validation.items().iter().find(|i| unlabeled.contains(i.id())) {
        return Err(Error::Invalid(format!(
            "validation id {:?} also appears in the unlabeled set",
            item.id()
        )));
    }
    if let Some(item) = labeled.items().iter().find(|i| unlabeled.contains(i.id())) {
        return Err(Error::Invalid(format!(
            "labeled id {:?} also appears in the unlabeled set",
            item.id()
        )));
    }
    let unlabeled = unlabeled.without_labels();

    let mut acquired: Vec<Option<(ClassIndex, f64)>> = vec![None; unlabeled.len()];
    let mut remaining: Vec<usize> = (0..unlabeled.len()).collect();
    let mut iterations = Vec::new();
    // Whether the backend's current fit already covers every acquisition.
    let mut model_current = false;
    let stop_reason = loop {
        if remaining.is_empty() {
            break StopReason::Exhausted;
        }
        if remaining.len() < config.stop_threshold {
            break StopReason::BelowThreshold;
        }
        if iterations.len() == config.max_iterations {
            break StopReason::MaxIterations;
        }
        let iter = iterations.len() + 1;
        let tag = |e: Error| Error::Iteration {
            iteration: iter,
            source: Box::new(e),
        };
        let pool = training_pool(labeled, &unlabeled, &acquired).map_err(tag)?;
        let summary = backend.fit(&pool, validation).map_err(tag)?;
        let pending = unlabeled.subset(&remaining);
        let probs = backend.predict_proba(&pending).map_err(tag)?;
        let ids = pending.ids();
        let selection = scs_select(&probs, &ids, config.acquisition_rate).map_err(tag)?;
        if selection.is_empty() {
            model_current = true;
            break StopReason::EmptySelection;
        }
        for acq in &selection.selected {
            let pos = unlabeled.position(&acq.id).expect("selected id comes from the pool");
            debug_assert!(acquired[pos].is_none());
            acquired[pos] = Some((acq.label, acq.confidence));
        }
        remaining.retain(|&pos| acquired[pos].is_none());
        iterations.push(IterationRecord {
            iter,
            remaining: remaining.len(),
            acquired: selection.per_class_counts,
            val_accuracy: summary.val_accuracy,
        });
    };

    let remainder = remaining.len();
    if !remaining.is_empty() {
        let iter = iterations.len() + 1;
        let tag = |e: Error| Error::Iteration {
            iteration: iter,
            source: Box::new(e),
        };
        if !model_current {
            let pool = training_pool(labeled, &unlabeled, &acquired).map_err(tag)?;
            backend.fit(&pool, validation).map_err(tag)?;
        }
        let rest = unlabeled.subset(&remaining);
        let (labels, confidences) = label_remainder(backend, &rest).map_err(tag)?;
        for ((&pos, label), conf) in remaining.iter().zip(labels).zip(confidences) {
            acquired[pos] = Some((label, conf));
        }
    }

    let mut items = Vec::with_capacity(unlabeled.len());
    let mut confidences = Vec::with_capacity(unlabeled.len());
    for (item, acq) in unlabeled.items().iter().zip(&acquired) {
        let (class, conf) = acq.expect("every post is labeled by SCS or the remainder model");
        items.push(Item::labeled(item.post.clone(), class, Origin::Pseudo));
        confidences.push(conf);
    }
    Ok(SelfTrainOutput {
        pseudo_labeled: Dataset::new(unlabeled.shared_schema(), items)?,
        confidences,
        trace: SelfTrainTrace {
            iterations,
            stop_reason,
            remainder,
        },
    })
}
