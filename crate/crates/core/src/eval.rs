//! Multi-class metrics and the cross-validation harness.
//!
//! Conventions: precision, recall and F1 are 0 whenever their denominator
//! vanishes; macro-F1 averages over every schema class, absent ones
//! included; fold standard deviations are population deviations.

use serde::{Deserialize, Serialize};

use crate::classifier::BackendFactory;
use crate::corpus::{stratified_kfold, ClassIndex, Dataset};
use crate::ensemble::run_indexed;
use crate::error::{Error, Result};

pub use crate::selftrain::threshold_select;

/// Rows are true classes, columns predicted classes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    k: usize,
    counts: Vec<usize>,
}

impl ConfusionMatrix {
    pub fn new(y_true: &[ClassIndex], y_pred: &[ClassIndex], num_classes: usize) -> Result<Self> {
        if y_true.len() != y_pred.len() {
            return Err(Error::Invalid(format!(
                "{} true labels but {} predictions",
                y_true.len(),
                y_pred.len()
            )));
        }
        let mut counts = vec![0; num_classes * num_classes];
        for (&t, &p) in y_true.iter().zip(y_pred) {
            if t >= num_classes || p >= num_classes {
                return Err(Error::Invalid(format!("label out of range for {num_classes} classes")));
            }
            counts[t * num_classes + p] += 1;
        }
        Ok(Self { k: num_classes, counts })
    }

    pub fn num_classes(&self) -> usize {
        self.k
    }

    pub fn get(&self, truth: ClassIndex, predicted: ClassIndex) -> usize {
        self.counts[truth * self.k + predicted]
    }

    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }

    pub fn trace(&self) -> usize {
        (0..self.k).map(|c| self.get(c, c)).sum()
    }

    pub fn row_sum(&self, truth: ClassIndex) -> usize {
        (0..self.k).map(|p| self.get(truth, p)).sum()
    }

    pub fn col_sum(&self, predicted: ClassIndex) -> usize {
        (0..self.k).map(|t| self.get(t, predicted)).sum()
    }
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassReport {
    pub classes: Vec<ClassMetrics>,
    pub accuracy: f64,
    pub micro_f1: f64,
    pub macro_f1: f64,
    pub weighted_f1: f64,
}

impl ClassReport {
    pub fn from_confusion(cm: &ConfusionMatrix) -> Result<Self> {
        let total = cm.total();
        if total == 0 {
            return Err(Error::Invalid("cannot report on an empty confusion matrix".into()));
        }
        let classes: Vec<ClassMetrics> = (0..cm.num_classes())
            .map(|c| {
                let tp = cm.get(c, c);
                let precision = ratio(tp, cm.col_sum(c));
                let recall = ratio(tp, cm.row_sum(c));
                let f1 = if precision + recall == 0.0 {
                    0.0
                } else {
                    2.0 * precision * recall / (precision + recall)
                };
                ClassMetrics {
                    precision,
                    recall,
                    f1,
                    support: cm.row_sum(c),
                }
            })
            .collect();
        let accuracy = ratio(cm.trace(), total);
        let macro_f1 = classes.iter().map(|m| m.f1).sum::<f64>() / classes.len() as f64;
        let weighted_f1 = classes.iter().map(|m| m.support as f64 / total as f64 * m.f1).sum();
        Ok(Self {
            classes,
            accuracy,
            micro_f1: accuracy,
            macro_f1,
            weighted_f1,
        })
    }

    pub fn from_labels(y_true: &[ClassIndex], y_pred: &[ClassIndex], num_classes: usize) -> Result<Self> {
        Self::from_confusion(&ConfusionMatrix::new(y_true, y_pred, num_classes)?)
    }
}

/// Mean and population standard deviation of one metric across folds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Spread {
    pub mean: f64,
    pub std: f64,
}

impl Spread {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        Self { mean, std: var.sqrt() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassSummary {
    pub precision: Spread,
    pub recall: Spread,
    pub f1: Spread,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportSummary {
    pub classes: Vec<ClassSummary>,
    pub micro_f1: Spread,
    pub macro_f1: Spread,
    pub weighted_f1: Spread,
}

impl ReportSummary {
    pub fn of(reports: &[&ClassReport]) -> Result<Self> {
        let first = reports
            .first()
            .ok_or_else(|| Error::Invalid("no reports to summarise".into()))?;
        let pick = |f: &dyn Fn(&ClassReport) -> f64| Spread::of(&reports.iter().map(|r| f(r)).collect::<Vec<_>>());
        let classes = (0..first.classes.len())
            .map(|c| ClassSummary {
                precision: pick(&|r| r.classes[c].precision),
                recall: pick(&|r| r.classes[c].recall),
                f1: pick(&|r| r.classes[c].f1),
            })
            .collect();
        Ok(Self {
            classes,
            micro_f1: pick(&|r| r.micro_f1),
            macro_f1: pick(&|r| r.macro_f1),
            weighted_f1: pick(&|r| r.weighted_f1),
        })
    }

    /// Plain-text table: per-class precision/recall/F1 with deviations, then
    /// the micro, macro and weighted F1 rows.
    pub fn to_table(&self, class_names: &[String]) -> String {
        let cell = |s: Spread| format!("{:.3} ± {:.3}", s.mean, s.std);
        let width = class_names.iter().map(String::len).max().unwrap_or(0).max(11);
        let mut out = format!(
            "{:<width$}  {:>15}  {:>15}  {:>15}\n",
            "class", "precision", "recall", "f1"
        );
        for (name, c) in class_names.iter().zip(&self.classes) {
            out.push_str(&format!(
                "{:<width$}  {:>15}  {:>15}  {:>15}\n",
                name,
                cell(c.precision),
                cell(c.recall),
                cell(c.f1)
            ));
        }
        for (name, s) in [
            ("micro-F1", self.micro_f1),
            ("macro-F1", self.macro_f1),
            ("weighted-F1", self.weighted_f1),
        ] {
            out.push_str(&format!("{:<width$}  {:>15}  {:>15}  {:>15}\n", name, "", "", cell(s)));
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldReport {
    pub fold: usize,
    pub train_size: usize,
    pub validation: ClassReport,
    /// Scores on the held-out test set, when one was given.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub test: Option<ClassReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvReport {
    pub classes: Vec<String>,
    pub folds: Vec<FoldReport>,
    pub validation: ReportSummary,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub test: Option<ReportSummary>,
}

impl CvReport {
    pub fn to_table(&self) -> String {
        let mut out = format!("validation ({} folds)\n", self.folds.len());
        out.push_str(&self.validation.to_table(&self.classes));
        if let Some(test) = &self.test {
            out.push_str("\nheld-out test (mean over fold models)\n");
            out.push_str(&test.to_table(&self.classes));
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CvConfig {
    pub folds: usize,
    pub seed: u64,
    pub parallel: usize,
}

impl Default for CvConfig {
    fn default() -> Self {
        Self {
            folds: 5,
            seed: 0,
            parallel: 1,
        }
    }
}

/// Stratified k-fold cross-validation over ground-truth `labeled` data.
///
/// Fold `f` validates on ground-truth fold `f` and trains on the other folds
/// plus all of `extra` (pseudo-labeled or corrected data, which never enters
/// validation). Each fold's model is also scored on `test` when given.
pub fn cross_validate(
    labeled: &Dataset,
    extra: Option<&Dataset>,
    test: Option<&Dataset>,
    factory: &dyn BackendFactory,
    config: &CvConfig,
) -> Result<CvReport> {
    if let Some(extra) = extra {
        if let Some(item) = extra.items().iter().find(|i| labeled.contains(i.id())) {
            return Err(Error::Invalid(format!(
                "extra training id {:?} collides with the labeled set",
                item.id()
            )));
        }
        extra.labels()?;
    }
    let test_labels = test.map(Dataset::labels).transpose()?;
    let k = labeled.num_classes();
    let folds = stratified_kfold(labeled, config.folds, config.seed)?;

    let reports = run_indexed(config.folds, config.parallel, |f| {
        let (train_pos, val_pos) = folds.split(f);
        let mut train = labeled.subset(&train_pos);
        if let Some(extra) = extra {
            train = train.merge(extra)?;
        }
        let val = labeled.subset(&val_pos);
        let mut backend = factory.create(config.seed + f as u64)?;
        backend.fit(&train, &val)?;
        let val_pred = backend.predict_proba(&val.without_labels())?.predictions();
        let validation = ClassReport::from_labels(&val.labels()?, &val_pred, k)?;
        let test = match (test, &test_labels) {
            (Some(test), Some(truth)) => {
                let pred = backend.predict_proba(&test.without_labels())?.predictions();
                Some(ClassReport::from_labels(truth, &pred, k)?)
            }
            _ => None,
        };
        Ok(FoldReport {
            fold: f,
            train_size: train.len(),
            validation,
            test,
        })
    })?;

    let validation = ReportSummary::of(&reports.iter().map(|r| &r.validation).collect::<Vec<_>>())?;
    let test = if test.is_some() {
        Some(ReportSummary::of(
            &reports.iter().filter_map(|r| r.test.as_ref()).collect::<Vec<_>>(),
        )?)
    } else {
        None
    };
    Ok(CvReport {
        classes: labeled.schema().names(),
        folds: reports,
        validation,
        test,
    })
}
