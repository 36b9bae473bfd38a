//! Seeded synthetic corpora: Gaussian blobs carried as dense `features` on
//! each post, with the generating class kept as ground truth for every
//! split. Used by the tests, the acceptance suite and the `synth` command.

use std::collections::HashMap;
use std::sync::Arc;

use chrono::{DateTime, Utc};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::classifier::BackendFactory;
use crate::corpus::{ClassIndex, Dataset, Item, LabelSchema, Origin, Post};
use crate::ensemble::{consensus_dataset, run_ensemble, EnsembleConfig};
use crate::error::{Error, Result};
use crate::eval::{cross_validate, CvConfig, CvReport};
use crate::review::{
    apply_corrections, assign, build_queue, Annotation, Assignment, CorrectionSummary, QueueItem, Verdict,
};
use crate::selftrain::SelfTrainConfig;

/// Class proportions of the 500-post labeled corpus the risk-level schema
/// comes from: Indicator 129, Ideation 190, Behavior 140, Attempt 41.
pub const REFERENCE_COUNTS: [usize; 4] = [129, 190, 140, 41];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub labeled: Vec<usize>,
    pub unlabeled: Vec<usize>,
    pub test: Vec<usize>,
    pub dim: usize,
    /// Distance of each class centre from the origin.
    pub separation: f64,
    /// Per-coordinate standard deviation around a centre.
    pub noise: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    /// 200 labeled, 600 unlabeled and 150 test posts in reference class proportions.
    fn default() -> Self {
        Self {
            labeled: proportional(200),
            unlabeled: proportional(600),
            test: proportional(150),
            dim: 16,
            separation: 1.8,
            noise: 1.0,
            seed: 0,
        }
    }
}

/// Splits `n` across the four risk levels in reference class proportions, largest
/// remainders first.
pub fn proportional(n: usize) -> Vec<usize> {
    let total: usize = REFERENCE_COUNTS.iter().sum();
    let exact: Vec<f64> = REFERENCE_COUNTS
        .iter()
        .map(|&c| (n * c) as f64 / total as f64)
        .collect();
    let mut counts: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let mut order: Vec<usize> = (0..counts.len()).collect();
    order.sort_by(|&a, &b| {
        (exact[b] - exact[b].floor())
            .total_cmp(&(exact[a] - exact[a].floor()))
            .then(a.cmp(&b))
    });
    let short = n - counts.iter().sum::<usize>();
    for &c in order.iter().take(short) {
        counts[c] += 1;
    }
    counts
}

#[derive(Debug, Clone)]
pub struct SyntheticCorpus {
    pub labeled: Dataset,
    /// Unlabeled posts; their generating classes are in `truth`.
    pub unlabeled: Dataset,
    pub test: Dataset,
    pub truth: HashMap<String, ClassIndex>,
}

impl SyntheticCorpus {
    pub fn unlabeled_truth(&self) -> Vec<ClassIndex> {
        self.unlabeled.items().iter().map(|i| self.truth[i.id()]).collect()
    }
}

pub fn generate(spec: &SyntheticSpec) -> Result<SyntheticCorpus> {
    let k = spec.labeled.len();
    if k < 2 || spec.unlabeled.len() != k || spec.test.len() != k {
        return Err(Error::Config(
            "every split needs the same number (>= 2) of class counts".into(),
        ));
    }
    if spec.dim == 0 || spec.noise.is_nan() || spec.noise <= 0.0 {
        return Err(Error::Config("dim must be positive and noise > 0".into()));
    }
    let schema = Arc::new(if k == 4 {
        LabelSchema::risk_levels()
    } else {
        LabelSchema::new(&(0..k).map(|c| format!("class{c}")).collect::<Vec<_>>())?
    });

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let unit = Normal::new(0.0, 1.0).expect("valid normal");
    let noise = Normal::new(0.0, spec.noise).map_err(|e| Error::Config(e.to_string()))?;
    let centres: Vec<Vec<f64>> = (0..k)
        .map(|_| {
            let dir: Vec<f64> = (0..spec.dim).map(|_| unit.sample(&mut rng)).collect();
            let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
            dir.iter().map(|v| v / norm * spec.separation).collect()
        })
        .collect();

    let mut truth = HashMap::new();
    let mut split = |prefix: &str, counts: &[usize], keep_labels: bool| -> Result<Dataset> {
        let mut classes: Vec<ClassIndex> = counts.iter().enumerate().flat_map(|(c, &n)| vec![c; n]).collect();
        classes.shuffle(&mut rng);
        let items = classes
            .into_iter()
            .enumerate()
            .map(|(i, c)| {
                let id = format!("{prefix}{i:04}");
                let features = centres[c].iter().map(|m| m + noise.sample(&mut rng)).collect();
                truth.insert(id.clone(), c);
                let post = Post {
                    text: format!("synthetic post {id}"),
                    id,
                    features: Some(features),
                };
                if keep_labels {
                    Item::labeled(post, c, Origin::GroundTruth)
                } else {
                    Item::unlabeled(post)
                }
            })
            .collect();
        Dataset::new(Arc::clone(&schema), items)
    };
    let labeled = split("l", &spec.labeled, true)?;
    let unlabeled = split("u", &spec.unlabeled, false)?;
    let test = split("t", &spec.test, true)?;
    Ok(SyntheticCorpus {
        labeled,
        unlabeled,
        test,
        truth,
    })
}

/// Verdicts an annotator who knows the generating classes would give on
/// every item assigned to them.
pub fn oracle_annotations(
    queue: &[QueueItem],
    assignment: &Assignment,
    truth: &HashMap<String, ClassIndex>,
    ts: DateTime<Utc>,
) -> Result<Vec<Annotation>> {
    let by_id: HashMap<&str, &QueueItem> = queue.iter().map(|q| (q.id.as_str(), q)).collect();
    let mut out = Vec::new();
    for annotator in &assignment.annotators {
        for id in assignment.items_for(annotator) {
            let item = by_id
                .get(id)
                .ok_or_else(|| Error::Invalid(format!("assigned id {id:?} not in queue")))?;
            let actual = *truth
                .get(id)
                .ok_or_else(|| Error::Invalid(format!("no ground truth for {id:?}")))?;
            let (verdict, corrected_label) = if actual == item.label {
                (Verdict::Correct, None)
            } else {
                (Verdict::Incorrect, Some(actual))
            };
            out.push(Annotation {
                item_id: id.to_string(),
                annotator: annotator.clone(),
                verdict,
                corrected_label,
                ts,
            });
        }
    }
    Ok(out)
}

/// Outcome of [`run_pipeline`] on one synthetic corpus.
#[derive(Debug, Clone, Serialize)]
pub struct PipelineOutcome {
    pub baseline: CvReport,
    pub augmented: CvReport,
    pub queue_len: usize,
    pub corrections: CorrectionSummary,
    /// Accuracy of the consensus pseudo-labels against the generator.
    pub pseudo_accuracy: f64,
}

impl PipelineOutcome {
    /// Held-out macro-F1 (mean over fold models) with pseudo-labels minus
    /// without.
    pub fn macro_f1_gain(&self) -> f64 {
        test_summary(&self.augmented).macro_f1.mean - test_summary(&self.baseline).macro_f1.mean
    }

    pub fn class_f1_gains(&self) -> Vec<f64> {
        let (a, b) = (test_summary(&self.augmented), test_summary(&self.baseline));
        a.classes
            .iter()
            .zip(&b.classes)
            .map(|(a, b)| a.f1.mean - b.f1.mean)
            .collect()
    }
}

fn test_summary(report: &CvReport) -> &crate::eval::ReportSummary {
    report.test.as_ref().expect("pipeline reports carry test scores")
}

/// Baseline cross-validation, a `runs`-run pseudo-labeling ensemble, review
/// of the non-unanimous items by two oracle annotators (overlap scaled from
/// 104 of 444), then cross-validation with the corrected pseudo-labels as
/// extra training data. Both evaluations score every fold model on the
/// corpus's test split.
pub fn run_pipeline(
    corpus: &SyntheticCorpus,
    factory: &dyn BackendFactory,
    runs: usize,
    seed: u64,
    parallel: usize,
) -> Result<PipelineOutcome> {
    let cv = CvConfig {
        folds: 5,
        seed,
        parallel,
    };
    let baseline = cross_validate(&corpus.labeled, None, Some(&corpus.test), factory, &cv)?;
    let ensemble = EnsembleConfig {
        runs,
        base_seed: seed,
        parallel,
    };
    let votes = run_ensemble(
        &corpus.labeled,
        &corpus.unlabeled,
        factory,
        &ensemble,
        &SelfTrainConfig::default(),
    )?
    .votes;
    let consensus = votes.consensus();
    let pseudo = consensus_dataset(&corpus.unlabeled, &consensus)?;
    let truth = corpus.unlabeled_truth();
    let hits = pseudo.labels()?.iter().zip(&truth).filter(|(a, b)| a == b).count();

    let queue = build_queue(&consensus, &corpus.unlabeled)?;
    let ids: Vec<&str> = queue.iter().map(|q| q.id.as_str()).collect();
    let annotators = vec!["a1".to_string(), "a2".to_string()];
    let assignment = assign(&ids, &annotators, ids.len() * 104 / 444)?;
    let annotations = oracle_annotations(&queue, &assignment, &corpus.truth, DateTime::UNIX_EPOCH)?;
    let (corrected, corrections) = apply_corrections(&pseudo, &annotations)?;
    let augmented = cross_validate(&corpus.labeled, Some(&corrected), Some(&corpus.test), factory, &cv)?;
    Ok(PipelineOutcome {
        baseline,
        augmented,
        queue_len: queue.len(),
        corrections,
        pseudo_accuracy: hits as f64 / truth.len().max(1) as f64,
    })
}
