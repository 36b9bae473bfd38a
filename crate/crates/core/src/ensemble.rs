//! Repeated self-training over rotating validation folds, majority voting
//! and agreement statistics.

use std::collections::BTreeMap;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::classifier::BackendFactory;
use crate::corpus::{stratified_kfold, ClassIndex, Dataset, Item, Origin};
use crate::error::{Error, Result};
use crate::io;
use crate::selftrain::{self_train, SelfTrainConfig, SelfTrainTrace};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EnsembleConfig {
    pub runs: usize,
    /// Seeds the fold split; run `j` seeds its backend with `base_seed + j`.
    pub base_seed: u64,
    /// Upper bound on runs executing at once.
    pub parallel: usize,
}

impl Default for EnsembleConfig {
    fn default() -> Self {
        Self {
            runs: 5,
            base_seed: 0,
            parallel: 1,
        }
    }
}

/// Per-post votes of every run, in unlabeled-set order.
#[derive(Debug, Clone, PartialEq)]
pub struct VoteMatrix {
    pub runs: usize,
    pub num_classes: usize,
    pub ids: Vec<String>,
    pub votes: Vec<Vec<ClassIndex>>,
    pub confidences: Vec<Vec<f64>>,
}

impl VoteMatrix {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Labels assigned by run `run`, one per post.
    pub fn run_labels(&self, run: usize) -> Vec<ClassIndex> {
        self.votes.iter().map(|v| v[run]).collect()
    }

    pub fn consensus(&self) -> Vec<Consensus> {
        self.ids
            .iter()
            .zip(&self.votes)
            .zip(&self.confidences)
            .map(|((id, votes), confs)| {
                let vote = majority_vote(votes, confs, self.num_classes);
                Consensus {
                    id: id.clone(),
                    votes: votes.clone(),
                    confidences: confs.clone(),
                    label: vote.label,
                    unanimity: vote.unanimity,
                    tie_broken: vote.tie_broken,
                }
            })
            .collect()
    }

    /// Cohen's kappa of each run's labels against the majority vote.
    pub fn agreement_with_consensus(&self) -> Result<Vec<f64>> {
        let majority: Vec<ClassIndex> = self.consensus().iter().map(|c| c.label).collect();
        (0..self.runs)
            .map(|r| cohen_kappa(&self.run_labels(r), &majority, self.num_classes))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Vote {
    pub label: ClassIndex,
    pub unanimity: usize,
    /// Whether two or more classes shared the top vote count.
    pub tie_broken: bool,
}

/// Most frequent vote. Count ties go to the tied class with the largest
/// summed confidence, then to the lowest class index.
pub fn majority_vote(votes: &[ClassIndex], confidences: &[f64], num_classes: usize) -> Vote {
    let mut counts = vec![0usize; num_classes];
    let mut mass = vec![0.0f64; num_classes];
    for (i, &v) in votes.iter().enumerate() {
        counts[v] += 1;
        mass[v] += confidences.get(i).copied().unwrap_or(0.0);
    }
    let top = counts.iter().copied().max().unwrap_or(0);
    let tied: Vec<ClassIndex> = (0..num_classes).filter(|&c| counts[c] == top).collect();
    let mut label = tied[0];
    for &c in &tied[1..] {
        if mass[c] > mass[label] {
            label = c;
        }
    }
    Vote {
        label,
        unanimity: top,
        tie_broken: tied.len() > 1,
    }
}

/// One line of the votes / consensus file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Consensus {
    pub id: String,
    pub votes: Vec<ClassIndex>,
    pub confidences: Vec<f64>,
    pub label: ClassIndex,
    pub unanimity: usize,
    pub tie_broken: bool,
}

pub fn save_consensus(path: &Path, records: &[Consensus]) -> Result<()> {
    io::write_jsonl(path, records)
}

pub fn load_consensus(path: &Path) -> Result<Vec<Consensus>> {
    Ok(io::read_jsonl::<Consensus>(path)?.into_iter().map(|(_, c)| c).collect())
}

/// Rebuilds a vote matrix from consensus records (as read back from disk).
pub fn votes_from_records(records: &[Consensus], num_classes: usize) -> Result<VoteMatrix> {
    let runs = records
        .first()
        .map(|r| r.votes.len())
        .ok_or_else(|| Error::Invalid("no votes".into()))?;
    for r in records {
        if r.votes.len() != runs || r.confidences.len() != runs {
            return Err(Error::Invalid(format!(
                "record {:?} has {} votes, expected {runs}",
                r.id,
                r.votes.len()
            )));
        }
        if let Some(&v) = r.votes.iter().find(|&&v| v >= num_classes) {
            return Err(Error::Invalid(format!("record {:?} has out-of-range vote {v}", r.id)));
        }
    }
    Ok(VoteMatrix {
        runs,
        num_classes,
        ids: records.iter().map(|r| r.id.clone()).collect(),
        votes: records.iter().map(|r| r.votes.clone()).collect(),
        confidences: records.iter().map(|r| r.confidences.clone()).collect(),
    })
}

/// The pseudo-labeled dataset implied by consensus labels. Posts missing
/// from `consensus` are an error.
pub fn consensus_dataset(unlabeled: &Dataset, consensus: &[Consensus]) -> Result<Dataset> {
    let by_id: BTreeMap<&str, ClassIndex> = consensus.iter().map(|c| (c.id.as_str(), c.label)).collect();
    let items = unlabeled
        .items()
        .iter()
        .map(|item| {
            let class = by_id
                .get(item.id())
                .ok_or_else(|| Error::Invalid(format!("post {:?} has no consensus label", item.id())))?;
            Ok(Item::labeled(item.post.clone(), *class, Origin::Pseudo))
        })
        .collect::<Result<Vec<_>>>()?;
    Dataset::new(unlabeled.shared_schema(), items)
}

pub struct EnsembleOutput {
    pub votes: VoteMatrix,
    pub traces: Vec<SelfTrainTrace>,
    /// Ground-truth training ids of each run.
    pub training_ids: Vec<Vec<String>>,
}

/// Self-trains `config.runs` times. Run `j` validates on fold `j` of a
/// stratified split of `labeled` and trains on the remaining folds. With a
/// single run all of `labeled` trains and nothing validates.
pub fn run_ensemble(
    labeled: &Dataset,
    unlabeled: &Dataset,
    factory: &dyn BackendFactory,
    config: &EnsembleConfig,
    selftrain: &SelfTrainConfig,
) -> Result<EnsembleOutput> {
    if config.runs == 0 {
        return Err(Error::Config("at least one run is required".into()));
    }
    selftrain.validate()?;
    let splits: Vec<(Dataset, Dataset)> = if config.runs == 1 {
        vec![(labeled.clone(), Dataset::empty(labeled.shared_schema()))]
    } else {
        let folds = stratified_kfold(labeled, config.runs, config.base_seed)?;
        (0..config.runs)
            .map(|j| {
                let (train, val) = folds.split(j);
                (labeled.subset(&train), labeled.subset(&val))
            })
            .collect()
    };

    let run = |j: usize| -> Result<_> {
        let (train, val) = &splits[j];
        let tag = |e: Error| Error::Run {
            run: j,
            source: Box::new(e),
        };
        let mut backend = factory.create(config.base_seed + j as u64).map_err(tag)?;
        self_train(train, unlabeled, val, backend.as_mut(), selftrain).map_err(tag)
    };
    let outputs: Vec<_> = run_indexed(config.runs, config.parallel, run)?;

    let n = unlabeled.len();
    let mut votes = vec![Vec::with_capacity(config.runs); n];
    let mut confidences = vec![Vec::with_capacity(config.runs); n];
    for out in &outputs {
        let labels = out.pseudo_labeled.labels()?;
        for i in 0..n {
            votes[i].push(labels[i]);
            confidences[i].push(out.confidences[i]);
        }
    }
    Ok(EnsembleOutput {
        votes: VoteMatrix {
            runs: config.runs,
            num_classes: labeled.num_classes(),
            ids: unlabeled.ids().into_iter().map(String::from).collect(),
            votes,
            confidences,
        },
        traces: outputs.into_iter().map(|o| o.trace).collect(),
        training_ids: splits
            .iter()
            .map(|(train, _)| train.ids().into_iter().map(String::from).collect())
            .collect(),
    })
}

/// Runs `f(0..n)` on at most `parallel` threads; results come back in index
/// order regardless of completion order.
pub(crate) fn run_indexed<T: Send>(n: usize, parallel: usize, f: impl Fn(usize) -> Result<T> + Sync) -> Result<Vec<T>> {
    if parallel <= 1 {
        return (0..n).map(f).collect();
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(parallel)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    pool.install(|| (0..n).into_par_iter().map(&f).collect())
}

/// Cohen's kappa `(p_o - p_e) / (1 - p_e)`, with chance agreement `p_e` from
/// the marginal label frequencies. Two identical constant labelings score 1.
pub fn cohen_kappa(a: &[ClassIndex], b: &[ClassIndex], num_classes: usize) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Invalid(format!(
            "labelings have lengths {} and {}",
            a.len(),
            b.len()
        )));
    }
    if a.is_empty() {
        return Err(Error::Invalid("cannot compute kappa of empty labelings".into()));
    }
    let n = a.len() as f64;
    let mut ma = vec![0usize; num_classes];
    let mut mb = vec![0usize; num_classes];
    let mut agree = 0usize;
    for (&x, &y) in a.iter().zip(b) {
        if x >= num_classes || y >= num_classes {
            return Err(Error::Invalid(format!("label out of range for {num_classes} classes")));
        }
        ma[x] += 1;
        mb[y] += 1;
        agree += (x == y) as usize;
    }
    let p_o = agree as f64 / n;
    let p_e: f64 = ma.iter().zip(&mb).map(|(&x, &y)| (x as f64 / n) * (y as f64 / n)).sum();
    if p_e == 1.0 {
        return Ok(1.0);
    }
    Ok((p_o - p_e) / (1.0 - p_e))
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct UnanimityHistogram {
    /// Items per unanimity level.
    pub levels: BTreeMap<usize, usize>,
    /// Items per unanimity level and consensus class.
    pub by_class: BTreeMap<usize, Vec<usize>>,
}

pub fn unanimity_histogram(consensus: &[Consensus], num_classes: usize) -> UnanimityHistogram {
    let mut hist = UnanimityHistogram::default();
    for c in consensus {
        *hist.levels.entry(c.unanimity).or_default() += 1;
        hist.by_class.entry(c.unanimity).or_insert_with(|| vec![0; num_classes])[c.label] += 1;
    }
    hist
}

impl UnanimityHistogram {
    pub fn total(&self) -> usize {
        self.levels.values().sum()
    }

    pub fn to_table(&self, class_names: &[String]) -> String {
        let mut out = format!("{:<10}{:>8}", "unanimity", "posts");
        for name in class_names {
            out.push_str(&format!("{name:>12}"));
        }
        out.push('\n');
        for (level, count) in &self.levels {
            out.push_str(&format!("{level:<10}{count:>8}"));
            for n in &self.by_class[level] {
                let pct = 100.0 * *n as f64 / *count as f64;
                out.push_str(&format!("{:>12}", format!("{n} ({pct:.1}%)")));
            }
            out.push('\n');
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn majority_vote_examples() {
        assert_eq!(
            majority_vote(&[2; 5], &[0.9; 5], 4),
            Vote {
                label: 2,
                unanimity: 5,
                tie_broken: false
            }
        );
        let v = majority_vote(&[1, 1, 2, 1, 3], &[0.5; 5], 4);
        assert_eq!((v.label, v.unanimity, v.tie_broken), (1, 3, false));
        // class 0 mass 1.7, class 1 mass 1.9
        let v = majority_vote(&[0, 0, 1, 1, 2], &[0.8, 0.9, 0.95, 0.95, 0.99], 4);
        assert_eq!((v.label, v.unanimity, v.tie_broken), (1, 2, true));
        // equal mass falls back to the lowest index
        let v = majority_vote(&[3, 2, 3, 2, 0], &[0.5; 5], 4);
        assert_eq!((v.label, v.unanimity, v.tie_broken), (2, 2, true));
    }

    #[test]
    fn kappa_examples() {
        assert_eq!(cohen_kappa(&[0, 0, 1, 1], &[0, 1, 1, 1], 2).unwrap(), 0.5);
        assert_eq!(cohen_kappa(&[3, 1, 2], &[3, 1, 2], 4).unwrap(), 1.0);
        assert_eq!(cohen_kappa(&[2, 2, 2], &[2, 2, 2], 4).unwrap(), 1.0);
        assert!(cohen_kappa(&[0], &[0, 1], 2).is_err());
        assert!(cohen_kappa(&[], &[], 2).is_err());
    }

    fn record(id: &str, votes: &[usize]) -> Consensus {
        let v = majority_vote(votes, &vec![0.5; votes.len()], 4);
        Consensus {
            id: id.into(),
            votes: votes.to_vec(),
            confidences: vec![0.5; votes.len()],
            label: v.label,
            unanimity: v.unanimity,
            tie_broken: v.tie_broken,
        }
    }

    #[test]
    fn histogram_counts() {
        let all: Vec<_> = (0..10).map(|i| record(&i.to_string(), &[1; 5])).collect();
        assert_eq!(unanimity_histogram(&all, 4).levels, BTreeMap::from([(5, 10)]));

        let six = [
            record("a", &[0, 0, 0, 0, 0]),
            record("b", &[3, 3, 3, 3, 1]),
            record("c", &[3, 3, 3, 1, 1]),
            record("d", &[2, 2, 1, 1, 0]),
            record("e", &[1, 1, 1, 1, 2]),
            record("f", &[3, 3, 3, 3, 3]),
        ];
        let h = unanimity_histogram(&six, 4);
        assert_eq!(h.levels, BTreeMap::from([(2, 1), (3, 1), (4, 2), (5, 2)]));
        assert_eq!(h.by_class[&4], vec![0, 1, 0, 1]);
        assert_eq!(h.by_class[&5], vec![1, 0, 0, 1]);
        assert_eq!(h.by_class[&2], vec![0, 1, 0, 0]);
        assert_eq!(h.total(), 6);
        assert!(h
            .to_table(&["A".into(), "B".into(), "C".into(), "D".into()])
            .contains("unanimity"));
    }

    #[test]
    fn vote_records_round_trip_into_matrix() {
        let recs = [record("a", &[0, 1]), record("b", &[2, 2])];
        let m = votes_from_records(&recs, 4).unwrap();
        assert_eq!(m.runs, 2);
        assert_eq!(m.run_labels(1), vec![1, 2]);
        assert_eq!(m.consensus(), recs.to_vec());
        assert!(votes_from_records(&[], 4).is_err());
        assert!(votes_from_records(&[record("a", &[0, 1]), record("b", &[1])], 4).is_err());
    }
}
