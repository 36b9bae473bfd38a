//! Independent reference implementations used by the property tests and the
//! acceptance harness. They favour obviousness over speed and share no code
//! with the library beyond its data types.

#![allow(dead_code)]

use std::collections::BTreeMap;

use pseudolabel::classifier::{loss_and_grad, Examples, TrainedModel};
use pseudolabel::featurizer::FeatureVector;
use pseudolabel::ProbMatrix;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Index of the first maximum.
pub fn first_max(row: &[f64]) -> usize {
    let mut best = 0;
    for c in 1..row.len() {
        if row[c] > row[best] {
            best = c;
        }
    }
    best
}

/// A random probability matrix whose entries are multiples of `1/sum` for
/// small integer weights, so confidences and argmax ties are frequent.
pub fn tied_prob_matrix(rng: &mut ChaCha8Rng, n: usize, k: usize) -> ProbMatrix {
    let rows = (0..n)
        .map(|_| loop {
            let w: Vec<u32> = (0..k).map(|_| rng.random_range(0..5)).collect();
            let s: u32 = w.iter().sum();
            if s > 0 {
                break w.iter().map(|&x| x as f64 / s as f64).collect::<Vec<_>>();
            }
        })
        .collect();
    ProbMatrix::from_rows(k, rows, ProbMatrix::ROW_SUM_TOLERANCE).expect("rows are normalised")
}

/// SCS reference: for acquisition rate `percent / 100`, group by first
/// argmax, repeatedly pull the most confident remaining member (smallest id
/// on ties) `percent * m / 100` times using integer arithmetic.
pub fn scs_oracle(probs: &ProbMatrix, ids: &[String], percent: usize) -> (Vec<(String, usize, f64)>, Vec<usize>) {
    let k = probs.num_classes();
    let mut groups: Vec<Vec<(String, f64)>> = vec![Vec::new(); k];
    for (i, id) in ids.iter().enumerate() {
        let row = probs.row(i);
        let c = first_max(row);
        groups[c].push((id.clone(), row[c]));
    }
    let mut selected = Vec::new();
    let mut counts = vec![0; k];
    for (c, mut members) in groups.into_iter().enumerate() {
        let take = percent * members.len() / 100;
        counts[c] = take;
        for _ in 0..take {
            let mut best = 0;
            for j in 1..members.len() {
                let (bid, bconf) = &members[best];
                let (jid, jconf) = &members[j];
                if jconf > bconf || (jconf == bconf && jid < bid) {
                    best = j;
                }
            }
            let (id, conf) = members.remove(best);
            selected.push((id, c, conf));
        }
    }
    (selected, counts)
}

/// Majority-vote reference: count votes, keep the classes with the top
/// count, break ties by summed confidence then lowest class.
pub fn vote_oracle(votes: &[usize], confidences: &[f64], k: usize) -> (usize, usize, bool) {
    let mut count = vec![0usize; k];
    let mut mass = vec![0.0f64; k];
    for (&v, &c) in votes.iter().zip(confidences) {
        count[v] += 1;
        mass[v] += c;
    }
    let top = *count.iter().max().unwrap();
    let tied: Vec<usize> = (0..k).filter(|&c| count[c] == top).collect();
    let mut label = tied[0];
    for &c in &tied[1..] {
        if mass[c] > mass[label] {
            label = c;
        }
    }
    (label, top, tied.len() > 1)
}

/// Cohen's kappa from an explicit contingency table.
pub fn kappa_oracle(a: &[usize], b: &[usize], k: usize) -> f64 {
    let n = a.len() as f64;
    let mut table = vec![vec![0.0f64; k]; k];
    for (&x, &y) in a.iter().zip(b) {
        table[x][y] += 1.0;
    }
    let observed: f64 = (0..k).map(|c| table[c][c]).sum::<f64>() / n;
    let mut expected = 0.0;
    for c in 0..k {
        let row: f64 = table[c].iter().sum();
        let col: f64 = (0..k).map(|r| table[r][c]).sum();
        expected += (row / n) * (col / n);
    }
    if expected == 1.0 {
        1.0
    } else {
        (observed - expected) / (1.0 - expected)
    }
}

#[derive(Debug)]
pub struct MetricsOracle {
    pub precision: Vec<f64>,
    pub recall: Vec<f64>,
    pub f1: Vec<f64>,
    pub accuracy: f64,
    pub macro_f1: f64,
    pub weighted_f1: f64,
}

/// Per-class metrics from one-vs-rest TP/FP/FN counts.
pub fn metrics_oracle(truth: &[usize], pred: &[usize], k: usize) -> MetricsOracle {
    let n = truth.len() as f64;
    let ratio = |a: f64, b: f64| if b == 0.0 { 0.0 } else { a / b };
    let (mut precision, mut recall, mut f1, mut support) = (vec![], vec![], vec![], vec![]);
    for c in 0..k {
        let tp = truth.iter().zip(pred).filter(|(&t, &p)| t == c && p == c).count() as f64;
        let fp = truth.iter().zip(pred).filter(|(&t, &p)| t != c && p == c).count() as f64;
        let fn_ = truth.iter().zip(pred).filter(|(&t, &p)| t == c && p != c).count() as f64;
        let p = ratio(tp, tp + fp);
        let r = ratio(tp, tp + fn_);
        precision.push(p);
        recall.push(r);
        f1.push(ratio(2.0 * p * r, p + r));
        support.push(tp + fn_);
    }
    let correct = truth.iter().zip(pred).filter(|(t, p)| t == p).count() as f64;
    MetricsOracle {
        macro_f1: f1.iter().sum::<f64>() / k as f64,
        weighted_f1: f1.iter().zip(&support).map(|(f, s)| f * s / n).sum(),
        accuracy: correct / n,
        precision,
        recall,
        f1,
    }
}

/// Largest relative error between the analytic gradient and central
/// differences of the loss (step `h`) over every weight of a random
/// instance. Relative error is `|a - f| / max(|a|, |f|, 1e-8)`.
pub fn gradient_check(rng: &mut ChaCha8Rng, h: f64) -> f64 {
    let dim = rng.random_range(1..=20);
    let k = rng.random_range(2..=5);
    let n = rng.random_range(1..=16);
    let features: Vec<FeatureVector> = (0..n)
        .map(|_| {
            let mut entries = Vec::new();
            for j in 0..dim {
                if rng.random_bool(0.6) {
                    entries.push((j, rng.random_range(-2.0..2.0)));
                }
            }
            FeatureVector::from_pairs(dim, entries).unwrap()
        })
        .collect();
    let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
    let class_weights: Vec<f64> = (0..k).map(|_| rng.random_range(0.2..3.0)).collect();
    let weights: Vec<f64> = (0..(dim + 1) * k).map(|_| rng.random_range(-1.0..1.0)).collect();

    let batch = Examples::new(&features, &labels).unwrap();
    let model = TrainedModel::from_weights(dim, k, weights.clone()).unwrap();
    let (_, grad) = loss_and_grad(&model, batch, &class_weights).unwrap();
    let loss_at = |w: Vec<f64>| {
        let m = TrainedModel::from_weights(dim, k, w).unwrap();
        loss_and_grad(&m, batch, &class_weights).unwrap().0
    };
    let mut worst: f64 = 0.0;
    for j in 0..weights.len() {
        let mut plus = weights.clone();
        plus[j] += h;
        let mut minus = weights.clone();
        minus[j] -= h;
        let fd = (loss_at(plus) - loss_at(minus)) / (2.0 * h);
        let err = (grad[j] - fd).abs() / grad[j].abs().max(fd.abs()).max(1e-8);
        worst = worst.max(err);
    }
    worst
}

/// Class counts of a label list.
pub fn histogram(labels: &[usize], k: usize) -> Vec<usize> {
    let mut out = vec![0; k];
    for &l in labels {
        out[l] += 1;
    }
    out
}

/// Groups `(key, value)` pairs.
pub fn group<K: Ord, V>(pairs: impl IntoIterator<Item = (K, V)>) -> BTreeMap<K, Vec<V>> {
    let mut map: BTreeMap<K, Vec<V>> = BTreeMap::new();
    for (k, v) in pairs {
        map.entry(k).or_default().push(v);
    }
    map
}

/// Wraps a backend and keeps every prediction request (ids and rows) so a
/// test can replay what the self-training loop saw.
pub struct Recording {
    pub inner: Box<dyn pseudolabel::Backend>,
    pub fits: usize,
    pub predictions: Vec<(Vec<String>, ProbMatrix)>,
}

impl Recording {
    pub fn new(inner: Box<dyn pseudolabel::Backend>) -> Self {
        Self {
            inner,
            fits: 0,
            predictions: Vec::new(),
        }
    }
}

impl pseudolabel::Backend for Recording {
    fn describe(&self) -> String {
        format!("recording({})", self.inner.describe())
    }

    fn fit(
        &mut self,
        train: &pseudolabel::Dataset,
        validation: &pseudolabel::Dataset,
    ) -> pseudolabel::Result<pseudolabel::classifier::FitSummary> {
        self.fits += 1;
        self.inner.fit(train, validation)
    }

    fn predict_proba(&mut self, items: &pseudolabel::Dataset) -> pseudolabel::Result<ProbMatrix> {
        let probs = self.inner.predict_proba(items)?;
        self.predictions
            .push((items.ids().into_iter().map(String::from).collect(), probs.clone()));
        Ok(probs)
    }
}

/// Checks the bookkeeping of one self-training run against the predictions
/// its backend was asked for. Returns a description of the first violation.
pub fn check_accounting(
    unlabeled: &pseudolabel::Dataset,
    out: &pseudolabel::selftrain::SelfTrainOutput,
    record: &Recording,
    config: &pseudolabel::SelfTrainConfig,
) -> Result<(), String> {
    use pseudolabel::selftrain::StopReason;
    use std::collections::{BTreeSet, HashMap};

    let n = unlabeled.len();
    if out.pseudo_labeled.len() != n {
        return Err(format!("{} pseudo-labels for {n} posts", out.pseudo_labeled.len()));
    }
    if out.pseudo_labeled.ids() != unlabeled.ids() {
        return Err("pseudo-labeled ids differ from the unlabeled ids".into());
    }
    let labels: HashMap<&str, usize> = out
        .pseudo_labeled
        .items()
        .iter()
        .map(|i| (i.id(), i.class().expect("labeled")))
        .collect();

    let trace = &out.trace;
    let iters = trace.iterations.len();
    // One prediction per acquiring iteration, one for an iteration whose
    // selection came back empty, and one for the remainder.
    let empty_round = usize::from(trace.stop_reason == StopReason::EmptySelection);
    let expected_calls = iters + empty_round + usize::from(trace.remainder > 0);
    if record.predictions.len() != expected_calls {
        return Err(format!(
            "{} prediction calls for {iters} iterations ({:?})",
            record.predictions.len(),
            trace.stop_reason
        ));
    }

    let mut acquired: BTreeSet<String> = BTreeSet::new();
    let mut pool: BTreeSet<String> = unlabeled.ids().into_iter().map(String::from).collect();
    let mut previous = n;
    for (i, rec) in trace.iterations.iter().enumerate() {
        let (ids, probs) = &record.predictions[i];
        if ids.iter().cloned().collect::<BTreeSet<_>>() != pool {
            return Err(format!(
                "iteration {} predicted on a pool other than the remaining posts",
                rec.iter
            ));
        }
        if pool.len() < config.stop_threshold {
            return Err(format!(
                "iteration {} ran with {} < threshold posts left",
                rec.iter,
                pool.len()
            ));
        }
        let next: BTreeSet<String> = match record.predictions.get(i + 1) {
            Some((ids, _)) => ids.iter().cloned().collect(),
            None => BTreeSet::new(),
        };
        if !next.is_subset(&pool) {
            return Err(format!("posts reappeared in the pool after iteration {}", rec.iter));
        }
        let mut taken = 0;
        for id in pool.difference(&next) {
            let j = ids.iter().position(|x| x == id).expect("id from the pool");
            if labels[id.as_str()] != first_max(probs.row(j)) {
                return Err(format!("{id} was pseudo-labeled against its acquisition-time argmax"));
            }
            if !acquired.insert(id.clone()) {
                return Err(format!("{id} acquired twice"));
            }
            taken += 1;
        }
        if rec.acquired.iter().sum::<usize>() != taken {
            return Err(format!(
                "iteration {} reports {:?} but {taken} posts left the pool",
                rec.iter, rec.acquired
            ));
        }
        if rec.remaining >= previous || rec.remaining != previous - taken {
            return Err(format!(
                "remaining count at iteration {} is {} after {previous}",
                rec.iter, rec.remaining
            ));
        }
        previous = rec.remaining;
        pool = next;
    }
    if previous != trace.remainder {
        return Err(format!("{} posts left but remainder is {}", previous, trace.remainder));
    }
    let ok = match trace.stop_reason {
        StopReason::BelowThreshold => previous < config.stop_threshold && previous > 0,
        StopReason::Exhausted => previous == 0,
        StopReason::EmptySelection => previous > 0 && previous >= config.stop_threshold,
        StopReason::MaxIterations => iters == config.max_iterations,
    };
    if !ok {
        return Err(format!(
            "stop reason {:?} with {previous} posts left",
            trace.stop_reason
        ));
    }
    if trace.remainder > 0 {
        let (ids, probs) = record.predictions.last().expect("remainder prediction");
        if ids.len() != trace.remainder {
            return Err("remainder prediction covered the wrong posts".into());
        }
        for (j, id) in ids.iter().enumerate() {
            if acquired.contains(id) {
                return Err(format!("{id} labeled by both SCS and the remainder model"));
            }
            if labels[id.as_str()] != first_max(probs.row(j)) {
                return Err(format!("remainder post {id} is not labeled by argmax"));
            }
        }
    }
    Ok(())
}
