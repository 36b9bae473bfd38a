//! Human review of non-unanimous pseudo-labels.
//!
//! Items whose ensemble vote was not unanimous form the review queue, most
//! contested first. The first `overlap` items go to every annotator so their
//! agreement can be measured; the rest are split into contiguous blocks.
//! Verdicts are appended to a JSONL log and replaying the log reproduces the
//! store's state. An annotator may resubmit; their latest verdict counts.
//!
//! When annotators disagree on a shared item it is reported as a conflict
//! and left uncorrected until a resubmission brings the verdicts in line.

use std::collections::{BTreeMap, HashMap};
use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{ClassIndex, Dataset, Item, LabelSchema, Origin};
use crate::ensemble::Consensus;
use crate::error::{Error, Result};
use crate::io;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum Rejection {
    #[error("unknown item {0:?}")]
    UnknownItem(String),
    #[error("item {item:?} is not assigned to annotator {annotator:?}")]
    NotAssigned { item: String, annotator: String },
    #[error("verdict \"incorrect\" requires corrected_label")]
    MissingCorrection,
    #[error("verdict \"correct\" must not carry corrected_label")]
    UnexpectedCorrection,
    #[error("corrected_label {0} is not a class of the schema")]
    InvalidLabel(ClassIndex),
    #[error("corrected_label {0} equals the pseudo-label")]
    UnchangedLabel(ClassIndex),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueueItem {
    pub id: String,
    pub text: String,
    pub label: ClassIndex,
    pub label_name: String,
    pub votes: Vec<ClassIndex>,
    pub confidences: Vec<f64>,
    pub unanimity: usize,
}

/// Non-unanimous items (unanimity below the number of runs), ordered by
/// unanimity ascending and then by id.
pub fn build_queue(consensus: &[Consensus], posts: &Dataset) -> Result<Vec<QueueItem>> {
    let mut queue = Vec::new();
    for c in consensus {
        if c.unanimity >= c.votes.len() {
            continue;
        }
        let post = posts
            .get(&c.id)
            .ok_or_else(|| Error::Invalid(format!("consensus id {:?} is not among the posts", c.id)))?;
        if c.label >= posts.num_classes() {
            return Err(Error::Invalid(format!("consensus label {} out of range", c.label)));
        }
        queue.push(QueueItem {
            id: c.id.clone(),
            text: post.post.text.clone(),
            label: c.label,
            label_name: posts.schema().name(c.label).to_string(),
            votes: c.votes.clone(),
            confidences: c.confidences.clone(),
            unanimity: c.unanimity,
        });
    }
    queue.sort_by(|a, b| a.unanimity.cmp(&b.unanimity).then_with(|| a.id.cmp(&b.id)));
    Ok(queue)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Assignment {
    pub annotators: Vec<String>,
    /// Items every annotator reviews.
    pub shared: Vec<String>,
    /// Items only one annotator reviews, keyed by annotator.
    pub blocks: BTreeMap<String, Vec<String>>,
}

impl Assignment {
    /// Items assigned to `annotator`, shared ones first, in queue order.
    pub fn items_for(&self, annotator: &str) -> Vec<&str> {
        match self.blocks.get(annotator) {
            Some(block) => self.shared.iter().chain(block).map(String::as_str).collect(),
            None => Vec::new(),
        }
    }

    pub fn block_sizes(&self) -> Vec<usize> {
        self.annotators.iter().map(|a| self.blocks[a].len()).collect()
    }

    fn assignees(&self) -> HashMap<&str, Vec<&str>> {
        let mut map: HashMap<&str, Vec<&str>> = HashMap::new();
        for id in &self.shared {
            map.insert(id, self.annotators.iter().map(String::as_str).collect());
        }
        for (annotator, block) in &self.blocks {
            for id in block {
                map.entry(id).or_default().push(annotator);
            }
        }
        map
    }
}

/// Gives the first `overlap` items to everyone and deals the rest out in
/// contiguous blocks whose sizes differ by at most one (earlier annotators
/// take the larger blocks).
pub fn assign(queue_ids: &[&str], annotators: &[String], overlap: usize) -> Result<Assignment> {
    if annotators.is_empty() {
        return Err(Error::Config("at least one annotator is required".into()));
    }
    let mut seen = std::collections::HashSet::new();
    if let Some(dup) = annotators.iter().find(|a| !seen.insert(a.as_str())) {
        return Err(Error::Config(format!("annotator {dup:?} listed twice")));
    }
    if overlap > queue_ids.len() {
        return Err(Error::Config(format!(
            "overlap {overlap} exceeds the queue length {}",
            queue_ids.len()
        )));
    }
    let shared = queue_ids[..overlap].iter().map(|s| s.to_string()).collect();
    let rest = &queue_ids[overlap..];
    let (base, extra) = (rest.len() / annotators.len(), rest.len() % annotators.len());
    let mut blocks = BTreeMap::new();
    let mut start = 0;
    for (i, annotator) in annotators.iter().enumerate() {
        let len = base + (i < extra) as usize;
        blocks.insert(
            annotator.clone(),
            rest[start..start + len].iter().map(|s| s.to_string()).collect(),
        );
        start += len;
    }
    Ok(Assignment {
        annotators: annotators.to_vec(),
        shared,
        blocks,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Correct,
    Incorrect,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    pub item_id: String,
    pub annotator: String,
    pub verdict: Verdict,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub corrected_label: Option<ClassIndex>,
    pub ts: DateTime<Utc>,
}

impl Annotation {
    /// What the annotation says the item's label should be, for comparing
    /// verdicts: `None` for "correct", the replacement otherwise.
    fn outcome(&self) -> Option<ClassIndex> {
        match self.verdict {
            Verdict::Correct => None,
            Verdict::Incorrect => self.corrected_label,
        }
    }
}

/// Latest annotation per (item, annotator); later log entries win timestamp
/// ties.
fn effective(annotations: &[Annotation]) -> BTreeMap<(&str, &str), &Annotation> {
    let mut map: BTreeMap<(&str, &str), &Annotation> = BTreeMap::new();
    for a in annotations {
        let key = (a.item_id.as_str(), a.annotator.as_str());
        match map.get(&key) {
            Some(prev) if prev.ts > a.ts => {}
            _ => {
                map.insert(key, a);
            }
        }
    }
    map
}

pub fn load_log(path: &Path) -> Result<Vec<Annotation>> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    Ok(io::read_jsonl::<Annotation>(path)?
        .into_iter()
        .map(|(_, a)| a)
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgreementReport {
    /// Shared items every annotator has reviewed.
    pub shared_items: usize,
    pub agreements: usize,
    /// `agreements / shared_items`; absent until a shared item is complete.
    pub rate: Option<f64>,
    pub per_annotator: BTreeMap<String, usize>,
}

/// Agreement over `shared` items that all `annotators` have reviewed. Two
/// verdicts agree when both say correct, or both say incorrect with the
/// same replacement label.
pub fn percent_agreement(annotations: &[Annotation], shared: &[&str], annotators: &[&str]) -> AgreementReport {
    let eff = effective(annotations);
    let mut per_annotator: BTreeMap<String, usize> = BTreeMap::new();
    for ann in eff.values() {
        *per_annotator.entry(ann.annotator.clone()).or_default() += 1;
    }
    let mut shared_items = 0;
    let mut agreements = 0;
    for item in shared {
        let outcomes: Option<Vec<Option<ClassIndex>>> = annotators
            .iter()
            .map(|a| eff.get(&(*item, *a)).map(|x| x.outcome()))
            .collect();
        if let Some(outcomes) = outcomes {
            shared_items += 1;
            if outcomes.windows(2).all(|w| w[0] == w[1]) {
                agreements += 1;
            }
        }
    }
    AgreementReport {
        shared_items,
        agreements,
        rate: (shared_items > 0).then(|| agreements as f64 / shared_items as f64),
        per_annotator,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrectionSummary {
    /// Items with a settled verdict.
    pub reviewed: usize,
    pub correct: usize,
    pub corrected: usize,
    /// Items whose annotators disagree; left unchanged.
    pub conflicts: Vec<String>,
    /// Share of settled items whose pseudo-label was judged correct.
    pub accuracy: Option<f64>,
}

/// Applies settled verdicts to `pseudo`: items judged incorrect take the
/// corrected label and origin `corrected`. Items with disagreeing verdicts
/// are listed as conflicts and left alone.
pub fn apply_corrections(pseudo: &Dataset, annotations: &[Annotation]) -> Result<(Dataset, CorrectionSummary)> {
    let mut by_item: BTreeMap<&str, Vec<&Annotation>> = BTreeMap::new();
    for ((item, _), ann) in effective(annotations) {
        if !pseudo.contains(item) {
            return Err(Rejection::UnknownItem(item.to_string()).into());
        }
        by_item.entry(item).or_default().push(ann);
    }
    let mut items = pseudo.items().to_vec();
    let mut summary = CorrectionSummary {
        reviewed: 0,
        correct: 0,
        corrected: 0,
        conflicts: Vec::new(),
        accuracy: None,
    };
    for (id, anns) in by_item {
        let outcome = anns[0].outcome();
        if anns.iter().any(|a| a.outcome() != outcome) {
            summary.conflicts.push(id.to_string());
            continue;
        }
        summary.reviewed += 1;
        match (anns[0].verdict, outcome) {
            (Verdict::Correct, _) => summary.correct += 1,
            (Verdict::Incorrect, Some(class)) => {
                if class >= pseudo.num_classes() {
                    return Err(Rejection::InvalidLabel(class).into());
                }
                let pos = pseudo.position(id).expect("checked above");
                items[pos] = Item::labeled(items[pos].post.clone(), class, Origin::Corrected);
                summary.corrected += 1;
            }
            (Verdict::Incorrect, None) => return Err(Rejection::MissingCorrection.into()),
        }
    }
    summary.accuracy = (summary.reviewed > 0).then(|| summary.correct as f64 / summary.reviewed as f64);
    Ok((Dataset::new(pseudo.shared_schema(), items)?, summary))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Status {
    Pending,
    Done,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemProgress {
    pub item_id: String,
    pub status: Status,
    pub done: usize,
    pub total: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stats {
    pub total: usize,
    pub done: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub agreement_rate: Option<f64>,
    pub shared_done: usize,
    pub per_annotator: BTreeMap<String, usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Conflict {
    pub item_id: String,
    pub annotations: Vec<Annotation>,
}

/// Queue, assignment and annotation log of one review round.
///
/// Mutation goes through [`ReviewStore::submit`] only; callers sharing a
/// store across threads must serialise access to it.
#[derive(Debug)]
pub struct ReviewStore {
    num_classes: usize,
    queue: Vec<QueueItem>,
    index: HashMap<String, usize>,
    assignment: Assignment,
    assignees: HashMap<String, Vec<String>>,
    log: Vec<Annotation>,
    log_path: Option<PathBuf>,
}

impl ReviewStore {
    pub fn new(schema: &LabelSchema, queue: Vec<QueueItem>, assignment: Assignment) -> Result<Self> {
        let index: HashMap<String, usize> = queue.iter().enumerate().map(|(i, q)| (q.id.clone(), i)).collect();
        if index.len() != queue.len() {
            return Err(Error::Invalid("duplicate ids in review queue".into()));
        }
        let assignees: HashMap<String, Vec<String>> = assignment
            .assignees()
            .into_iter()
            .map(|(k, v)| (k.to_string(), v.into_iter().map(String::from).collect()))
            .collect();
        if let Some(id) = assignees.keys().find(|id| !index.contains_key(*id)) {
            return Err(Error::Invalid(format!("assigned item {id:?} is not in the queue")));
        }
        if let Some(q) = queue.iter().find(|q| !assignees.contains_key(&q.id)) {
            return Err(Error::Invalid(format!("queue item {:?} is not assigned", q.id)));
        }
        Ok(Self {
            num_classes: schema.num_classes(),
            queue,
            index,
            assignment,
            assignees,
            log: Vec::new(),
            log_path: None,
        })
    }

    /// Replays the log at `path` (if present) and appends future
    /// submissions to it.
    pub fn with_log(mut self, path: &Path) -> Result<Self> {
        for annotation in load_log(path)? {
            self.validate(&annotation)?;
            self.log.push(annotation);
        }
        self.log_path = Some(path.to_path_buf());
        Ok(self)
    }

    pub fn queue(&self) -> &[QueueItem] {
        &self.queue
    }

    pub fn assignment(&self) -> &Assignment {
        &self.assignment
    }

    pub fn annotations(&self) -> &[Annotation] {
        &self.log
    }

    pub fn item(&self, id: &str) -> Option<&QueueItem> {
        self.index.get(id).map(|&i| &self.queue[i])
    }

    fn validate(&self, a: &Annotation) -> Result<(), Rejection> {
        let item = self
            .item(&a.item_id)
            .ok_or_else(|| Rejection::UnknownItem(a.item_id.clone()))?;
        if !self.assignees[&a.item_id].contains(&a.annotator) {
            return Err(Rejection::NotAssigned {
                item: a.item_id.clone(),
                annotator: a.annotator.clone(),
            });
        }
        match (a.verdict, a.corrected_label) {
            (Verdict::Incorrect, None) => Err(Rejection::MissingCorrection),
            (Verdict::Correct, Some(_)) => Err(Rejection::UnexpectedCorrection),
            (Verdict::Incorrect, Some(c)) if c >= self.num_classes => Err(Rejection::InvalidLabel(c)),
            (Verdict::Incorrect, Some(c)) if c == item.label => Err(Rejection::UnchangedLabel(c)),
            _ => Ok(()),
        }
    }

    pub fn submit(&mut self, annotation: Annotation) -> Result<ItemProgress> {
        self.validate(&annotation)?;
        if let Some(path) = &self.log_path {
            let mut line = serde_json::to_vec(&annotation)?;
            line.push(b'\n');
            let mut file = OpenOptions::new()
                .create(true)
                .append(true)
                .open(path)
                .map_err(|e| Error::io(path, e))?;
            file.write_all(&line)
                .and_then(|_| file.sync_data())
                .map_err(|e| Error::io(path, e))?;
        }
        let id = annotation.item_id.clone();
        self.log.push(annotation);
        Ok(self.progress(&id).expect("validated item"))
    }

    pub fn progress(&self, id: &str) -> Option<ItemProgress> {
        let assignees = self.assignees.get(id)?;
        let eff = effective(&self.log);
        let done = assignees.iter().filter(|a| eff.contains_key(&(id, a.as_str()))).count();
        Some(ItemProgress {
            item_id: id.to_string(),
            status: if done == assignees.len() {
                Status::Done
            } else {
                Status::Pending
            },
            done,
            total: assignees.len(),
        })
    }

    /// Items assigned to `annotator` that they have not yet reviewed, in
    /// queue order.
    pub fn pending_for(&self, annotator: &str) -> Vec<&QueueItem> {
        let eff = effective(&self.log);
        let mut items: Vec<&QueueItem> = self
            .assignment
            .items_for(annotator)
            .into_iter()
            .filter(|id| !eff.contains_key(&(*id, annotator)))
            .filter_map(|id| self.item(id))
            .collect();
        items.sort_by_key(|q| self.index[&q.id]);
        items
    }

    pub fn agreement(&self) -> AgreementReport {
        let shared: Vec<&str> = self.assignment.shared.iter().map(String::as_str).collect();
        let annotators: Vec<&str> = self.assignment.annotators.iter().map(String::as_str).collect();
        percent_agreement(&self.log, &shared, &annotators)
    }

    pub fn stats(&self) -> Stats {
        let done = self
            .queue
            .iter()
            .filter(|q| self.progress(&q.id).is_some_and(|p| p.status == Status::Done))
            .count();
        let agreement = self.agreement();
        Stats {
            total: self.queue.len(),
            done,
            agreement_rate: agreement.rate,
            shared_done: agreement.shared_items,
            per_annotator: agreement.per_annotator,
        }
    }

    /// Fully reviewed items whose annotators disagree.
    pub fn conflicts(&self) -> Vec<Conflict> {
        let eff = effective(&self.log);
        let mut out = Vec::new();
        for q in &self.queue {
            let anns: Vec<&Annotation> = self.assignees[&q.id]
                .iter()
                .filter_map(|a| eff.get(&(q.id.as_str(), a.as_str())).copied())
                .collect();
            if anns.len() > 1 && anns.iter().any(|a| a.outcome() != anns[0].outcome()) {
                out.push(Conflict {
                    item_id: q.id.clone(),
                    annotations: anns.into_iter().cloned().collect(),
                });
            }
        }
        out
    }
}

pub fn save_queue(path: &Path, queue: &[QueueItem]) -> Result<()> {
    io::write_jsonl(path, queue)
}

pub fn load_queue(path: &Path) -> Result<Vec<QueueItem>> {
    Ok(io::read_jsonl::<QueueItem>(path)?.into_iter().map(|(_, q)| q).collect())
}
