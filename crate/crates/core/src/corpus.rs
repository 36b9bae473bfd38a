//! Label schema, posts and datasets, their on-disk formats, and stratified
//! fold construction.
//!
//! JSONL is the canonical format: one object per line with `id`, `text`,
//! an optional `label` (display name, or class index on input), an optional
//! `origin` and an optional dense `features` vector. CSV with an
//! `id,text,label` header is accepted for ingestion only.

use std::collections::HashMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io;

/// Index of a class within a [`LabelSchema`].
pub type ClassIndex = usize;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RiskLevel {
    pub index: ClassIndex,
    pub name: String,
}

/// Ordered list of classes. Class indices are positions in this list.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelSchema {
    levels: Vec<RiskLevel>,
}

impl LabelSchema {
    pub fn new<S: AsRef<str>>(names: &[S]) -> Result<Self> {
        if names.len() < 2 {
            return Err(Error::Schema(format!(
                "at least 2 classes required, got {}",
                names.len()
            )));
        }
        let mut seen = HashMap::new();
        let mut levels = Vec::with_capacity(names.len());
        for (index, name) in names.iter().enumerate() {
            let name = name.as_ref().trim();
            if name.is_empty() {
                return Err(Error::Schema(format!("class {index} has an empty name")));
            }
            if seen.insert(name.to_lowercase(), index).is_some() {
                return Err(Error::Schema(format!("duplicate class name {name:?}")));
            }
            levels.push(RiskLevel {
                index,
                name: name.to_string(),
            });
        }
        Ok(Self { levels })
    }

    /// The four suicide risk levels, least to most severe.
    pub fn risk_levels() -> Self {
        Self::new(&["Indicator", "Ideation", "Behavior", "Attempt"]).expect("static schema")
    }

    pub fn num_classes(&self) -> usize {
        self.levels.len()
    }

    pub fn levels(&self) -> &[RiskLevel] {
        &self.levels
    }

    pub fn names(&self) -> Vec<String> {
        self.levels.iter().map(|l| l.name.clone()).collect()
    }

    pub fn name(&self, class: ClassIndex) -> &str {
        &self.levels[class].name
    }

    /// Resolves a label by case-insensitive display name, or by class index
    /// written as an integer.
    pub fn parse_label(&self, raw: &str) -> Option<ClassIndex> {
        let raw = raw.trim();
        let lowered = raw.to_lowercase();
        if let Some(level) = self.levels.iter().find(|l| l.name.to_lowercase() == lowered) {
            return Some(level.index);
        }
        raw.parse::<usize>().ok().filter(|&i| i < self.levels.len())
    }
}

impl Default for LabelSchema {
    fn default() -> Self {
        Self::risk_levels()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Origin {
    GroundTruth,
    Pseudo,
    Corrected,
}

impl fmt::Display for Origin {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Origin::GroundTruth => "ground-truth",
            Origin::Pseudo => "pseudo",
            Origin::Corrected => "corrected",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Post {
    pub id: String,
    pub text: String,
    /// Precomputed dense embedding; when present the featurizer is bypassed.
    pub features: Option<Vec<f64>>,
}

impl Post {
    pub fn new(id: impl Into<String>, text: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            text: text.into(),
            features: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Label {
    pub class: ClassIndex,
    pub origin: Origin,
}

/// A post with an optional label.
#[derive(Debug, Clone, PartialEq)]
pub struct Item {
    pub post: Post,
    pub label: Option<Label>,
}

impl Item {
    pub fn unlabeled(post: Post) -> Self {
        Self { post, label: None }
    }

    pub fn labeled(post: Post, class: ClassIndex, origin: Origin) -> Self {
        Self {
            post,
            label: Some(Label { class, origin }),
        }
    }

    pub fn id(&self) -> &str {
        &self.post.id
    }

    pub fn class(&self) -> Option<ClassIndex> {
        self.label.map(|l| l.class)
    }
}

/// An immutable collection of items with unique ids under one schema.
#[derive(Debug, Clone)]
pub struct Dataset {
    schema: Arc<LabelSchema>,
    items: Vec<Item>,
    index: HashMap<String, usize>,
}

impl PartialEq for Dataset {
    fn eq(&self, other: &Self) -> bool {
        self.schema == other.schema && self.items == other.items
    }
}

impl Dataset {
    pub fn new(schema: Arc<LabelSchema>, items: Vec<Item>) -> Result<Self> {
        let k = schema.num_classes();
        let mut index = HashMap::with_capacity(items.len());
        for (i, item) in items.iter().enumerate() {
            if item.post.id.is_empty() {
                return Err(Error::Invalid(format!("item {i} has an empty id")));
            }
            if let Some(label) = item.label {
                if label.class >= k {
                    return Err(Error::UnknownLabel {
                        record: item.post.id.clone(),
                        label: label.class.to_string(),
                    });
                }
            }
            if let Some(f) = &item.post.features {
                if f.iter().any(|v| !v.is_finite()) {
                    return Err(Error::Invalid(format!(
                        "item {:?} has non-finite features",
                        item.post.id
                    )));
                }
            }
            if index.insert(item.post.id.clone(), i).is_some() {
                return Err(Error::DuplicateId(item.post.id.clone()));
            }
        }
        Ok(Self { schema, items, index })
    }

    pub fn empty(schema: Arc<LabelSchema>) -> Self {
        Self {
            schema,
            items: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn schema(&self) -> &LabelSchema {
        &self.schema
    }

    pub fn shared_schema(&self) -> Arc<LabelSchema> {
        Arc::clone(&self.schema)
    }

    pub fn num_classes(&self) -> usize {
        self.schema.num_classes()
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn items(&self) -> &[Item] {
        &self.items
    }

    pub fn into_items(self) -> Vec<Item> {
        self.items
    }

    pub fn get(&self, id: &str) -> Option<&Item> {
        self.index.get(id).map(|&i| &self.items[i])
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub fn contains(&self, id: &str) -> bool {
        self.index.contains_key(id)
    }

    pub fn ids(&self) -> Vec<&str> {
        self.items.iter().map(|i| i.id()).collect()
    }

    /// Labels of every item; fails on the first unlabeled one.
    pub fn labels(&self) -> Result<Vec<ClassIndex>> {
        self.items
            .iter()
            .map(|i| i.class().ok_or_else(|| Error::Unlabeled(i.post.id.clone())))
            .collect()
    }

    pub fn class_counts(&self) -> Result<Vec<usize>> {
        let mut counts = vec![0; self.num_classes()];
        for label in self.labels()? {
            counts[label] += 1;
        }
        Ok(counts)
    }

    /// Items at `positions`, in that order.
    pub fn subset(&self, positions: &[usize]) -> Self {
        let items: Vec<Item> = positions.iter().map(|&i| self.items[i].clone()).collect();
        let index = items
            .iter()
            .enumerate()
            .map(|(i, it)| (it.post.id.clone(), i))
            .collect();
        Self {
            schema: Arc::clone(&self.schema),
            items,
            index,
        }
    }

    /// Same posts with every label dropped.
    pub fn without_labels(&self) -> Self {
        let items = self.items.iter().map(|i| Item::unlabeled(i.post.clone())).collect();
        Self {
            schema: Arc::clone(&self.schema),
            items,
            index: self.index.clone(),
        }
    }

    /// Concatenation of `self` and `other`; ids must be disjoint.
    pub fn merge(&self, other: &Dataset) -> Result<Self> {
        if self.schema != other.schema {
            return Err(Error::Schema("cannot merge datasets with different schemas".into()));
        }
        let mut items = self.items.clone();
        items.extend(other.items.iter().cloned());
        Self::new(Arc::clone(&self.schema), items)
    }

    pub fn load(path: &Path, format: Format, schema: Arc<LabelSchema>) -> Result<Self> {
        let items = match format {
            Format::Jsonl => parse_jsonl_items(path, &io::read_to_string(path)?, &schema)?,
            Format::Csv => parse_csv_items(path, &schema)?,
        };
        if items.is_empty() {
            return Err(Error::NoRecords {
                path: path.to_path_buf(),
            });
        }
        Self::new(schema, items)
    }

    /// Loads a dataset, picking the format from the file extension.
    pub fn load_auto(path: &Path, schema: Arc<LabelSchema>) -> Result<Self> {
        Self::load(path, Format::from_path(path), schema)
    }

    pub fn to_jsonl(&self) -> Result<Vec<u8>> {
        io::to_jsonl(self.items.iter().map(|item| JsonRecord::from_item(item, &self.schema)))
    }

    pub fn save(&self, path: &Path, format: Format) -> Result<()> {
        match format {
            Format::Jsonl => io::write_atomic(path, &self.to_jsonl()?),
            Format::Csv => Err(Error::Config("CSV is supported for ingestion only".into())),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Format {
    Jsonl,
    Csv,
}

impl Format {
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some(ext) if ext.eq_ignore_ascii_case("csv") => Format::Csv,
            _ => Format::Jsonl,
        }
    }
}

impl FromStr for Format {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "jsonl" => Ok(Format::Jsonl),
            "csv" => Ok(Format::Csv),
            other => Err(Error::Config(format!("unknown format {other:?}"))),
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct JsonRecord {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    id: Option<String>,
    text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    label: Option<serde_json::Value>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    origin: Option<Origin>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    features: Option<Vec<f64>>,
}

impl JsonRecord {
    fn from_item(item: &Item, schema: &LabelSchema) -> Self {
        Self {
            id: Some(item.post.id.clone()),
            text: item.post.text.clone(),
            label: item
                .label
                .map(|l| serde_json::Value::String(schema.name(l.class).to_string())),
            origin: item.label.map(|l| l.origin),
            features: item.post.features.clone(),
        }
    }
}

fn resolve_label(schema: &LabelSchema, raw: &serde_json::Value, record: &str) -> Result<Option<ClassIndex>> {
    let unknown = || Error::UnknownLabel {
        record: record.to_string(),
        label: raw.to_string().trim_matches('"').to_string(),
    };
    match raw {
        serde_json::Value::Null => Ok(None),
        serde_json::Value::String(s) if s.trim().is_empty() => Ok(None),
        serde_json::Value::String(s) => schema.parse_label(s).map(Some).ok_or_else(unknown),
        serde_json::Value::Number(n) => n
            .as_u64()
            .map(|v| v as usize)
            .filter(|&v| v < schema.num_classes())
            .map(Some)
            .ok_or_else(unknown),
        _ => Err(unknown()),
    }
}

fn parse_jsonl_items(path: &Path, contents: &str, schema: &LabelSchema) -> Result<Vec<Item>> {
    let records: Vec<(usize, JsonRecord)> = io::parse_jsonl(path, contents)?;
    records
        .into_iter()
        .enumerate()
        .map(|(n, (line, rec))| {
            let id = rec.id.unwrap_or_else(|| format!("row{n}"));
            let record = format!("{}:{line} ({id})", path.display());
            let class = match &rec.label {
                Some(raw) => resolve_label(schema, raw, &record)?,
                None => None,
            };
            let post = Post {
                id,
                text: rec.text,
                features: rec.features,
            };
            Ok(match class {
                Some(c) => Item::labeled(post, c, rec.origin.unwrap_or(Origin::GroundTruth)),
                None => Item::unlabeled(post),
            })
        })
        .collect()
}

fn parse_csv_items(path: &Path, schema: &LabelSchema) -> Result<Vec<Item>> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    let headers = reader.headers().map_err(|e| csv_error(path, e))?.clone();
    let column = |name: &str| headers.iter().position(|h| h.trim().eq_ignore_ascii_case(name));
    let text_col = column("text").ok_or_else(|| Error::MalformedRow {
        path: path.to_path_buf(),
        line: 1,
        message: "header has no `text` column".into(),
    })?;
    let id_col = column("id");
    let label_col = column("label");

    let mut items = Vec::new();
    for (n, row) in reader.records().enumerate() {
        let row = row.map_err(|e| csv_error(path, e))?;
        let line = row.position().map(|p| p.line() as usize).unwrap_or(n + 2);
        let field = |col: Option<usize>| col.and_then(|c| row.get(c)).map(str::to_string);
        let id = field(id_col)
            .filter(|s| !s.is_empty())
            .unwrap_or_else(|| format!("row{n}"));
        let text = field(Some(text_col)).ok_or_else(|| Error::MalformedRow {
            path: path.to_path_buf(),
            line,
            message: "missing text field".into(),
        })?;
        let record = format!("{}:{line} ({id})", path.display());
        let class = match field(label_col) {
            Some(raw) => resolve_label(schema, &serde_json::Value::String(raw), &record)?,
            None => None,
        };
        let post = Post::new(id, text);
        items.push(match class {
            Some(c) => Item::labeled(post, c, Origin::GroundTruth),
            None => Item::unlabeled(post),
        });
    }
    Ok(items)
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    let line = e.position().map(|p| p.line() as usize).unwrap_or(0);
    match e.into_kind() {
        csv::ErrorKind::Io(source) => Error::io(path, source),
        other => Error::MalformedRow {
            path: path.to_path_buf(),
            line,
            message: format!("{other:?}"),
        },
    }
}

/// Fold index per item, parallel to the dataset's item order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FoldAssignment {
    k: usize,
    folds: Vec<usize>,
}

impl FoldAssignment {
    pub fn k(&self) -> usize {
        self.k
    }

    pub fn fold_of(&self, position: usize) -> usize {
        self.folds[position]
    }

    pub fn folds(&self) -> &[usize] {
        &self.folds
    }

    /// Positions outside and inside `fold`, each in dataset order.
    pub fn split(&self, fold: usize) -> (Vec<usize>, Vec<usize>) {
        let (mut train, mut val) = (Vec::new(), Vec::new());
        for (pos, &f) in self.folds.iter().enumerate() {
            if f == fold {
                val.push(pos);
            } else {
                train.push(pos);
            }
        }
        (train, val)
    }

    pub fn fold_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k];
        for &f in &self.folds {
            sizes[f] += 1;
        }
        sizes
    }
}

/// Seeded stratified k-fold split.
///
/// Each class is shuffled and dealt round-robin over the folds. The deal for
/// a class starts where the previous class stopped, so per-class fold counts
/// differ by at most one and total fold sizes do too. Classes absent from the
/// dataset are ignored.
pub fn stratified_kfold(dataset: &Dataset, k: usize, seed: u64) -> Result<FoldAssignment> {
    if k < 2 {
        return Err(Error::Config(format!("fold count must be at least 2, got {k}")));
    }
    let labels = dataset.labels()?;
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); dataset.num_classes()];
    for (pos, &label) in labels.iter().enumerate() {
        by_class[label].push(pos);
    }
    for (class, members) in by_class.iter().enumerate() {
        if !members.is_empty() && members.len() < k {
            return Err(Error::FoldsExceedClass {
                class: dataset.schema().name(class).to_string(),
                count: members.len(),
                k,
            });
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut folds = vec![0; labels.len()];
    let mut next = 0;
    for members in &mut by_class {
        members.shuffle(&mut rng);
        for &pos in members.iter() {
            folds[pos] = next;
            next = (next + 1) % k;
        }
    }
    Ok(FoldAssignment { k, folds })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn schema() -> Arc<LabelSchema> {
        Arc::new(LabelSchema::risk_levels())
    }

    fn labeled(counts: &[usize]) -> Dataset {
        let mut items = Vec::new();
        for (class, &n) in counts.iter().enumerate() {
            for j in 0..n {
                items.push(Item::labeled(
                    Post::new(format!("c{class}-{j}"), "text"),
                    class,
                    Origin::GroundTruth,
                ));
            }
        }
        Dataset::new(schema(), items).unwrap()
    }

    fn write(contents: &str, ext: &str) -> (tempfile::TempDir, std::path::PathBuf) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join(format!("data.{ext}"));
        std::fs::write(&path, contents).unwrap();
        (dir, path)
    }

    #[test]
    fn label_parsing_is_case_insensitive_and_accepts_indices() {
        let s = LabelSchema::risk_levels();
        assert_eq!(s.parse_label("attempt"), Some(3));
        assert_eq!(s.parse_label("IDEATION"), Some(1));
        assert_eq!(s.parse_label("2"), Some(2));
        assert_eq!(s.parse_label("4"), None);
        assert_eq!(s.parse_label("Panic"), None);
    }

    #[test]
    fn schema_needs_two_distinct_classes() {
        assert!(LabelSchema::new(&["only"]).is_err());
        assert!(LabelSchema::new(&["a", "A"]).is_err());
    }

    #[test]
    fn empty_file_has_no_records() {
        let (_d, path) = write("", "jsonl");
        let err = Dataset::load(&path, Format::Jsonl, schema()).unwrap_err();
        assert!(err.to_string().contains("no records"));
    }

    #[test]
    fn unknown_label_names_row_and_label() {
        let (_d, path) = write(
            "{\"id\":\"a\",\"text\":\"x\",\"label\":\"Ideation\"}\n{\"id\":\"b\",\"text\":\"y\",\"label\":\"Panic\"}\n",
            "jsonl",
        );
        let err = Dataset::load(&path, Format::Jsonl, schema()).unwrap_err().to_string();
        assert!(err.contains(":2 (b)"), "{err}");
        assert!(err.contains("Panic"), "{err}");
    }

    #[test]
    fn duplicate_ids_are_rejected() {
        let (_d, path) = write(
            "{\"id\":\"a\",\"text\":\"x\"}\n{\"id\":\"a\",\"text\":\"y\"}\n",
            "jsonl",
        );
        assert!(matches!(
            Dataset::load(&path, Format::Jsonl, schema()),
            Err(Error::DuplicateId(id)) if id == "a"
        ));
    }

    #[test]
    fn missing_ids_are_synthesized_from_record_index() {
        let (_d, path) = write("{\"text\":\"x\"}\n\n{\"text\":\"y\",\"label\":0}\n", "jsonl");
        let ds = Dataset::load(&path, Format::Jsonl, schema()).unwrap();
        assert_eq!(ds.ids(), vec!["row0", "row1"]);
        assert_eq!(ds.items()[1].class(), Some(0));
        assert_eq!(ds.items()[0].class(), None);
    }

    #[test]
    fn csv_ingestion() {
        let (_d, path) = write("id,text,label\np1,\"hello, world\",Behavior\np2,second,\n", "csv");
        let ds = Dataset::load_auto(&path, schema()).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.items()[0].post.text, "hello, world");
        assert_eq!(ds.items()[0].class(), Some(2));
        assert_eq!(ds.items()[1].class(), None);
        assert!(ds.save(&path, Format::Csv).is_err());
    }

    #[test]
    fn class_counts_examples() {
        assert_eq!(labeled(&[0, 0, 0, 1]).class_counts().unwrap(), vec![0, 0, 0, 1]);
        assert_eq!(labeled(&[10, 10, 10, 10]).class_counts().unwrap(), vec![10; 4]);
        let unl = Dataset::new(schema(), vec![Item::unlabeled(Post::new("u", "t"))]).unwrap();
        assert!(matches!(unl.class_counts(), Err(Error::Unlabeled(_))));
    }

    #[test]
    fn kfold_on_reference_counts() {
        let ds = labeled(&[129, 190, 140, 41]);
        let folds = stratified_kfold(&ds, 5, 7).unwrap();
        assert_eq!(folds.fold_sizes(), vec![100; 5]);
        let labels = ds.labels().unwrap();
        let mut attempt = vec![0; 5];
        for (pos, &l) in labels.iter().enumerate() {
            if l == 3 {
                attempt[folds.fold_of(pos)] += 1;
            }
        }
        attempt.sort();
        assert_eq!(attempt, vec![8, 8, 8, 8, 9]);
        assert_eq!(folds, stratified_kfold(&ds, 5, 7).unwrap());
    }

    #[test]
    fn kfold_rejects_k_above_smallest_class() {
        let ds = labeled(&[1, 1, 1, 1]);
        assert!(matches!(
            stratified_kfold(&ds, 2, 0),
            Err(Error::FoldsExceedClass { count: 1, k: 2, .. })
        ));
        assert!(stratified_kfold(&labeled(&[5, 5, 5, 5]), 1, 0).is_err());
    }

    #[test]
    fn merge_sizes_and_collisions() {
        let a = labeled(&[2, 2, 2, 2]);
        assert_eq!(a.merge(&Dataset::empty(schema())).unwrap(), a);
        assert!(matches!(a.merge(&a), Err(Error::DuplicateId(_))));
    }
}
