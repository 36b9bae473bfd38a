//! One function per subcommand. Each reads its inputs, runs a stage of the
//! pipeline and writes its outputs atomically under `--out`.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::Args;
use log::info;
use pseudolabel::classifier::external::serve;
use pseudolabel::classifier::BuiltinBackend;
use pseudolabel::ensemble::{
    cohen_kappa, load_consensus, run_ensemble, save_consensus, unanimity_histogram, votes_from_records, EnsembleConfig,
    UnanimityHistogram,
};
use pseudolabel::eval::{cross_validate, CvConfig, CvReport};
use pseudolabel::review::{apply_corrections, assign, build_queue, load_log, save_queue, CorrectionSummary};
use pseudolabel::selftrain::StopReason;
use pseudolabel::synth::generate;
use pseudolabel::{ensemble, io, Dataset, Error, Item, LabelSchema, Origin};
use serde::Serialize;

use crate::config::{require, Overrides, PipelineConfig};

fn create_dir(dir: &Path) -> pseudolabel::Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> pseudolabel::Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    io::write_atomic(path, &bytes)
}

fn load(path: &Path, schema: &Arc<LabelSchema>) -> pseudolabel::Result<Dataset> {
    Dataset::load_auto(path, Arc::clone(schema))
}

/// Loads a dataset whose every item must carry a label.
fn load_labeled(path: &Path, schema: &Arc<LabelSchema>) -> pseudolabel::Result<Dataset> {
    let data = load(path, schema)?;
    data.labels()?;
    Ok(data)
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Directory receiving labeled, unlabeled, test and truth files.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Writes a seeded synthetic corpus. `truth.jsonl` holds the unlabeled
/// posts with their generating classes.
pub fn synth(args: &SynthArgs, config: &PipelineConfig, overrides: &Overrides) -> anyhow::Result<()> {
    let out = require(&args.out, &config.paths.out, "out")?;
    let mut spec = config.synth.clone();
    if let Some(seed) = overrides.seed {
        spec.seed = seed;
    }
    let corpus = generate(&spec)?;
    create_dir(&out)?;
    let truth_items: Vec<Item> = corpus
        .unlabeled
        .items()
        .iter()
        .map(|i| Item::labeled(i.post.clone(), corpus.truth[i.id()], Origin::GroundTruth))
        .collect();
    let truth = Dataset::new(corpus.unlabeled.shared_schema(), truth_items)?;
    for (name, data) in [
        ("labeled.jsonl", &corpus.labeled),
        ("unlabeled.jsonl", &corpus.unlabeled),
        ("test.jsonl", &corpus.test),
        ("truth.jsonl", &truth),
    ] {
        io::write_atomic(&out.join(name), &data.to_jsonl()?)?;
    }
    info!(
        "wrote {} labeled, {} unlabeled, {} test posts to {}",
        corpus.labeled.len(),
        corpus.unlabeled.len(),
        corpus.test.len(),
        out.display()
    );
    Ok(())
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// Ground-truth labeled posts; folds are drawn from these only.
    #[arg(long)]
    pub labeled: Option<PathBuf>,
    /// Extra training data (pseudo-labeled or corrected), never validated on.
    #[arg(long)]
    pub extra: Option<PathBuf>,
    /// Held-out test set scored by every fold model.
    #[arg(long)]
    pub test: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn cv_config(config: &PipelineConfig) -> CvConfig {
    CvConfig {
        folds: config.folds,
        seed: config.seed,
        parallel: config.parallel,
    }
}

/// Cross-validates with optional extra training data; writes `report.json`
/// and `report.txt`.
pub fn evaluate(args: &EvaluateArgs, config: &PipelineConfig) -> anyhow::Result<CvReport> {
    let schema = config.schema()?;
    let labeled_path = require(&args.labeled, &config.paths.labeled, "labeled")?;
    let out = require(&args.out, &config.paths.out, "out")?;
    let labeled = load_labeled(&labeled_path, &schema)?;
    let extra = args.extra.as_deref().map(|p| load_labeled(p, &schema)).transpose()?;
    let test_path = args.test.as_ref().or(config.paths.test.as_ref());
    let test = test_path.map(|p| load_labeled(p, &schema)).transpose()?;

    let factory = config.backend_config();
    let report = cross_validate(&labeled, extra.as_ref(), test.as_ref(), &factory, &cv_config(config))?;
    create_dir(&out)?;
    write_json(&out.join("report.json"), &report)?;
    io::write_atomic(&out.join("report.txt"), report.to_table().as_bytes())?;
    info!(
        "macro-F1 {:.4} ± {:.4} over {} folds",
        report.validation.macro_f1.mean,
        report.validation.macro_f1.std,
        report.folds.len()
    );
    Ok(report)
}

#[derive(Debug, Args)]
pub struct PseudolabelArgs {
    #[arg(long)]
    pub labeled: Option<PathBuf>,
    #[arg(long)]
    pub unlabeled: Option<PathBuf>,
    /// Number of self-training runs in the ensemble.
    #[arg(long)]
    pub runs: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Serialize)]
struct RunSummary {
    run: usize,
    seed: u64,
    train_size: usize,
    iterations: usize,
    stop_reason: StopReason,
    remainder: usize,
    kappa_vs_consensus: f64,
}

#[derive(Debug, Serialize)]
struct PseudolabelSummary {
    labeled: usize,
    unlabeled: usize,
    runs: Vec<RunSummary>,
}

/// Runs the self-training ensemble; writes `votes.jsonl`,
/// `traces/run{j}.jsonl` and `summary.json`.
pub fn pseudolabel(args: &PseudolabelArgs, config: &PipelineConfig) -> anyhow::Result<()> {
    let schema = config.schema()?;
    let labeled_path = require(&args.labeled, &config.paths.labeled, "labeled")?;
    let unlabeled_path = require(&args.unlabeled, &config.paths.unlabeled, "unlabeled")?;
    let out = require(&args.out, &config.paths.out, "out")?;
    let labeled = load_labeled(&labeled_path, &schema)?;
    let unlabeled = load(&unlabeled_path, &schema)?.without_labels();
    if let Some(id) = unlabeled.ids().into_iter().find(|id| labeled.contains(id)) {
        return Err(Error::Invalid(format!(
            "{}: post {id:?} is also in the labeled set {}",
            unlabeled_path.display(),
            labeled_path.display()
        ))
        .into());
    }

    let ensemble = EnsembleConfig {
        runs: args.runs.unwrap_or(config.runs),
        base_seed: config.seed,
        parallel: config.parallel,
    };
    let factory = config.backend_config();
    let output = run_ensemble(&labeled, &unlabeled, &factory, &ensemble, &config.selftrain)?;

    create_dir(&out.join("traces"))?;
    let consensus = output.votes.consensus();
    save_consensus(&out.join("votes.jsonl"), &consensus)?;
    let kappas = output.votes.agreement_with_consensus()?;
    let mut runs = Vec::new();
    for (j, trace) in output.traces.iter().enumerate() {
        trace.save_jsonl(&out.join("traces").join(format!("run{j}.jsonl")))?;
        runs.push(RunSummary {
            run: j,
            seed: ensemble.base_seed + j as u64,
            train_size: output.training_ids[j].len(),
            iterations: trace.iterations.len(),
            stop_reason: trace.stop_reason,
            remainder: trace.remainder,
            kappa_vs_consensus: kappas[j],
        });
    }
    write_json(
        &out.join("summary.json"),
        &PseudolabelSummary {
            labeled: labeled.len(),
            unlabeled: unlabeled.len(),
            runs,
        },
    )?;
    info!("{} runs over {} unlabeled posts", ensemble.runs, unlabeled.len());
    Ok(())
}

#[derive(Debug, Args)]
pub struct VoteArgs {
    /// votes.jsonl from `pseudolabel`.
    #[arg(long)]
    pub votes: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Serialize)]
struct VoteSummary {
    items: usize,
    runs: usize,
    /// Items sent to review (unanimity below the number of runs).
    non_unanimous: usize,
    tie_broken: usize,
    histogram: UnanimityHistogram,
    /// Cohen's kappa of each run against the consensus.
    kappa_vs_consensus: Vec<f64>,
    /// Cohen's kappa between every pair of runs, keyed "i-j".
    pairwise_kappa: BTreeMap<String, f64>,
}

/// Recomputes consensus labels from raw votes; writes `consensus.jsonl`,
/// `histogram.txt` and `vote_summary.json`.
pub fn vote(args: &VoteArgs, config: &PipelineConfig) -> anyhow::Result<()> {
    let schema = config.schema()?;
    let out = require(&args.out, &config.paths.out, "out")?;
    let records = load_consensus(&args.votes)?;
    let k = schema.num_classes();
    let matrix = votes_from_records(&records, k).map_err(|e| match e {
        Error::Invalid(msg) => Error::Invalid(format!("{}: {msg}", args.votes.display())),
        other => other,
    })?;
    let consensus = matrix.consensus();
    let histogram = unanimity_histogram(&consensus, k);
    let mut pairwise_kappa = BTreeMap::new();
    for i in 0..matrix.runs {
        for j in i + 1..matrix.runs {
            let kappa = cohen_kappa(&matrix.run_labels(i), &matrix.run_labels(j), k)?;
            pairwise_kappa.insert(format!("{i}-{j}"), kappa);
        }
    }
    let summary = VoteSummary {
        items: consensus.len(),
        runs: matrix.runs,
        non_unanimous: consensus.iter().filter(|c| c.unanimity < matrix.runs).count(),
        tie_broken: consensus.iter().filter(|c| c.tie_broken).count(),
        kappa_vs_consensus: matrix.agreement_with_consensus()?,
        pairwise_kappa,
        histogram,
    };
    create_dir(&out)?;
    save_consensus(&out.join("consensus.jsonl"), &consensus)?;
    io::write_atomic(
        &out.join("histogram.txt"),
        summary.histogram.to_table(&schema.names()).as_bytes(),
    )?;
    write_json(&out.join("vote_summary.json"), &summary)?;
    info!("{} of {} items need review", summary.non_unanimous, summary.items);
    Ok(())
}

#[derive(Debug, Args)]
pub struct ApplyArgs {
    #[arg(long)]
    pub consensus: PathBuf,
    /// Unlabeled posts the consensus refers to.
    #[arg(long)]
    pub posts: Option<PathBuf>,
    /// Annotation log; a missing or empty log corrects nothing.
    #[arg(long)]
    pub annotations: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Merges reviewed verdicts into the consensus pseudo-labels; writes
/// `corrected.jsonl` and `corrections.json`.
pub fn apply(args: &ApplyArgs, config: &PipelineConfig) -> anyhow::Result<CorrectionSummary> {
    let schema = config.schema()?;
    let posts_path = require(&args.posts, &config.paths.unlabeled, "unlabeled")?;
    let out = require(&args.out, &config.paths.out, "out")?;
    let posts = load(&posts_path, &schema)?.without_labels();
    let consensus = load_consensus(&args.consensus)?;
    let pseudo = ensemble::consensus_dataset(&posts, &consensus)?;
    let annotations = load_log(&args.annotations)?;
    let (corrected, summary) = apply_corrections(&pseudo, &annotations)?;
    create_dir(&out)?;
    io::write_atomic(&out.join("corrected.jsonl"), &corrected.to_jsonl()?)?;
    write_json(&out.join("corrections.json"), &summary)?;
    info!(
        "{} reviewed, {} corrected, {} unresolved conflicts",
        summary.reviewed,
        summary.corrected,
        summary.conflicts.len()
    );
    Ok(summary)
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long)]
    pub consensus: PathBuf,
    /// Unlabeled posts supplying the text shown to annotators.
    #[arg(long)]
    pub posts: Option<PathBuf>,
    /// Directory holding queue.jsonl, assignment.json and annotations.jsonl.
    #[arg(long)]
    pub dir: PathBuf,
    /// Annotator ids, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub annotators: Option<Vec<String>>,
    /// Leading queue items every annotator reviews.
    #[arg(long)]
    pub overlap: Option<usize>,
    #[arg(long, default_value = "127.0.0.1")]
    pub bind: String,
    /// 0 picks a free port.
    #[arg(long, default_value_t = 8080)]
    pub port: u16,
    /// Directory of static UI assets served at `/`.
    #[arg(long = "static")]
    pub static_dir: Option<PathBuf>,
}

/// Builds the review store for `review-serve`, persisting the queue and the
/// assignment next to the annotation log.
pub fn review_store(args: &ServeArgs, config: &PipelineConfig) -> anyhow::Result<pseudolabel::review::ReviewStore> {
    let schema = config.schema()?;
    let posts_path = require(&args.posts, &config.paths.unlabeled, "unlabeled")?;
    let posts = load(&posts_path, &schema)?;
    let consensus = load_consensus(&args.consensus)?;
    let queue = build_queue(&consensus, &posts)?;
    let annotators = args
        .annotators
        .clone()
        .unwrap_or_else(|| config.review.annotators.clone());
    let overlap = args.overlap.unwrap_or(config.review.overlap);
    let ids: Vec<&str> = queue.iter().map(|q| q.id.as_str()).collect();
    let assignment = assign(&ids, &annotators, overlap)?;
    create_dir(&args.dir)?;
    save_queue(&args.dir.join("queue.jsonl"), &queue)?;
    write_json(&args.dir.join("assignment.json"), &assignment)?;
    info!(
        "queue of {} items; shared {}, blocks {:?}",
        queue.len(),
        assignment.shared.len(),
        assignment.block_sizes()
    );
    let store = pseudolabel::review::ReviewStore::new(&schema, queue, assignment)?;
    Ok(store.with_log(&args.dir.join("annotations.jsonl"))?)
}

/// Serves the built-in backend over the JSON-lines protocol on stdin and
/// stdout, for use as an external backend command.
pub fn backend(config: &PipelineConfig) -> anyhow::Result<()> {
    let featurizer = config.featurizer.clone();
    let stdin = std::io::stdin().lock();
    let stdout = std::io::stdout().lock();
    serve(stdin, stdout, |classifier| {
        Box::new(BuiltinBackend::new(classifier, featurizer.clone()))
    })?;
    Ok(())
}
