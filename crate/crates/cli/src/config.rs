//! Pipeline configuration: a JSON file whose fields command-line flags
//! override.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::bail;
use pseudolabel::classifier::ClassifierConfig;
use pseudolabel::featurizer::FeaturizerConfig;
use pseudolabel::synth::SyntheticSpec;
use pseudolabel::{BackendConfig, BackendSpec, Error, LabelSchema, SelfTrainConfig};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub labeled: Option<PathBuf>,
    pub unlabeled: Option<PathBuf>,
    pub test: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReviewConfig {
    pub annotators: Vec<String>,
    pub overlap: usize,
}

impl Default for ReviewConfig {
    fn default() -> Self {
        Self {
            annotators: vec!["a1".into(), "a2".into()],
            overlap: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Class names in index order.
    pub schema: Vec<String>,
    pub backend: BackendSpec,
    pub classifier: ClassifierConfig,
    pub featurizer: FeaturizerConfig,
    pub selftrain: SelfTrainConfig,
    pub runs: usize,
    pub folds: usize,
    pub seed: u64,
    pub parallel: usize,
    pub review: ReviewConfig,
    pub synth: SyntheticSpec,
    pub paths: Paths,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            schema: LabelSchema::risk_levels().names(),
            backend: BackendSpec::Builtin,
            classifier: ClassifierConfig::default(),
            featurizer: FeaturizerConfig::default(),
            selftrain: SelfTrainConfig::default(),
            runs: 5,
            folds: 5,
            seed: 0,
            parallel: 1,
            review: ReviewConfig::default(),
            synth: SyntheticSpec::default(),
            paths: Paths::default(),
        }
    }
}

/// Flags shared by every stage that override configuration fields.
#[derive(Debug, Clone, Default, clap::Args)]
pub struct Overrides {
    /// JSON pipeline configuration file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Base seed for folds, runs and training.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Upper bound on concurrent runs or folds.
    #[arg(long, global = true)]
    pub parallel: Option<usize>,
}

impl PipelineConfig {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))
            .map_err(Into::into)
    }

    pub fn resolve(overrides: &Overrides) -> anyhow::Result<Self> {
        let mut config = match &overrides.config {
            Some(path) => Self::load(path)?,
            None => Self::default(),
        };
        if let Some(seed) = overrides.seed {
            config.seed = seed;
        }
        if let Some(parallel) = overrides.parallel {
            config.parallel = parallel;
        }
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> pseudolabel::Result<()> {
        self.backend_config().validate()?;
        self.selftrain.validate()?;
        if self.runs == 0 || self.folds < 2 || self.parallel == 0 {
            return Err(Error::Config("runs and parallel must be ≥ 1 and folds ≥ 2".into()));
        }
        LabelSchema::new(&self.schema).map(|_| ())
    }

    pub fn schema(&self) -> pseudolabel::Result<Arc<LabelSchema>> {
        LabelSchema::new(&self.schema).map(Arc::new)
    }

    pub fn backend_config(&self) -> BackendConfig {
        BackendConfig {
            backend: self.backend.clone(),
            classifier: self.classifier.clone(),
            featurizer: self.featurizer.clone(),
        }
    }
}

/// `flag`, else the configured path, else a usage error naming `what`.
pub fn require(flag: &Option<PathBuf>, configured: &Option<PathBuf>, what: &str) -> anyhow::Result<PathBuf> {
    match flag.as_ref().or(configured.as_ref()) {
        Some(p) => Ok(p.clone()),
        None => bail!(Error::Config(format!(
            "no {what} path given (flag or config paths.{what})"
        ))),
    }
}
