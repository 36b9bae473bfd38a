//! Semi-supervised pseudo-labeling for imbalanced text classification.
//!
//! The pipeline: self-train a probabilistic classifier with Stratified
//! Confidence Sampling ([`selftrain`]), repeat over rotating validation folds
//! and combine the runs by majority vote ([`ensemble`]), send non-unanimous
//! items to human reviewers ([`review`]), and compare supervised against
//! pseudo-label augmented training with cross-validated metrics ([`eval`]).

pub mod classifier;
pub mod corpus;
pub mod ensemble;
pub mod error;
pub mod eval;
pub mod featurizer;
pub mod io;
pub mod review;
pub mod selftrain;
pub mod synth;

pub use classifier::{Backend, BackendConfig, BackendFactory, BackendSpec, ClassifierConfig, ProbMatrix};
pub use corpus::{ClassIndex, Dataset, Item, LabelSchema, Origin, Post};
pub use error::{Error, ErrorKind, Result};
pub use selftrain::{AcquisitionResult, SelfTrainConfig};
