//! Synthetic data generation, training, ablations and cross-validation.

pub mod checkpoint;
pub mod crossval;
pub mod predictions;
pub mod synth;
pub mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use crossval::{crossval, CrossvalReport, FoldResult};
pub use predictions::write_predictions;
pub use synth::{generate_synthetic, SynthConfig, SynthDataset, SynthError};
pub use train::{
    ablation_study, affected_metrics, evaluate, prepare, train, train_prepared, AblationStudy, ExperimentConfig,
    Optimizer, PreparedData, RunManifest, RunOutcome, TrainConfig,
};

use crate::dataset_io::{DatasetError, FoldError};
use crate::losses::LossError;
use crate::metrics::MetricsError;
use crate::toy_model::ModelError;
use crate::vocab::VocabError;

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("data: {0}")]
    Data(String),
    #[error("io: {0}")]
    Io(String),
    #[error("loss became non-finite at step {step}")]
    Diverged { step: usize },
    #[error("no fold {0} in the fold config")]
    NoSuchFold(u32),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Folds(#[from] FoldError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Vocab(#[from] VocabError),
}
