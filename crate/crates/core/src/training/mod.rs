//! Adaptation of a frozen toy base model, KNN evaluation of its embeddings
//! and the multi-seed variant comparison.

mod checkpoint;
mod compare;
mod data;
mod gradcheck;
mod knn;
mod model;
mod optim;
mod train;

pub use checkpoint::{load_train_state, save_train_state, TrainStateManifest};
pub use compare::{
    knn_accuracies, run_comparison, thread_pool, welch_p_value, ComparisonConfig, ComparisonTable, SeedContext,
    VariantResult, VariantRow, THREADS_ENV,
};
pub use data::{Cue, Sample, Split, SyntheticTaskSet, TaskSetSpec, TaskTransform};
pub use gradcheck::{gradient_check, GradCheckEntry};
pub use knn::{knn_evaluate, Embedded};
pub use model::{
    cross_entropy, forward_adapted, forward_reference, forward_reference_batch, AdaptationSet, AdaptedLayer, BaseModel,
    ExtractorSpec, MappingSpec, ModelGeometry, Route, SeedMode, VariantKind, VariantSpec,
};
pub use optim::{OptimizerConfig, OptimizerState};
pub use train::{
    batch_loss, embed_split, mean_loss, pretrain_base, train, Precision, PretrainConfig, TrainConfig,
    TrainReport, TrainState,
};

use thiserror::Error;

use crate::adapters::AdapterError;
use crate::autograd::TapeError;
use crate::checkpoint::CheckpointError;
use crate::meta_net::MetaNetError;
use crate::tensor::TensorError;

#[derive(Debug, Error)]
pub enum TrainingError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Tape(#[from] TapeError),
    #[error(transparent)]
    Adapter(#[from] AdapterError),
    #[error(transparent)]
    MetaNet(#[from] MetaNetError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("training diverged at epoch {epoch}, step {step}: loss is {loss}")]
    Divergence { epoch: usize, step: u64, loss: f64 },
    #[error("{0} is empty")]
    Empty(&'static str),
}
