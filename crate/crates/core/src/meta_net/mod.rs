//! Per-input parameter generation: a frozen feature extractor followed by an
//! MLP mapping net that emits the seed `c` (length `R`) or `C` (`R×R`).

mod checkpoint;
mod extractor;
mod mapping;

pub use checkpoint::{load_mapping_net, save_mapping_net, MappingNetManifest};
pub use extractor::{extract_features, ExtractorKind, FeatureExtractor};
pub use mapping::{mapping_forward, DenseLayer, MappingNet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::TensorError;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetaNetError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("dimension chain: {0}")]
    Dimension(String),
    #[error("extractor geometry: {0}")]
    Geometry(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Tanh,
    Relu,
    Identity,
}

impl Activation {
    pub fn apply(self, v: f64) -> f64 {
        match self {
            Activation::Tanh => v.tanh(),
            Activation::Relu => v.max(0.0),
            Activation::Identity => v,
        }
    }

    /// Derivative expressed through the activation's output `y`.
    pub fn derivative_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - y * y,
            Activation::Relu => {
                if y > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
        }
    }
}
