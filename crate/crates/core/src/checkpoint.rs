//! Flat-directory checkpoints: a `manifest.json` next to one MTK1 blob per
//! tensor, each blob named after its tensor symbol (`A`, `B`, `W0`, ...).

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::Serialize;
use thiserror::Error;

use crate::adapters::AdapterError;
use crate::meta_net::MetaNetError;
use crate::tensor::mtk1::{self, ElementWidth, Mtk1Error};
use crate::tensor::DenseTensor;

pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error(transparent)]
    Blob(#[from] Mtk1Error),
    #[error("manifest: {0}")]
    Manifest(String),
    #[error(transparent)]
    Adapter(#[from] AdapterError),
    #[error(transparent)]
    MetaNet(#[from] MetaNetError),
}

pub fn create_dir(dir: &Path) -> Result<(), CheckpointError> {
    fs::create_dir_all(dir).map_err(|source| CheckpointError::Io {
        path: dir.to_path_buf(),
        source,
    })
}

/// Pretty-printed JSON with a trailing newline.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CheckpointError> {
    let mut text = serde_json::to_string_pretty(value).map_err(|source| CheckpointError::Json {
        path: path.to_path_buf(),
        source,
    })?;
    text.push('\n');
    fs::write(path, text).map_err(|source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, CheckpointError> {
    let text = fs::read_to_string(path).map_err(|source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    serde_json::from_str(&text).map_err(|source| CheckpointError::Json {
        path: path.to_path_buf(),
        source,
    })
}

pub fn write_blob(
    dir: &Path,
    name: &str,
    t: &DenseTensor,
    width: ElementWidth,
) -> Result<(), CheckpointError> {
    Ok(mtk1::save(&dir.join(name), t, width)?)
}

/// Reads a blob and checks it against the shape recorded in the manifest.
pub fn read_blob(dir: &Path, name: &str, shape: &[usize]) -> Result<DenseTensor, CheckpointError> {
    let t = mtk1::load(&dir.join(name))?;
    if t.shape() != shape {
        return Err(CheckpointError::Manifest(format!(
            "blob {name} has shape {:?}, manifest says {shape:?}",
            t.shape()
        )));
    }
    Ok(t)
}
