use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Activation, DenseLayer, MappingNet};
use crate::checkpoint::{self, CheckpointError, MANIFEST};
use crate::tensor::mtk1::ElementWidth;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerEntry {
    pub weight: String,
    pub bias: String,
    /// `[out, in]`.
    pub shape: [usize; 2],
    pub activation: Activation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MappingNetManifest {
    pub kind: String,
    pub input_dim: usize,
    pub seed_shape: Vec<usize>,
    pub layers: Vec<LayerEntry>,
    pub element_width: usize,
}

pub fn save_mapping_net(
    dir: &Path,
    net: &MappingNet,
    width: ElementWidth,
) -> Result<(), CheckpointError> {
    checkpoint::create_dir(dir)?;
    let mut entries = Vec::new();
    for (k, l) in net.layers().iter().enumerate() {
        let (w, b) = (format!("W{k}"), format!("b{k}"));
        checkpoint::write_blob(dir, &w, &l.weight, width)?;
        checkpoint::write_blob(dir, &b, &l.bias, width)?;
        entries.push(LayerEntry {
            weight: w,
            bias: b,
            shape: [l.weight.shape()[0], l.weight.shape()[1]],
            activation: l.activation,
        });
    }
    let manifest = MappingNetManifest {
        kind: "mapping_net".into(),
        input_dim: net.input_dim(),
        seed_shape: net.seed_shape().to_vec(),
        layers: entries,
        element_width: width.bytes(),
    };
    checkpoint::write_json(&dir.join(MANIFEST), &manifest)
}

pub fn load_mapping_net(dir: &Path) -> Result<MappingNet, CheckpointError> {
    let m: MappingNetManifest = checkpoint::read_json(&dir.join(MANIFEST))?;
    if m.kind != "mapping_net" {
        return Err(CheckpointError::Manifest(format!("expected a mapping_net, found {}", m.kind)));
    }
    let mut layers = Vec::with_capacity(m.layers.len());
    for e in &m.layers {
        layers.push(DenseLayer {
            weight: checkpoint::read_blob(dir, &e.weight, &e.shape)?,
            bias: checkpoint::read_blob(dir, &e.bias, &[e.shape[0]])?,
            activation: e.activation,
        });
    }
    let net = MappingNet::new(layers, m.seed_shape)?;
    if net.input_dim() != m.input_dim {
        return Err(CheckpointError::Manifest("input_dim disagrees with W0".into()));
    }
    Ok(net)
}
