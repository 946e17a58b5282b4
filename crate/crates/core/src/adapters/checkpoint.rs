use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{
    Adapter, AdapterVariant, ConvLoRA, ConvMetaCPAdapter, ConvMetaTRAdapter, MatrixLoRA,
    MetaCPAdapter, MetaTRAdapter,
};
use crate::checkpoint::{self, CheckpointError, MANIFEST};
use crate::tensor::mtk1::ElementWidth;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdapterManifest {
    pub variant: AdapterVariant,
    pub scale: f64,
    /// Factor symbol → shape; each symbol is also the blob's file name.
    pub shapes: BTreeMap<String, Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed_dim: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed_shape: Option<Vec<usize>>,
    /// `[K, I]` for the folded conv-TR factor.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kernel_geometry: Option<[usize; 2]>,
    pub element_width: usize,
}

pub fn save_adapter(
    dir: &Path,
    adapter: &Adapter,
    width: ElementWidth,
) -> Result<(), CheckpointError> {
    checkpoint::create_dir(dir)?;
    let (a, b) = (adapter.factor_a(), adapter.factor_b());
    let seed = adapter.seed_shape();
    let manifest = AdapterManifest {
        variant: adapter.variant(),
        scale: adapter.scale(),
        shapes: BTreeMap::from([
            ("A".to_string(), a.shape().to_vec()),
            ("B".to_string(), b.shape().to_vec()),
        ]),
        seed_dim: seed.as_ref().filter(|s| s.len() == 1).map(|s| s[0]),
        seed_shape: seed.filter(|s| s.len() == 2),
        kernel_geometry: match adapter {
            Adapter::ConvMetaTr(x) => Some([x.kernel, x.in_channels]),
            _ => None,
        },
        element_width: width.bytes(),
    };
    checkpoint::write_json(&dir.join(MANIFEST), &manifest)?;
    checkpoint::write_blob(dir, "A", a, width)?;
    checkpoint::write_blob(dir, "B", b, width)
}

pub fn load_adapter(dir: &Path) -> Result<Adapter, CheckpointError> {
    let m: AdapterManifest = checkpoint::read_json(&dir.join(MANIFEST))?;
    let shape = |name: &str| {
        m.shapes
            .get(name)
            .cloned()
            .ok_or_else(|| CheckpointError::Manifest(format!("missing shape for factor {name}")))
    };
    let a = checkpoint::read_blob(dir, "A", &shape("A")?)?;
    let b = checkpoint::read_blob(dir, "B", &shape("B")?)?;
    let s = m.scale;
    let adapter = match m.variant {
        AdapterVariant::MatrixLora => Adapter::MatrixLora(MatrixLoRA::new(a, b, s)?),
        AdapterVariant::ConvLora => Adapter::ConvLora(ConvLoRA::new(a, b, s)?),
        AdapterVariant::MetaCp => Adapter::MetaCp(MetaCPAdapter::new(a, b, s)?),
        AdapterVariant::MetaTr => Adapter::MetaTr(MetaTRAdapter::new(a, b, s)?),
        AdapterVariant::ConvMetaCp => Adapter::ConvMetaCp(ConvMetaCPAdapter::new(a, b, s)?),
        AdapterVariant::ConvMetaTr => {
            let [k, i] = m.kernel_geometry.ok_or_else(|| {
                CheckpointError::Manifest("conv_meta_tr requires kernel_geometry".into())
            })?;
            Adapter::ConvMetaTr(ConvMetaTRAdapter::new(a, b, k, i, s)?)
        }
    };
    if adapter.seed_shape() != m.seed_dim.map(|d| vec![d]).or(m.seed_shape.clone()) {
        return Err(CheckpointError::Manifest(format!(
            "seed shape in manifest disagrees with factors ({:?})",
            adapter.seed_shape()
        )));
    }
    Ok(adapter)
}
