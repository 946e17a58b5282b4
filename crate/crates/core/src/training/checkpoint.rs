//! Training-state checkpoints. The top-level `manifest.json` describes the
//! run; adapters and mapping nets live in per-layer subdirectories in their
//! own formats, and base, extractor and optimizer tensors are MTK1 blobs.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::model::{AdaptationSet, AdaptedLayer, BaseModel, Route, SeedMode, VariantKind};
use super::optim::OptimizerState;
use super::train::{TrainConfig, TrainState};
use super::TrainingError;
use crate::adapters::{load_adapter, save_adapter};
use crate::checkpoint::{self, CheckpointError, MANIFEST};
use crate::meta_net::{load_mapping_net, save_mapping_net, FeatureExtractor};
use crate::tensor::mtk1::ElementWidth;

const KIND: &str = "train_state";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerEntry {
    /// Subdirectory holding the adapter.
    pub adapter: String,
    /// Subdirectory holding the mapping net, for Meta adapters.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub mapping: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RouteEntry {
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub conv: Option<LayerEntry>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub head: Option<LayerEntry>,
    /// Subdirectory holding a mapping net shared by both layers.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub shared_mapping: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainStateManifest {
    pub kind: String,
    pub variant: VariantKind,
    #[serde(default)]
    pub seed_mode: SeedMode,
    pub rng_seed: u64,
    pub epoch: usize,
    pub step: u64,
    pub config: TrainConfig,
    pub loss_curve: Vec<f64>,
    /// `[K, K, I, F]` and `[F, N]`.
    pub base_conv: Vec<usize>,
    pub base_head: Vec<usize>,
    /// `None` for the pooled-conv extractor, whose kernel is a blob.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub raw_input_shape: Option<[usize; 3]>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub extractor_kernel: Option<Vec<usize>>,
    pub routes: Vec<RouteEntry>,
    /// Moment buffers per parameter (1 for SGD, 2 for Adam).
    pub optimizer_moments: usize,
}

fn moment_blob(m: usize, p: usize) -> String {
    format!("opt_m{m}_{p}")
}

pub fn save_train_state(dir: &Path, state: &TrainState) -> Result<(), TrainingError> {
    checkpoint::create_dir(dir)?;
    let width = state.config.precision.width();
    checkpoint::write_blob(dir, "base_conv", &state.base.conv, ElementWidth::F64)?;
    checkpoint::write_blob(dir, "base_head", &state.base.head, ElementWidth::F64)?;
    checkpoint::write_blob(dir, "base_bias", &state.base.bias, ElementWidth::F64)?;
    let (raw_input_shape, extractor_kernel) = match &state.extractor {
        FeatureExtractor::RawFlatten { input_shape } => (Some(*input_shape), None),
        FeatureExtractor::PooledConv { kernel } => {
            checkpoint::write_blob(dir, "extractor_kernel", kernel, ElementWidth::F64)?;
            (None, Some(kernel.shape().to_vec()))
        }
    };
    let mut routes = Vec::with_capacity(state.adaptation.routes.len());
    for (ri, route) in state.adaptation.routes.iter().enumerate() {
        let save = |slot: &str, layer: &Option<AdaptedLayer>| -> Result<Option<LayerEntry>, TrainingError> {
            let Some(layer) = layer else { return Ok(None) };
            let name = format!("route{ri}_{slot}");
            save_adapter(&dir.join(&name), &layer.adapter, width)?;
            let mapping = match &layer.mapping {
                Some(net) => {
                    let m = format!("{name}_mapping");
                    save_mapping_net(&dir.join(&m), net, width)?;
                    Some(m)
                }
                None => None,
            };
            Ok(Some(LayerEntry { adapter: name, mapping }))
        };
        let shared_mapping = match &route.shared_mapping {
            Some(net) => {
                let m = format!("route{ri}_mapping");
                save_mapping_net(&dir.join(&m), net, width)?;
                Some(m)
            }
            None => None,
        };
        routes.push(RouteEntry {
            conv: save("conv", &route.conv)?,
            head: save("head", &route.head)?,
            shared_mapping,
        });
    }
    for (m, buffers) in state.optimizer.moments.iter().enumerate() {
        for (p, t) in buffers.iter().enumerate() {
            checkpoint::write_blob(dir, &moment_blob(m, p), t, ElementWidth::F64)?;
        }
    }
    let manifest = TrainStateManifest {
        kind: KIND.into(),
        variant: state.adaptation.kind,
        seed_mode: state.adaptation.seed_mode,
        rng_seed: state.rng_seed,
        epoch: state.epoch,
        step: state.optimizer.step,
        config: state.config.clone(),
        loss_curve: state.loss_curve.clone(),
        base_conv: state.base.conv.shape().to_vec(),
        base_head: state.base.head.shape().to_vec(),
        raw_input_shape,
        extractor_kernel,
        routes,
        optimizer_moments: state.optimizer.moments.len(),
    };
    checkpoint::write_json(&dir.join(MANIFEST), &manifest)?;
    Ok(())
}

pub fn load_train_state(dir: &Path) -> Result<TrainState, TrainingError> {
    let m: TrainStateManifest = checkpoint::read_json(&dir.join(MANIFEST))?;
    if m.kind != KIND {
        return Err(CheckpointError::Manifest(format!("expected a {KIND}, found {}", m.kind)).into());
    }
    let classes = *m.base_head.get(1).ok_or_else(|| CheckpointError::Manifest("base_head must be [F, N]".into()))?;
    let base = BaseModel::new(
        checkpoint::read_blob(dir, "base_conv", &m.base_conv)?,
        checkpoint::read_blob(dir, "base_head", &m.base_head)?,
        checkpoint::read_blob(dir, "base_bias", &[classes])?,
    )?;
    let extractor = match (&m.raw_input_shape, &m.extractor_kernel) {
        (Some(s), None) => FeatureExtractor::raw_flatten(s[0], s[1], s[2]),
        (None, Some(shape)) => {
            FeatureExtractor::pooled_conv(checkpoint::read_blob(dir, "extractor_kernel", shape)?)?
        }
        _ => {
            return Err(CheckpointError::Manifest(
                "exactly one of raw_input_shape and extractor_kernel must be set".into(),
            )
            .into())
        }
    };
    let load = |entry: &Option<LayerEntry>, shared: bool| -> Result<Option<AdaptedLayer>, TrainingError> {
        let Some(e) = entry else { return Ok(None) };
        let adapter = load_adapter(&dir.join(&e.adapter))?;
        let mapping = match &e.mapping {
            Some(name) => Some(load_mapping_net(&dir.join(name))?),
            None => None,
        };
        if adapter.variant().is_meta() != (mapping.is_some() || shared) || (shared && mapping.is_some()) {
            return Err(CheckpointError::Manifest(format!(
                "{}: Meta adapters need exactly one mapping net and static ones must have none",
                e.adapter
            ))
            .into());
        }
        Ok(Some(AdaptedLayer { adapter, mapping }))
    };
    let routes = m
        .routes
        .iter()
        .map(|r| {
            let shared = r.shared_mapping.is_some();
            Ok(Route {
                conv: load(&r.conv, shared)?,
                head: load(&r.head, shared)?,
                shared_mapping: match &r.shared_mapping {
                    Some(name) => Some(load_mapping_net(&dir.join(name))?),
                    None => None,
                },
            })
        })
        .collect::<Result<Vec<_>, TrainingError>>()?;
    let adaptation = AdaptationSet {
        kind: m.variant,
        seed_mode: m.seed_mode,
        routes,
    };
    let params = adaptation.params();
    let mut moments = Vec::with_capacity(m.optimizer_moments);
    for mi in 0..m.optimizer_moments {
        let buffers = params
            .iter()
            .enumerate()
            .map(|(p, t)| checkpoint::read_blob(dir, &moment_blob(mi, p), t.shape()))
            .collect::<Result<Vec<_>, _>>()?;
        moments.push(buffers);
    }
    let optimizer = OptimizerState {
        step: m.step,
        moments,
    };
    optimizer.check(&m.config.optimizer, &params)?;
    Ok(TrainState {
        base,
        extractor,
        adaptation,
        optimizer,
        config: m.config,
        rng_seed: m.rng_seed,
        epoch: m.epoch,
        loss_curve: m.loss_curve,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::training::{ExtractorSpec, MappingSpec, ModelGeometry, OptimizerConfig, VariantSpec};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn state(kind: VariantKind) -> TrainState {
        state_with(kind, &MappingSpec::default())
    }

    fn state_with(kind: VariantKind, mapping: &MappingSpec) -> TrainState {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let base = BaseModel::init(&ModelGeometry::default(), 3, 4, &mut rng);
        let ex = ExtractorSpec::default().build([8, 8, 3], &mut rng);
        let mut set = AdaptationSet::init(&VariantSpec::new(kind, 2), &base, 2, mapping, 8, &mut rng)
            .unwrap();
        for p in set.params_mut() {
            *p = crate::tensor::DenseTensor::randn(p.shape(), 1.0, &mut rng);
        }
        let cfg = TrainConfig {
            optimizer: OptimizerConfig::Adam {
                lr: 0.01,
                beta1: 0.9,
                beta2: 0.999,
                eps: 1e-8,
            },
            ..TrainConfig::default()
        };
        let mut st = TrainState::new(base, ex, set, cfg, 4);
        st.loss_curve = vec![1.0 / 3.0, 0.1];
        st.epoch = 1;
        for buffers in &mut st.optimizer.moments {
            for b in buffers {
                *b = crate::tensor::DenseTensor::randn(b.shape(), 1.0, &mut rng);
            }
        }
        st
    }

    #[test]
    fn round_trip_is_exact() {
        for kind in [VariantKind::MultiLora, VariantKind::MetaTr] {
            let st = state(kind);
            let tmp = tempfile::tempdir().unwrap();
            save_train_state(tmp.path(), &st).unwrap();
            assert_eq!(load_train_state(tmp.path()).unwrap(), st);
        }
        let mapping = MappingSpec {
            shared: true,
            seed_mode: crate::training::SeedMode::BatchMean,
            ..MappingSpec::default()
        };
        let st = state_with(VariantKind::MetaCp, &mapping);
        let tmp = tempfile::tempdir().unwrap();
        save_train_state(tmp.path(), &st).unwrap();
        assert!(tmp.path().join("route0_mapping").is_dir());
        assert_eq!(load_train_state(tmp.path()).unwrap(), st);
    }

    #[test]
    fn mapping_blobs_only_for_meta() {
        let tmp = tempfile::tempdir().unwrap();
        save_train_state(&tmp.path().join("meta"), &state(VariantKind::MetaCp)).unwrap();
        save_train_state(&tmp.path().join("static"), &state(VariantKind::Lora)).unwrap();
        assert!(tmp.path().join("meta/route0_conv_mapping/W0").is_file());
        assert!(!tmp.path().join("static/route0_conv_mapping").exists());
    }
}
