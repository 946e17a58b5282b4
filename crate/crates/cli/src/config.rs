use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use metalora_core::training::{
    ComparisonConfig, ExtractorSpec, MappingSpec, ModelGeometry, PretrainConfig, TaskSetSpec, TrainConfig,
    VariantKind, VariantSpec,
};

fn default_ks() -> Vec<usize> {
    vec![5, 10]
}

fn default_tolerance() -> f64 {
    0.10
}

/// Everything a command needs. Unknown keys anywhere are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub variants: Vec<VariantSpec>,
    #[serde(default)]
    pub tasks: TaskSetSpec,
    #[serde(default)]
    pub geometry: ModelGeometry,
    #[serde(default)]
    pub mapping: MappingSpec,
    #[serde(default)]
    pub extractor: ExtractorSpec,
    #[serde(default)]
    pub pretrain: PretrainConfig,
    #[serde(default)]
    pub train: TrainConfig,
    pub seeds: Vec<u64>,
    #[serde(default = "default_ks")]
    pub ks: Vec<usize>,
    #[serde(default = "default_tolerance")]
    pub budget_tolerance: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
}

/// Command-line overrides of top-level scalars.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub lr: Option<f64>,
    pub out: Option<PathBuf>,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    /// Reads, applies overrides and validates. Nothing is written before
    /// this succeeds.
    pub fn load(path: &Path, overrides: &Overrides) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let mut cfg = Self::from_json(&text).with_context(|| format!("parsing {}", path.display()))?;
        cfg.apply(overrides);
        cfg.validate().with_context(|| format!("validating {}", path.display()))?;
        Ok(cfg)
    }

    pub fn apply(&mut self, overrides: &Overrides) {
        if let Some(seed) = overrides.seed {
            self.seeds = vec![seed];
        }
        if let Some(lr) = overrides.lr {
            self.train.optimizer = self.train.optimizer.with_lr(lr);
        }
        if let Some(out) = &overrides.out {
            self.out = Some(out.clone());
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.comparison().validate()?;
        self.mapping.validate()?;
        Ok(())
    }

    pub fn comparison(&self) -> ComparisonConfig {
        ComparisonConfig {
            tasks: self.tasks.clone(),
            geometry: self.geometry,
            mapping: self.mapping.clone(),
            extractor: self.extractor,
            pretrain: self.pretrain.clone(),
            train: self.train.clone(),
            variants: self.variants.clone(),
            seeds: self.seeds.clone(),
            ks: self.ks.clone(),
            budget_tolerance: self.budget_tolerance,
        }
    }

    pub fn out_dir(&self, default: &str) -> PathBuf {
        self.out.clone().unwrap_or_else(|| PathBuf::from(default))
    }

    /// Picks the arm to train: by display name or kind tag, or the only
    /// configured arm.
    pub fn select_variant(&self, wanted: Option<&str>) -> Result<usize> {
        let tag = |k: VariantKind| serde_json::to_value(k).ok().and_then(|v| v.as_str().map(str::to_owned));
        match wanted {
            Some(w) => {
                let hits: Vec<usize> = self
                    .variants
                    .iter()
                    .enumerate()
                    .filter(|(_, v)| v.display_name() == w || tag(v.kind).as_deref() == Some(w))
                    .map(|(i, _)| i)
                    .collect();
                match hits.as_slice() {
                    [i] => Ok(*i),
                    [] => bail!("no configured variant matches {w:?}; have {}", self.variant_list()),
                    _ => bail!("{w:?} matches several variants; use a display name from {}", self.variant_list()),
                }
            }
            None if self.variants.len() == 1 => Ok(0),
            None => bail!("config has several variants; choose one with --variant ({})", self.variant_list()),
        }
    }

    fn variant_list(&self) -> String {
        self.variants.iter().map(|v| format!("{:?}", v.display_name())).collect::<Vec<_>>().join(", ")
    }
}
