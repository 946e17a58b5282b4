use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use super::data::{Cue, SyntheticTaskSet, TaskSetSpec};
use super::knn::knn_evaluate;
use super::model::{
    AdaptationSet, BaseModel, ExtractorSpec, MappingSpec, ModelGeometry, VariantKind, VariantSpec,
};
use super::train::{embed_split, pretrain_base, train, PretrainConfig, TrainConfig, TrainState};
use crate::meta_net::FeatureExtractor;
use super::TrainingError;

/// Environment variable capping the worker threads used for seeds and KNN.
pub const THREADS_ENV: &str = "METALORA_THREADS";

const EXTRACTOR_STREAM: u64 = 2;
const VARIANT_STREAM_BASE: u64 = 100;

fn default_ks() -> Vec<usize> {
    vec![5, 10]
}

fn default_tolerance() -> f64 {
    0.10
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ComparisonConfig {
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
    pub variants: Vec<VariantSpec>,
    pub seeds: Vec<u64>,
    #[serde(default = "default_ks")]
    pub ks: Vec<usize>,
    /// Allowed relative deviation of each arm's `param_count` from the
    /// reference arm.
    #[serde(default = "default_tolerance")]
    pub budget_tolerance: f64,
}

impl ComparisonConfig {
    pub fn validate(&self) -> Result<(), TrainingError> {
        self.tasks.validate()?;
        self.geometry.validate()?;
        self.extractor.validate()?;
        self.train.validate()?;
        self.pretrain.optimizer.validate()?;
        if self.pretrain.batch_size == 0 {
            return Err(TrainingError::Config("pretrain.batch_size must be positive".into()));
        }
        if self.variants.is_empty() {
            return Err(TrainingError::Config("no variants configured".into()));
        }
        for v in &self.variants {
            v.validate()?;
        }
        if self.seeds.is_empty() {
            return Err(TrainingError::Config("no seeds configured".into()));
        }
        let train_size = self.tasks.labels() * self.tasks.train_per_class;
        if self.ks.is_empty() || self.ks.iter().any(|&k| k == 0 || k > train_size) {
            return Err(TrainingError::Config(format!(
                "every K must lie in 1..={train_size}"
            )));
        }
        if !(self.budget_tolerance.is_finite() && self.budget_tolerance >= 0.0) {
            return Err(TrainingError::Config("budget_tolerance must be ≥ 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantRow {
    pub k: usize,
    /// One accuracy per seed, in seed order.
    pub accuracies: Vec<f64>,
    pub mean: f64,
    /// Sample standard deviation over seeds (0 for a single seed).
    pub std: f64,
    /// Welch two-sided p-value against the best non-Meta arm at this K;
    /// present for Meta arms only.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub p_value: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub baseline: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantResult {
    pub name: String,
    pub spec: VariantSpec,
    pub param_count: usize,
    pub mapping_param_count: usize,
    pub rows: Vec<VariantRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonTable {
    pub config: ComparisonConfig,
    pub variants: Vec<VariantResult>,
    pub warnings: Vec<String>,
}

impl ComparisonTable {
    pub fn variant(&self, name: &str) -> Option<&VariantResult> {
        self.variants.iter().find(|v| v.name == name)
    }

    pub fn mean(&self, name: &str, k: usize) -> Option<f64> {
        self.variant(name)?.rows.iter().find(|r| r.k == k).map(|r| r.mean)
    }

    /// One row per variant × K × seed.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("variant,kind,k,seed,accuracy\n");
        for v in &self.variants {
            let kind = serde_json::to_value(v.spec.kind)
                .ok()
                .and_then(|j| j.as_str().map(str::to_string))
                .unwrap_or_default();
            for r in &v.rows {
                for (seed, acc) in self.config.seeds.iter().zip(&r.accuracies) {
                    let _ = writeln!(out, "{},{kind},{},{seed},{acc}", csv_field(&v.name), r.k);
                }
            }
        }
        out
    }

    /// Plain-text table with accuracies in percent to two decimals.
    pub fn to_text(&self) -> String {
        let width = self.variants.iter().map(|v| v.name.len()).max().unwrap_or(6).max(6);
        let mut out = String::new();
        let _ = write!(out, "{:<width$}  {:>6}  {:>6}", "Method", "Params", "Map");
        for k in &self.config.ks {
            let _ = write!(out, "  {:>24}", format!("KNN@{k}"));
        }
        out.push('\n');
        for v in &self.variants {
            let _ = write!(out, "{:<width$}  {:>6}  {:>6}", v.name, v.param_count, v.mapping_param_count);
            for r in &v.rows {
                let mut cell = format!("{:.2} ± {:.2}", 100.0 * r.mean, 100.0 * r.std);
                if let Some(p) = r.p_value {
                    let _ = write!(cell, " (p={p:.3})");
                }
                let _ = write!(out, "  {cell:>24}");
            }
            out.push('\n');
        }
        for w in &self.warnings {
            let _ = writeln!(out, "warning: {w}");
        }
        out
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// Two-sided Welch t-test p-value; `None` with fewer than two samples per
/// arm. Zero pooled variance gives 1 for equal means and 0 otherwise.
pub fn welch_p_value(a: &[f64], b: &[f64]) -> Option<f64> {
    if a.len() < 2 || b.len() < 2 {
        return None;
    }
    let (ma, va) = mean_var(a);
    let (mb, vb) = mean_var(b);
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let se2 = va / na + vb / nb;
    if se2 == 0.0 {
        return Some(if ma == mb { 1.0 } else { 0.0 });
    }
    let t = (ma - mb) / se2.sqrt();
    let df = se2 * se2 / ((va / na).powi(2) / (na - 1.0) + (vb / nb).powi(2) / (nb - 1.0));
    let dist = StudentsT::new(0.0, 1.0, df).ok()?;
    Some((2.0 * (1.0 - dist.cdf(t.abs()))).clamp(0.0, 1.0))
}

fn mean_var(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let m = x.iter().sum::<f64>() / n;
    let v = if x.len() > 1 {
        x.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (m, v)
}

/// Worker pool sized by `METALORA_THREADS` (all cores when unset).
pub fn thread_pool() -> Result<rayon::ThreadPool, TrainingError> {
    let threads = match std::env::var(THREADS_ENV) {
        Ok(v) => v
            .trim()
            .parse::<usize>()
            .map_err(|_| TrainingError::Config(format!("{THREADS_ENV} must be a positive integer, got {v:?}")))?,
        Err(_) => 0,
    };
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| TrainingError::Config(format!("thread pool: {e}")))
}

fn budget_warnings(config: &ComparisonConfig, counts: &[(usize, usize)]) -> Vec<String> {
    let adapters: Vec<(usize, &VariantSpec)> = config
        .variants
        .iter()
        .enumerate()
        .filter(|(_, v)| v.kind != VariantKind::Original)
        .collect();
    let Some(&(ref_idx, ref_spec)) = adapters
        .iter()
        .find(|(_, v)| v.kind == VariantKind::Lora)
        .or(adapters.first())
    else {
        return Vec::new();
    };
    let reference = counts[ref_idx].0 as f64;
    adapters
        .iter()
        .filter_map(|&(i, v)| {
            let dev = (counts[i].0 as f64 - reference).abs() / reference;
            (dev > config.budget_tolerance).then(|| {
                format!(
                    "budget mismatch: {} has {} adapter parameters vs {} for {} ({:.1}% off, tolerance {:.1}%)",
                    v.display_name(),
                    counts[i].0,
                    reference,
                    ref_spec.display_name(),
                    100.0 * dev,
                    100.0 * config.budget_tolerance
                )
            })
        })
        .collect()
}

/// Per-variant adapter and mapping-net parameter counts.
fn variant_counts(config: &ComparisonConfig) -> Result<Vec<(usize, usize)>, TrainingError> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let base = BaseModel::init(&config.geometry, config.tasks.channels, config.tasks.labels(), &mut rng);
    let features = config.extractor.build(config.tasks.input_shape(), &mut rng).output_dim();
    config
        .variants
        .iter()
        .map(|v| {
            let set = AdaptationSet::init(v, &base, config.tasks.tasks, &config.mapping, features, &mut rng)?;
            Ok((set.param_count(), set.mapping_param_count()))
        })
        .collect()
}

/// Data, pretrained base and frozen extractor shared by every arm of one
/// seed. Pretraining uses the amplitude cue; adaptation data uses the
/// orientation cue.
#[derive(Debug, Clone)]
pub struct SeedContext {
    pub seed: u64,
    pub tasks: SyntheticTaskSet,
    pub base: BaseModel,
    pub extractor: FeatureExtractor,
}

impl ComparisonConfig {
    pub fn seed_context(&self, seed: u64) -> Result<SeedContext, TrainingError> {
        let tasks = SyntheticTaskSet::generate(&self.tasks, seed, Cue::Orientation)?;
        let pretrain = SyntheticTaskSet::generate(&self.tasks, seed, Cue::Amplitude)?;
        let base = pretrain_base(&pretrain, &self.geometry, &self.pretrain, seed)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(EXTRACTOR_STREAM);
        let extractor = self.extractor.build(self.tasks.input_shape(), &mut rng);
        Ok(SeedContext {
            seed,
            tasks,
            base,
            extractor,
        })
    }

    /// Untrained state of arm `variant` for the context's seed.
    pub fn initial_state(&self, ctx: &SeedContext, variant: usize) -> Result<TrainState, TrainingError> {
        let spec = self
            .variants
            .get(variant)
            .ok_or_else(|| TrainingError::Config(format!("no variant #{variant}")))?;
        let mut rng = ChaCha8Rng::seed_from_u64(ctx.seed);
        rng.set_stream(VARIANT_STREAM_BASE + variant as u64);
        let set = AdaptationSet::init(
            spec,
            &ctx.base,
            self.tasks.tasks,
            &self.mapping,
            ctx.extractor.output_dim(),
            &mut rng,
        )?;
        Ok(TrainState::new(
            ctx.base.clone(),
            ctx.extractor.clone(),
            set,
            self.train.clone(),
            ctx.seed,
        ))
    }
}

/// KNN accuracy of held-out embeddings against train embeddings, per `k`.
pub fn knn_accuracies(state: &TrainState, tasks: &SyntheticTaskSet, ks: &[usize]) -> Result<Vec<f64>, TrainingError> {
    let chunk = state.config.batch_size;
    let train_emb = embed_split(&state.base, &state.adaptation, &state.extractor, tasks.train(), chunk)?;
    let test_emb = embed_split(&state.base, &state.adaptation, &state.extractor, tasks.test(), chunk)?;
    ks.iter().map(|&k| knn_evaluate(&train_emb, &test_emb, k)).collect()
}

/// `[variant][k]` accuracies for one seed. The Original arm is not trained.
fn run_seed(config: &ComparisonConfig, seed: u64) -> Result<Vec<Vec<f64>>, TrainingError> {
    let ctx = config.seed_context(seed)?;
    let mut out = Vec::with_capacity(config.variants.len());
    for (vi, spec) in config.variants.iter().enumerate() {
        let mut state = config.initial_state(&ctx, vi)?;
        if spec.kind != VariantKind::Original {
            train(&mut state, &ctx.tasks)?;
        }
        out.push(knn_accuracies(&state, &ctx.tasks, &config.ks)?);
    }
    Ok(out)
}

/// Trains every variant for every seed and tabulates KNN accuracies of the
/// held-out embeddings. Seeds run in parallel (capped by
/// `METALORA_THREADS`); results are merged in seed order.
pub fn run_comparison(config: &ComparisonConfig) -> Result<ComparisonTable, TrainingError> {
    config.validate()?;
    let counts = variant_counts(config)?;
    let mut warnings = budget_warnings(config, &counts);
    if config.seeds.len() < 5 {
        warnings.push(format!(
            "only {} seed(s); at least 5 are needed for a meaningful spread",
            config.seeds.len()
        ));
    }
    let pool = thread_pool()?;
    let per_seed: Vec<Vec<Vec<f64>>> = pool.install(|| {
        config
            .seeds
            .par_iter()
            .map(|&s| run_seed(config, s))
            .collect::<Result<_, _>>()
    })?;

    let mut variants: Vec<VariantResult> = config
        .variants
        .iter()
        .enumerate()
        .map(|(vi, spec)| {
            let rows = config
                .ks
                .iter()
                .enumerate()
                .map(|(ki, &k)| {
                    let accuracies: Vec<f64> = per_seed.iter().map(|s| s[vi][ki]).collect();
                    let (mean, var) = mean_var(&accuracies);
                    VariantRow {
                        k,
                        accuracies,
                        mean,
                        std: var.sqrt(),
                        p_value: None,
                        baseline: None,
                    }
                })
                .collect();
            VariantResult {
                name: spec.display_name(),
                spec: spec.clone(),
                param_count: counts[vi].0,
                mapping_param_count: counts[vi].1,
                rows,
            }
        })
        .collect();

    for ki in 0..config.ks.len() {
        let best = variants
            .iter()
            .filter(|v| !v.spec.kind.is_meta())
            .fold(None::<&VariantResult>, |best, v| match best {
                Some(b) if b.rows[ki].mean >= v.rows[ki].mean => Some(b),
                _ => Some(v),
            })
            .map(|b| (b.name.clone(), b.rows[ki].accuracies.clone()));
        let Some((name, baseline)) = best else { continue };
        for v in variants.iter_mut().filter(|v| v.spec.kind.is_meta()) {
            v.rows[ki].p_value = welch_p_value(&v.rows[ki].accuracies, &baseline);
            v.rows[ki].baseline = Some(name.clone());
        }
    }

    Ok(ComparisonTable {
        config: config.clone(),
        variants,
        warnings,
    })
}
