use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use serde::{Deserialize, Serialize};

use metalora_core::checkpoint::write_blob;
use metalora_core::tensor::mtk1::ElementWidth;
use metalora_core::training::{
    knn_accuracies, load_train_state, run_comparison, save_train_state, thread_pool, train, ComparisonTable, Cue,
    Split, SyntheticTaskSet, TaskSetSpec, TrainReport,
};
use metalora_core::verify::{run_verify, Mutation, VerifyOptions, VerifyReport};

use crate::config::{Overrides, RunConfig};

/// Name of the marker present while a command's output is unfinished.
pub const INCOMPLETE: &str = "incomplete";

/// Creates the output directory with an `incomplete` marker that is only
/// removed by [`finish`](Self::finish). An interrupted run leaves it behind.
struct OutputDir {
    path: PathBuf,
}

impl OutputDir {
    fn open(path: &Path) -> Result<Self> {
        fs::create_dir_all(path).with_context(|| format!("creating {}", path.display()))?;
        fs::write(path.join(INCOMPLETE), b"").with_context(|| format!("writing to {}", path.display()))?;
        Ok(Self { path: path.to_path_buf() })
    }

    fn write(&self, name: &str, contents: impl AsRef<[u8]>) -> Result<()> {
        let p = self.path.join(name);
        fs::write(&p, contents).with_context(|| format!("writing {}", p.display()))
    }

    fn write_json<T: Serialize>(&self, name: &str, value: &T) -> Result<()> {
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        self.write(name, text)
    }

    fn finish(self) -> Result<()> {
        fs::remove_file(self.path.join(INCOMPLETE)).context("removing the incomplete marker")
    }
}

pub fn cmd_verify(filter: Option<String>, mutation: Option<Mutation>, out: Option<&Path>) -> Result<VerifyReport> {
    let report = run_verify(&VerifyOptions { filter, mutation })?;
    if let Some(dir) = out {
        let dir = OutputDir::open(dir)?;
        dir.write_json("verify.json", &report)?;
        dir.write("verify.txt", report.to_text())?;
        dir.finish()?;
    }
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransformEntry {
    pub task: usize,
    pub color: Vec<f64>,
    pub orientation: f64,
    /// The vector between-task distances are measured on.
    pub vector: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleEntry {
    /// Blob path relative to the dataset directory.
    pub blob: String,
    pub shape: Vec<usize>,
    pub task: usize,
    pub class: usize,
    pub label: usize,
    pub split: Split,
    pub index: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetIndex {
    pub config: RunConfig,
    pub seed: u64,
    pub cue: Cue,
    pub tasks: TaskSetSpec,
    pub transforms: Vec<TransformEntry>,
    pub samples: Vec<SampleEntry>,
}

fn single_seed(cfg: &RunConfig) -> Result<u64> {
    match cfg.seeds.as_slice() {
        [s] => Ok(*s),
        [] => bail!("config lists no seeds"),
        _ => bail!("config lists {} seeds; pass --seed to pick one", cfg.seeds.len()),
    }
}

pub fn cmd_gen_data(config: &Path, overrides: &Overrides, cue: Cue) -> Result<DatasetIndex> {
    let cfg = RunConfig::load(config, overrides)?;
    let seed = single_seed(&cfg)?;
    let data = SyntheticTaskSet::generate(&cfg.tasks, seed, cue)?;
    let dir = OutputDir::open(&cfg.out_dir("out/gen-data"))?;
    let mut samples = Vec::new();
    for split in [Split::Train, Split::Test] {
        let sub = match split {
            Split::Train => "train",
            Split::Test => "test",
        };
        let sub_dir = dir.path.join(sub);
        fs::create_dir_all(&sub_dir)?;
        for s in data.split(split) {
            let name = format!("task{}_{:05}", s.task, s.index);
            write_blob(&sub_dir, &name, &s.input, ElementWidth::F64)?;
            samples.push(SampleEntry {
                blob: format!("{sub}/{name}"),
                shape: s.input.shape().to_vec(),
                task: s.task,
                class: s.class,
                label: s.label,
                split,
                index: s.index,
            });
        }
    }
    let index = DatasetIndex {
        seed,
        cue,
        tasks: cfg.tasks.clone(),
        transforms: data
            .transforms()
            .iter()
            .enumerate()
            .map(|(task, t)| TransformEntry {
                task,
                color: t.color.clone(),
                orientation: t.orientation,
                vector: t.vector(),
            })
            .collect(),
        samples,
        config: cfg,
    };
    dir.write_json("index.json", &index)?;
    dir.finish()?;
    Ok(index)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KnnScore {
    pub k: usize,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainRunReport {
    pub config: RunConfig,
    pub variant: String,
    pub seed: u64,
    pub resumed_at_epoch: Option<usize>,
    pub train: TrainReport,
    pub knn: Vec<KnnScore>,
}

pub fn cmd_train(
    config: &Path,
    overrides: &Overrides,
    variant: Option<&str>,
    resume: Option<&Path>,
) -> Result<TrainRunReport> {
    let cfg = RunConfig::load(config, overrides)?;
    let vi = cfg.select_variant(variant)?;
    let seed = single_seed(&cfg)?;
    let comparison = cfg.comparison();
    let ctx = comparison.seed_context(seed)?;
    let (mut state, resumed_at_epoch) = match resume {
        Some(dir) => {
            let mut state = load_train_state(dir).with_context(|| format!("loading {}", dir.display()))?;
            ensure!(state.rng_seed == seed, "checkpoint was trained with seed {}, not {seed}", state.rng_seed);
            ensure!(
                state.adaptation.kind == cfg.variants[vi].kind,
                "checkpoint holds a {:?} adapter set, not {:?}",
                state.adaptation.kind,
                cfg.variants[vi].kind
            );
            ensure!(
                state.base == ctx.base && state.extractor == ctx.extractor,
                "checkpoint base model or extractor does not match this config"
            );
            state.config = cfg.train.clone();
            let at = state.epoch;
            (state, Some(at))
        }
        None => (comparison.initial_state(&ctx, vi)?, None),
    };
    let dir = OutputDir::open(&cfg.out_dir("out/train"))?;
    let report = train(&mut state, &ctx.tasks)?;
    save_train_state(&dir.path.join("checkpoint"), &state)?;
    let pool = thread_pool()?;
    let accs = pool.install(|| knn_accuracies(&state, &ctx.tasks, &cfg.ks))?;
    let mut curve = String::from("epoch,loss\n");
    for (e, l) in report.loss_curve.iter().enumerate() {
        let _ = writeln!(curve, "{e},{l}");
    }
    let run = TrainRunReport {
        variant: cfg.variants[vi].display_name(),
        seed,
        resumed_at_epoch,
        train: report,
        knn: cfg.ks.iter().zip(accs).map(|(&k, accuracy)| KnnScore { k, accuracy }).collect(),
        config: cfg,
    };
    dir.write_json("report.json", &run)?;
    dir.write("loss_curve.csv", curve)?;
    dir.finish()?;
    Ok(run)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareReport {
    pub config: RunConfig,
    pub table: ComparisonTable,
}

pub fn cmd_compare(config: &Path, overrides: &Overrides) -> Result<CompareReport> {
    let cfg = RunConfig::load(config, overrides)?;
    let dir = OutputDir::open(&cfg.out_dir("out/compare"))?;
    let table = run_comparison(&cfg.comparison())?;
    dir.write("comparison.csv", table.to_csv())?;
    dir.write("comparison.txt", table.to_text())?;
    let report = CompareReport { config: cfg, table };
    dir.write_json("comparison.json", &report)?;
    dir.finish()?;
    Ok(report)
}
