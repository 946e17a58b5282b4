use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::knn::Embedded;
use super::model::{cross_entropy, forward_reference_batch, AdaptationSet, BaseModel, ModelGeometry, TapeModel, VariantKind};
use super::optim::{OptimizerConfig, OptimizerState};
use super::{Sample, SyntheticTaskSet, TrainingError};
use crate::autograd::{Tape, Var};
use crate::meta_net::{Activation, FeatureExtractor};
use crate::tensor::mtk1::ElementWidth;
use crate::tensor::DenseTensor;

/// Storage precision of trainable parameters. Arithmetic is always done in
/// doubles; `F32` rounds every parameter to single precision after
/// initialization and after each update, and checkpoints 4-byte blobs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    F32,
    #[default]
    F64,
}

impl Precision {
    pub fn width(self) -> ElementWidth {
        match self {
            Precision::F32 => ElementWidth::F32,
            Precision::F64 => ElementWidth::F64,
        }
    }

    pub(crate) fn round(self, params: Vec<&mut DenseTensor>) {
        if self == Precision::F32 {
            for p in params {
                p.data_mut().iter_mut().for_each(|v| *v = *v as f32 as f64);
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub optimizer: OptimizerConfig,
    pub batch_size: usize,
    pub epochs: usize,
    pub precision: Precision,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            optimizer: OptimizerConfig::default(),
            batch_size: 16,
            epochs: 20,
            precision: Precision::F64,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainingError> {
        self.optimizer.validate()?;
        if self.batch_size == 0 {
            return Err(TrainingError::Config("batch_size must be positive".into()));
        }
        Ok(())
    }
}

/// Full training of the base model on the pretraining split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub optimizer: OptimizerConfig,
    pub batch_size: usize,
    pub epochs: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            optimizer: OptimizerConfig::Sgd {
                lr: 0.05,
                momentum: 0.9,
            },
            batch_size: 16,
            epochs: 15,
        }
    }
}

/// Everything needed to continue training: frozen base and extractor,
/// trainable adapters, optimizer moments and progress counters.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub base: BaseModel,
    pub extractor: FeatureExtractor,
    pub adaptation: AdaptationSet,
    pub optimizer: OptimizerState,
    pub config: TrainConfig,
    pub rng_seed: u64,
    pub epoch: usize,
    /// Mean train loss before training, then after each epoch.
    pub loss_curve: Vec<f64>,
}

impl TrainState {
    pub fn new(
        base: BaseModel,
        extractor: FeatureExtractor,
        adaptation: AdaptationSet,
        config: TrainConfig,
        rng_seed: u64,
    ) -> Self {
        let mut adaptation = adaptation;
        config.precision.round(adaptation.params_mut());
        let optimizer = OptimizerState::new(&config.optimizer, &adaptation.params());
        Self {
            base,
            extractor,
            adaptation,
            optimizer,
            config,
            rng_seed,
            epoch: 0,
            loss_curve: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub variant: VariantKind,
    pub rng_seed: u64,
    pub epochs: usize,
    pub steps: u64,
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
    pub param_count: usize,
    pub mapping_param_count: usize,
    pub loss_curve: Vec<f64>,
    pub final_loss: f64,
}

/// Tape-free forward of `samples` in consecutive batches of `chunk`. The
/// batching only matters under batch-mean seeds.
fn forward_chunks(
    base: &BaseModel,
    set: &AdaptationSet,
    extractor: &FeatureExtractor,
    samples: &[Sample],
    chunk: usize,
) -> Result<Vec<(DenseTensor, DenseTensor)>, TrainingError> {
    if chunk == 0 {
        return Err(TrainingError::Config("evaluation batch size must be positive".into()));
    }
    let parts = samples
        .par_chunks(chunk)
        .map(|c| {
            let batch: Vec<(&DenseTensor, usize)> = c.iter().map(|s| (&s.input, s.task)).collect();
            forward_reference_batch(base, set, extractor, &batch)
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(parts.into_iter().flatten().collect())
}

/// Mean cross-entropy of `samples` under the tape-free forward, evaluated
/// in batches of `chunk`.
pub fn mean_loss(
    base: &BaseModel,
    set: &AdaptationSet,
    extractor: &FeatureExtractor,
    samples: &[Sample],
    chunk: usize,
) -> Result<f64, TrainingError> {
    if samples.is_empty() {
        return Err(TrainingError::Empty("sample set"));
    }
    let outputs = forward_chunks(base, set, extractor, samples, chunk)?;
    let total: f64 = outputs.iter().zip(samples).map(|((logits, _), s)| cross_entropy(logits, s.label)).sum();
    Ok(total / samples.len() as f64)
}

/// Records the mean batch loss on `tape`, returning the loss node.
pub(crate) fn record_batch(
    tape: &mut Tape,
    model: &mut TapeModel,
    batch: &[&Sample],
) -> Result<Var, TrainingError> {
    let inputs: Vec<(&DenseTensor, usize)> = batch.iter().map(|s| (&s.input, s.task)).collect();
    let outputs = model.forward_batch(tape, &inputs)?;
    let mut total: Option<Var> = None;
    for (s, (logits, _)) in batch.iter().zip(outputs) {
        let ce = tape.softmax_cross_entropy(logits, s.label)?;
        total = Some(match total {
            Some(t) => tape.add(t, ce)?,
            None => ce,
        });
    }
    let total = total.ok_or(TrainingError::Empty("batch"))?;
    Ok(tape.scale(total, 1.0 / batch.len() as f64))
}

/// Mean batch loss and its gradients for the adaptation parameters.
pub fn batch_loss(
    base: &BaseModel,
    set: &AdaptationSet,
    extractor: &FeatureExtractor,
    batch: &[&Sample],
) -> Result<(f64, crate::autograd::Gradients), TrainingError> {
    let mut tape = Tape::new();
    let mut model = TapeModel::new(&mut tape, base, set, extractor)?;
    let loss = record_batch(&mut tape, &mut model, batch)?;
    Ok((tape.value(loss).item(), tape.backward(loss)?))
}

fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64 + 1);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

/// Trains `state.adaptation` on the train split until `state.config.epochs`
/// epochs have run. Resuming a saved state continues the same trajectory:
/// the shuffle of epoch `e` depends only on `(rng_seed, e)`.
pub fn train(state: &mut TrainState, tasks: &SyntheticTaskSet) -> Result<TrainReport, TrainingError> {
    state.config.validate()?;
    state.optimizer.check(&state.config.optimizer, &state.adaptation.params())?;
    let samples = tasks.train();
    if samples.is_empty() {
        return Err(TrainingError::Empty("train split"));
    }
    if state.loss_curve.is_empty() {
        let loss = mean_loss(&state.base, &state.adaptation, &state.extractor, samples, state.config.batch_size)?;
        state.loss_curve.push(loss);
    }
    let trainable = !state.adaptation.params().is_empty();
    while state.epoch < state.config.epochs {
        if trainable {
            let order = epoch_order(samples.len(), state.rng_seed, state.epoch);
            for chunk in order.chunks(state.config.batch_size) {
                let batch: Vec<&Sample> = chunk.iter().map(|&i| &samples[i]).collect();
                let (loss, grads) = batch_loss(&state.base, &state.adaptation, &state.extractor, &batch)?;
                if !loss.is_finite() {
                    return Err(TrainingError::Divergence {
                        epoch: state.epoch,
                        step: state.optimizer.step,
                        loss,
                    });
                }
                let cfg = state.config.optimizer;
                state.optimizer.update(&cfg, state.adaptation.params_mut(), &grads)?;
                state.config.precision.round(state.adaptation.params_mut());
            }
        }
        state.epoch += 1;
        let loss = mean_loss(&state.base, &state.adaptation, &state.extractor, samples, state.config.batch_size)?;
        if !loss.is_finite() {
            return Err(TrainingError::Divergence {
                epoch: state.epoch,
                step: state.optimizer.step,
                loss,
            });
        }
        state.loss_curve.push(loss);
    }
    Ok(report(state))
}

fn report(state: &TrainState) -> TrainReport {
    TrainReport {
        variant: state.adaptation.kind,
        rng_seed: state.rng_seed,
        epochs: state.epoch,
        steps: state.optimizer.step,
        batch_size: state.config.batch_size,
        optimizer: state.config.optimizer,
        param_count: state.adaptation.param_count(),
        mapping_param_count: state.adaptation.mapping_param_count(),
        final_loss: *state.loss_curve.last().unwrap_or(&f64::NAN),
        loss_curve: state.loss_curve.clone(),
    }
}

/// Trains every base weight on `tasks` (labels `task · classes + class`)
/// and returns the model to be frozen.
pub fn pretrain_base(
    tasks: &SyntheticTaskSet,
    geometry: &ModelGeometry,
    config: &PretrainConfig,
    seed: u64,
) -> Result<BaseModel, TrainingError> {
    geometry.validate()?;
    config.optimizer.validate()?;
    if config.batch_size == 0 {
        return Err(TrainingError::Config("pretrain.batch_size must be positive".into()));
    }
    let spec = tasks.spec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut base = BaseModel::init(geometry, spec.channels, spec.labels(), &mut rng);
    let samples = tasks.train();
    let pad = base.padding();
    let mut opt = OptimizerState::new(&config.optimizer, &[&base.conv, &base.head, &base.bias]);
    for epoch in 0..config.epochs {
        let order = epoch_order(samples.len(), seed ^ 0x5eed_ba5e, epoch);
        for chunk in order.chunks(config.batch_size) {
            let mut tape = Tape::new();
            let conv = tape.param(0, base.conv.clone())?;
            let head = tape.param(1, base.head.clone())?;
            let bias = tape.param(2, base.bias.clone())?;
            let mut total: Option<Var> = None;
            for &i in chunk {
                let s = &samples[i];
                let x = tape.constant(s.input.clone());
                let maps = tape.conv2d(x, conv, 1, pad)?;
                let maps = tape.activate(maps, Activation::Tanh);
                let emb = tape.avg_pool(maps)?;
                let z = tape.contract(emb, head, &[(0, 0)])?;
                let logits = tape.add(z, bias)?;
                let ce = tape.softmax_cross_entropy(logits, s.label)?;
                total = Some(match total {
                    Some(t) => tape.add(t, ce)?,
                    None => ce,
                });
            }
            let total = total.ok_or(TrainingError::Empty("batch"))?;
            let loss = tape.scale(total, 1.0 / chunk.len() as f64);
            let value = tape.value(loss).item();
            if !value.is_finite() {
                return Err(TrainingError::Divergence {
                    epoch,
                    step: opt.step,
                    loss: value,
                });
            }
            let grads = tape.backward(loss)?;
            opt.update(
                &config.optimizer,
                vec![&mut base.conv, &mut base.head, &mut base.bias],
                &grads,
            )?;
        }
    }
    Ok(base)
}

/// Embeddings (pre-classifier pooled features) of `samples`, labelled by
/// their global label. Batches of `chunk` are evaluated in parallel and
/// collected in input order.
pub fn embed_split(
    base: &BaseModel,
    set: &AdaptationSet,
    extractor: &FeatureExtractor,
    samples: &[Sample],
    chunk: usize,
) -> Result<Vec<Embedded>, TrainingError> {
    let outputs = forward_chunks(base, set, extractor, samples, chunk)?;
    Ok(outputs
        .into_iter()
        .zip(samples)
        .map(|((_, emb), s)| Embedded {
            vector: emb.into_data(),
            label: s.label,
        })
        .collect())
}
