use serde::{Deserialize, Serialize};

use super::model::{cross_entropy, forward_reference_batch, AdaptationSet, BaseModel};
use super::train::batch_loss;
use super::{Sample, TrainingError};
use crate::meta_net::FeatureExtractor;
use crate::tensor::DenseTensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckEntry {
    pub name: String,
    /// `‖analytic − numeric‖ / max(‖analytic‖, ‖numeric‖, 1e-8)`.
    pub rel_error: f64,
}

/// Compares tape gradients of the mean cross-entropy over `batch` with
/// central differences of the tape-free forward, one entry per trainable
/// tensor.
pub fn gradient_check(
    base: &BaseModel,
    set: &AdaptationSet,
    extractor: &FeatureExtractor,
    batch: &[&Sample],
    h: f64,
) -> Result<Vec<GradCheckEntry>, TrainingError> {
    let (_, grads) = batch_loss(base, set, extractor, batch)?;
    let loss = |s: &AdaptationSet| -> Result<f64, TrainingError> {
        let inputs: Vec<(&DenseTensor, usize)> = batch.iter().map(|x| (&x.input, x.task)).collect();
        let outputs = forward_reference_batch(base, s, extractor, &inputs)?;
        let total: f64 = outputs.iter().zip(batch).map(|((logits, _), x)| cross_entropy(logits, x.label)).sum();
        Ok(total / batch.len() as f64)
    };
    let names = set.param_names();
    let mut probe = set.clone();
    let mut out = Vec::with_capacity(names.len());
    for (id, name) in names.into_iter().enumerate() {
        let analytic = grads
            .get(id)
            .ok_or_else(|| TrainingError::Config(format!("no gradient for {name}")))?;
        let mut numeric = DenseTensor::zeros(analytic.shape());
        for k in 0..analytic.len() {
            let orig = probe.params()[id].data()[k];
            probe.params_mut()[id].data_mut()[k] = orig + h;
            let plus = loss(&probe)?;
            probe.params_mut()[id].data_mut()[k] = orig - h;
            let minus = loss(&probe)?;
            probe.params_mut()[id].data_mut()[k] = orig;
            numeric.data_mut()[k] = (plus - minus) / (2.0 * h);
        }
        let diff = analytic.sub(&numeric)?.norm();
        let denom = analytic.norm().max(numeric.norm()).max(1e-8);
        out.push(GradCheckEntry {
            name,
            rel_error: diff / denom,
        });
    }
    Ok(out)
}
