//! Delta-weight constructions for the six adapter variants.
//!
//! | variant        | factors                       | seed   | delta shape |
//! |----------------|-------------------------------|--------|-------------|
//! | `MatrixLoRA`   | `A: I×R`, `B: R×O`            | none   | `I×O`       |
//! | `ConvLoRA`     | `A: K×K×I×R`, `B: R×O`        | none   | `K×K×I×O`   |
//! | `MetaCP`       | `A: I×R`, `B: R×O`            | `R`    | `I×O`       |
//! | `MetaTR`       | `A: R×I×R`, `B: R×O×R`        | `R×R`  | `I×O`       |
//! | `ConvMetaCP`   | `A: K×K×I×R`, `B: R×O`        | `R`    | `K×K×I×O`   |
//! | `ConvMetaTR`   | `A: R×(K·K·I)×R`, `B: R×O×R`  | `R×R`  | `K×K×I×O`   |
//!
//! Every adapter carries an explicit `scale` (default 1.0). Static and Meta
//! adapters zero-initialize `B`, so a fresh adapter contributes nothing
//! whatever seed it is given.

mod checkpoint;
mod conv;
mod matrix;

pub use checkpoint::{load_adapter, save_adapter, AdapterManifest};
pub use conv::{
    conv_lora_apply_factored, conv_lora_delta, conv_meta_cp_delta, conv_meta_tr_delta, ConvLoRA,
    ConvMetaCPAdapter, ConvMetaTRAdapter,
};
pub use matrix::{
    matrix_lora_delta, meta_cp_delta, meta_tr_delta, MatrixLoRA, MetaCPAdapter, MetaTRAdapter,
};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{DenseTensor, TensorError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AdapterError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("seed has shape {actual:?}, adapter expects {expected:?}")]
    SeedShape {
        expected: Vec<usize>,
        actual: Vec<usize>,
    },
    #[error("{0}")]
    Shape(String),
    #[error("{variant:?} adapter needs a generated seed")]
    MissingSeed { variant: AdapterVariant },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdapterVariant {
    MatrixLora,
    ConvLora,
    MetaCp,
    MetaTr,
    ConvMetaCp,
    ConvMetaTr,
}

impl AdapterVariant {
    pub fn is_conv(self) -> bool {
        matches!(self, Self::ConvLora | Self::ConvMetaCp | Self::ConvMetaTr)
    }

    pub fn is_meta(self) -> bool {
        !matches!(self, Self::MatrixLora | Self::ConvLora)
    }
}

/// Any of the six adapters, for code that handles them uniformly.
#[derive(Debug, Clone, PartialEq)]
pub enum Adapter {
    MatrixLora(MatrixLoRA),
    ConvLora(ConvLoRA),
    MetaCp(MetaCPAdapter),
    MetaTr(MetaTRAdapter),
    ConvMetaCp(ConvMetaCPAdapter),
    ConvMetaTr(ConvMetaTRAdapter),
}

impl Adapter {
    pub fn variant(&self) -> AdapterVariant {
        match self {
            Adapter::MatrixLora(_) => AdapterVariant::MatrixLora,
            Adapter::ConvLora(_) => AdapterVariant::ConvLora,
            Adapter::MetaCp(_) => AdapterVariant::MetaCp,
            Adapter::MetaTr(_) => AdapterVariant::MetaTr,
            Adapter::ConvMetaCp(_) => AdapterVariant::ConvMetaCp,
            Adapter::ConvMetaTr(_) => AdapterVariant::ConvMetaTr,
        }
    }

    pub fn factor_a(&self) -> &DenseTensor {
        match self {
            Adapter::MatrixLora(x) => &x.a,
            Adapter::ConvLora(x) => &x.a,
            Adapter::MetaCp(x) => &x.a,
            Adapter::MetaTr(x) => &x.a,
            Adapter::ConvMetaCp(x) => &x.a,
            Adapter::ConvMetaTr(x) => &x.a,
        }
    }

    pub fn factor_b(&self) -> &DenseTensor {
        match self {
            Adapter::MatrixLora(x) => &x.b,
            Adapter::ConvLora(x) => &x.b,
            Adapter::MetaCp(x) => &x.b,
            Adapter::MetaTr(x) => &x.b,
            Adapter::ConvMetaCp(x) => &x.b,
            Adapter::ConvMetaTr(x) => &x.b,
        }
    }

    /// Mutable `[A, B]`, in that order.
    pub fn factors_mut(&mut self) -> [&mut DenseTensor; 2] {
        match self {
            Adapter::MatrixLora(x) => [&mut x.a, &mut x.b],
            Adapter::ConvLora(x) => [&mut x.a, &mut x.b],
            Adapter::MetaCp(x) => [&mut x.a, &mut x.b],
            Adapter::MetaTr(x) => [&mut x.a, &mut x.b],
            Adapter::ConvMetaCp(x) => [&mut x.a, &mut x.b],
            Adapter::ConvMetaTr(x) => [&mut x.a, &mut x.b],
        }
    }

    pub fn scale(&self) -> f64 {
        match self {
            Adapter::MatrixLora(x) => x.scale,
            Adapter::ConvLora(x) => x.scale,
            Adapter::MetaCp(x) => x.scale,
            Adapter::MetaTr(x) => x.scale,
            Adapter::ConvMetaCp(x) => x.scale,
            Adapter::ConvMetaTr(x) => x.scale,
        }
    }

    pub fn set_scale(&mut self, scale: f64) {
        match self {
            Adapter::MatrixLora(x) => x.scale = scale,
            Adapter::ConvLora(x) => x.scale = scale,
            Adapter::MetaCp(x) => x.scale = scale,
            Adapter::MetaTr(x) => x.scale = scale,
            Adapter::ConvMetaCp(x) => x.scale = scale,
            Adapter::ConvMetaTr(x) => x.scale = scale,
        }
    }

    /// Shape of the generated seed, or `None` for static adapters.
    pub fn seed_shape(&self) -> Option<Vec<usize>> {
        match self {
            Adapter::MatrixLora(_) | Adapter::ConvLora(_) => None,
            Adapter::MetaCp(x) => Some(vec![x.seed_dim()]),
            Adapter::ConvMetaCp(x) => Some(vec![x.seed_dim()]),
            Adapter::MetaTr(x) => Some(x.seed_shape().to_vec()),
            Adapter::ConvMetaTr(x) => Some(x.seed_shape().to_vec()),
        }
    }

    /// Shape of the weight this adapter modifies.
    pub fn delta_shape(&self) -> Vec<usize> {
        match self {
            Adapter::MatrixLora(x) => vec![x.dims().0, x.dims().1],
            Adapter::MetaCp(x) => vec![x.dims().0, x.dims().1],
            Adapter::MetaTr(x) => vec![x.dims().0, x.dims().1],
            Adapter::ConvLora(x) => conv_shape(x.geometry()),
            Adapter::ConvMetaCp(x) => conv_shape(x.geometry()),
            Adapter::ConvMetaTr(x) => conv_shape(x.geometry()),
        }
    }

    /// Computes the delta; Meta variants require `seed`, static ones ignore it.
    pub fn delta(&self, seed: Option<&DenseTensor>) -> Result<DenseTensor, AdapterError> {
        let need = |variant| seed.ok_or(AdapterError::MissingSeed { variant });
        match self {
            Adapter::MatrixLora(x) => matrix_lora_delta(x),
            Adapter::ConvLora(x) => conv_lora_delta(x),
            Adapter::MetaCp(x) => meta_cp_delta(x, need(AdapterVariant::MetaCp)?),
            Adapter::MetaTr(x) => meta_tr_delta(x, need(AdapterVariant::MetaTr)?),
            Adapter::ConvMetaCp(x) => conv_meta_cp_delta(x, need(AdapterVariant::ConvMetaCp)?),
            Adapter::ConvMetaTr(x) => conv_meta_tr_delta(x, need(AdapterVariant::ConvMetaTr)?),
        }
    }
}

fn conv_shape((k, i, o): (usize, usize, usize)) -> Vec<usize> {
    vec![k, k, i, o]
}

/// Number of trainable scalars held by the adapter's factors. Mapping nets
/// and frozen base weights are not counted.
pub fn param_count(adapter: &Adapter) -> usize {
    adapter.factor_a().len() + adapter.factor_b().len()
}

pub(crate) fn expect_order(t: &DenseTensor, order: usize, name: &str) -> Result<(), AdapterError> {
    if t.order() != order {
        return Err(AdapterError::Shape(format!(
            "factor {name} must be order {order}, got shape {:?}",
            t.shape()
        )));
    }
    if t.shape().contains(&0) {
        return Err(AdapterError::Shape(format!("factor {name} has a zero extent")));
    }
    Ok(())
}

pub(crate) fn expect_seed_shape(seed: &DenseTensor, expected: &[usize]) -> Result<(), AdapterError> {
    if seed.shape() != expected {
        return Err(AdapterError::SeedShape {
            expected: expected.to_vec(),
            actual: seed.shape().to_vec(),
        });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn param_count_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let conv = Adapter::ConvLora(ConvLoRA::init(3, 8, 16, 2, &mut rng));
        assert_eq!(param_count(&conv), 176);
        assert!(param_count(&conv) < 3 * 3 * 8 * 16);
        let lora = Adapter::MatrixLora(MatrixLoRA::init(4, 4, 4, &mut rng));
        assert_eq!(param_count(&lora), 32);
        let tr = Adapter::MetaTr(MetaTRAdapter::init(3, 4, 2, &mut rng));
        assert_eq!(param_count(&tr), 28);
    }

    #[test]
    fn conv_lora_is_smaller_below_break_even_rank() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for k in 1..=3 {
            for i in [1, 3, 8] {
                for o in [1, 4, 16] {
                    let full = k * k * i * o;
                    for r in 1..=8 {
                        let count = param_count(&Adapter::ConvLora(ConvLoRA::init(k, i, o, r, &mut rng)));
                        assert_eq!(count, r * (k * k * i + o));
                        // R < K²·I·O / (K²·I + O)  ⇔  R·(K²·I + O) < K²·I·O
                        if r * (k * k * i + o) < full {
                            assert!(count < full);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn fresh_adapters_have_zero_delta_for_any_seed() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let seed_r = DenseTensor::randn(&[2], 1.0, &mut rng);
        let seed_rr = DenseTensor::randn(&[2, 2], 1.0, &mut rng);
        let all = [
            (Adapter::MatrixLora(MatrixLoRA::init(3, 4, 2, &mut rng)), None),
            (Adapter::ConvLora(ConvLoRA::init(3, 2, 4, 2, &mut rng)), None),
            (Adapter::MetaCp(MetaCPAdapter::init(3, 4, 2, &mut rng)), Some(&seed_r)),
            (Adapter::MetaTr(MetaTRAdapter::init(3, 4, 2, &mut rng)), Some(&seed_rr)),
            (Adapter::ConvMetaCp(ConvMetaCPAdapter::init(3, 2, 4, 2, &mut rng)), Some(&seed_r)),
            (Adapter::ConvMetaTr(ConvMetaTRAdapter::init(3, 2, 4, 2, &mut rng)), Some(&seed_rr)),
        ];
        for (ad, seed) in &all {
            let d = ad.delta(*seed).unwrap();
            assert_eq!(d.shape(), ad.delta_shape().as_slice());
            assert!(d.data().iter().all(|&v| v == 0.0), "{:?}", ad.variant());
        }
        assert!(matches!(all[2].0.delta(None), Err(AdapterError::MissingSeed { .. })));
    }

    fn random_meta(seed: u64) -> (Adapter, Adapter, Adapter, Adapter) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let cp = MetaCPAdapter::new(DenseTensor::randn(&[3, 2], 1.0, &mut r), DenseTensor::randn(&[2, 4], 1.0, &mut r), 1.0).unwrap();
        let tr = MetaTRAdapter::new(DenseTensor::randn(&[2, 3, 2], 1.0, &mut r), DenseTensor::randn(&[2, 4, 2], 1.0, &mut r), 1.0).unwrap();
        let ccp = ConvMetaCPAdapter::new(DenseTensor::randn(&[2, 2, 2, 2], 1.0, &mut r), DenseTensor::randn(&[2, 3], 1.0, &mut r), 1.0).unwrap();
        let ctr = ConvMetaTRAdapter::new(DenseTensor::randn(&[2, 8, 2], 1.0, &mut r), DenseTensor::randn(&[2, 3, 2], 1.0, &mut r), 2, 2, 1.0).unwrap();
        (Adapter::MetaCp(cp), Adapter::MetaTr(tr), Adapter::ConvMetaCp(ccp), Adapter::ConvMetaTr(ctr))
    }

    proptest! {
        #[test]
        fn deltas_are_linear_in_the_seed(seed in any::<u64>(), alpha in -3.0f64..3.0, beta in -3.0f64..3.0) {
            let (cp, tr, ccp, ctr) = random_meta(seed);
            let mut r = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
            for ad in [cp, tr, ccp, ctr] {
                let shape = ad.seed_shape().unwrap();
                let s1 = DenseTensor::randn(&shape, 1.0, &mut r);
                let s2 = DenseTensor::randn(&shape, 1.0, &mut r);
                let mixed = s1.scale(alpha).add(&s2.scale(beta)).unwrap();
                let lhs = ad.delta(Some(&mixed)).unwrap();
                let rhs = ad.delta(Some(&s1)).unwrap().scale(alpha)
                    .add(&ad.delta(Some(&s2)).unwrap().scale(beta)).unwrap();
                prop_assert!(lhs.rel_error(&rhs).unwrap() <= 1e-12);
            }
        }
    }
}
