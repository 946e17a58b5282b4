use rand::Rng;
use serde::{Deserialize, Serialize};

use super::MetaNetError;
use crate::tensor::{conv2d_forward, global_avg_pool, DenseTensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ExtractorKind {
    RawFlatten,
    #[default]
    PooledConv,
}

/// Frozen feature producer feeding the mapping nets. It stands in for a
/// pretrained backbone and is never trained.
#[derive(Debug, Clone, PartialEq)]
pub enum FeatureExtractor {
    /// Row-major flattening of an `H×W×I` input (`F = H·W·I`).
    RawFlatten { input_shape: [usize; 3] },
    /// Fixed `K×K×I×F` kernel, stride 1, same padding, then a channel-wise
    /// global average (`F` features).
    PooledConv { kernel: DenseTensor },
}

impl FeatureExtractor {
    pub fn raw_flatten(height: usize, width: usize, channels: usize) -> Self {
        FeatureExtractor::RawFlatten {
            input_shape: [height, width, channels],
        }
    }

    pub fn pooled_conv(kernel: DenseTensor) -> Result<Self, MetaNetError> {
        if kernel.order() != 4 || kernel.shape()[0] != kernel.shape()[1] {
            return Err(MetaNetError::Geometry(format!(
                "pooled-conv kernel must be K×K×I×F, got {:?}",
                kernel.shape()
            )));
        }
        Ok(FeatureExtractor::PooledConv { kernel })
    }

    /// Random frozen kernel with N(0, 1/(K·K·I)) entries.
    pub fn random_pooled_conv<R: Rng + ?Sized>(
        kernel: usize,
        channels: usize,
        features: usize,
        rng: &mut R,
    ) -> Self {
        let std = 1.0 / ((kernel * kernel * channels) as f64).sqrt();
        FeatureExtractor::PooledConv {
            kernel: DenseTensor::randn(&[kernel, kernel, channels, features], std, rng),
        }
    }

    pub fn kind(&self) -> ExtractorKind {
        match self {
            FeatureExtractor::RawFlatten { .. } => ExtractorKind::RawFlatten,
            FeatureExtractor::PooledConv { .. } => ExtractorKind::PooledConv,
        }
    }

    pub fn output_dim(&self) -> usize {
        match self {
            FeatureExtractor::RawFlatten { input_shape } => input_shape.iter().product(),
            FeatureExtractor::PooledConv { kernel } => kernel.shape()[3],
        }
    }
}

pub fn extract_features(x: &DenseTensor, fe: &FeatureExtractor) -> Result<DenseTensor, MetaNetError> {
    match fe {
        FeatureExtractor::RawFlatten { input_shape } => {
            if x.shape() != input_shape {
                return Err(MetaNetError::Geometry(format!(
                    "input {:?} does not match configured {:?}",
                    x.shape(),
                    input_shape
                )));
            }
            Ok(x.reshape(&[x.len()])?)
        }
        FeatureExtractor::PooledConv { kernel } => {
            if x.order() != 3 || x.shape()[2] != kernel.shape()[2] {
                return Err(MetaNetError::Geometry(format!(
                    "input {:?} does not match a kernel with {} input channels",
                    x.shape(),
                    kernel.shape()[2]
                )));
            }
            let pad = (kernel.shape()[0] - 1) / 2;
            let maps = conv2d_forward(x, kernel, 1, pad)?;
            Ok(global_avg_pool(&maps)?)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn raw_flatten_is_row_major() {
        let x = DenseTensor::new(vec![2, 2, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let f = extract_features(&x, &FeatureExtractor::raw_flatten(2, 2, 1)).unwrap();
        assert_eq!(f.shape(), &[4]);
        assert_eq!(f.data(), &[1.0, 2.0, 3.0, 4.0]);
        assert!(extract_features(&x, &FeatureExtractor::raw_flatten(2, 1, 2)).is_err());
    }

    #[test]
    fn pooled_conv_zero_input_and_composition() {
        let mut rng = ChaCha8Rng::seed_from_u64(51);
        let fe = FeatureExtractor::random_pooled_conv(3, 2, 5, &mut rng);
        assert_eq!(fe.output_dim(), 5);
        let zero = extract_features(&DenseTensor::zeros(&[4, 4, 2]), &fe).unwrap();
        assert_eq!(zero, DenseTensor::zeros(&[5]));

        let x = DenseTensor::randn(&[4, 4, 2], 1.0, &mut rng);
        let f = extract_features(&x, &fe).unwrap();
        let FeatureExtractor::PooledConv { kernel } = &fe else { unreachable!() };
        // Explicit same-padded correlation followed by a per-channel mean.
        let mut expect = vec![0.0; 5];
        for h in 0..4isize {
            for w in 0..4isize {
                for kh in 0..3isize {
                    for kw in 0..3isize {
                        let (ih, iw) = (h + kh - 1, w + kw - 1);
                        if !(0..4).contains(&ih) || !(0..4).contains(&iw) {
                            continue;
                        }
                        for c in 0..2 {
                            for o in 0..5 {
                                expect[o] += x.get(&[ih as usize, iw as usize, c])
                                    * kernel.get(&[kh as usize, kw as usize, c, o]);
                            }
                        }
                    }
                }
            }
        }
        let expect = DenseTensor::vector(&expect).scale(1.0 / 16.0);
        assert!(f.rel_error(&expect).unwrap() <= 1e-12);
    }
}
