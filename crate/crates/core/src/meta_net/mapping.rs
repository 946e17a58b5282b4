use rand::Rng;

use super::{Activation, MetaNetError};
use crate::tensor::{contract, DenseTensor};

#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    /// `out × in`.
    pub weight: DenseTensor,
    pub bias: DenseTensor,
    pub activation: Activation,
}

/// MLP from a feature vector to a parameter seed. The last layer is linear
/// and its output is reshaped row-major to `seed_shape` (`[R]` or `[R, R]`).
#[derive(Debug, Clone, PartialEq)]
pub struct MappingNet {
    layers: Vec<DenseLayer>,
    seed_shape: Vec<usize>,
}

impl MappingNet {
    pub fn new(layers: Vec<DenseLayer>, seed_shape: Vec<usize>) -> Result<Self, MetaNetError> {
        let Some(last) = layers.last() else {
            return Err(MetaNetError::Dimension("mapping net needs at least one layer".into()));
        };
        if last.activation != Activation::Identity {
            return Err(MetaNetError::Dimension("final layer must be linear".into()));
        }
        for (k, l) in layers.iter().enumerate() {
            if l.weight.order() != 2 || l.bias.shape() != [l.weight.shape()[0]] {
                return Err(MetaNetError::Dimension(format!(
                    "layer {k}: weight {:?} and bias {:?} do not form a dense layer",
                    l.weight.shape(),
                    l.bias.shape()
                )));
            }
            if k > 0 && layers[k - 1].weight.shape()[0] != l.weight.shape()[1] {
                return Err(MetaNetError::Dimension(format!(
                    "layer {} emits {} values but layer {k} takes {}",
                    k - 1,
                    layers[k - 1].weight.shape()[0],
                    l.weight.shape()[1]
                )));
            }
        }
        let out: usize = seed_shape.iter().product();
        if seed_shape.is_empty() || out != last.weight.shape()[0] {
            return Err(MetaNetError::Dimension(format!(
                "seed shape {seed_shape:?} does not match output width {}",
                last.weight.shape()[0]
            )));
        }
        Ok(Self { layers, seed_shape })
    }

    /// Gaussian weights with std `1/√fan_in`, zero biases. `hidden` lists
    /// `(width, activation)` for each hidden layer.
    pub fn init<R: Rng + ?Sized>(
        input_dim: usize,
        hidden: &[(usize, Activation)],
        seed_shape: &[usize],
        rng: &mut R,
    ) -> Self {
        let out: usize = seed_shape.iter().product();
        let mut layers = Vec::with_capacity(hidden.len() + 1);
        let mut fan_in = input_dim;
        for &(width, activation) in hidden.iter().chain([(out, Activation::Identity)].iter()) {
            layers.push(DenseLayer {
                weight: DenseTensor::randn(&[width, fan_in], 1.0 / (fan_in as f64).sqrt(), rng),
                bias: DenseTensor::zeros(&[width]),
                activation,
            });
            fan_in = width;
        }
        Self {
            layers,
            seed_shape: seed_shape.to_vec(),
        }
    }

    /// Replaces the final bias, e.g. to centre generated seeds on a chosen
    /// operating point. `bias` must have the seed shape.
    pub fn with_output_bias(mut self, bias: &DenseTensor) -> Result<Self, MetaNetError> {
        if bias.shape() != self.seed_shape.as_slice() {
            return Err(MetaNetError::Dimension(format!(
                "output bias {:?} must have seed shape {:?}",
                bias.shape(),
                self.seed_shape
            )));
        }
        let last = self.layers.last_mut().expect("validated non-empty");
        last.bias = bias.reshape(&[bias.len()])?;
        Ok(self)
    }

    /// The same architecture with every weight and bias set to zero.
    pub fn zeroed(&self) -> Self {
        let mut out = self.clone();
        for l in &mut out.layers {
            l.weight = DenseTensor::zeros(l.weight.shape());
            l.bias = DenseTensor::zeros(l.bias.shape());
        }
        out
    }

    pub fn layers(&self) -> &[DenseLayer] {
        &self.layers
    }

    /// Mutable `[W0, b0, W1, b1, ...]`.
    pub fn params_mut(&mut self) -> Vec<&mut DenseTensor> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .collect()
    }

    pub fn params(&self) -> Vec<&DenseTensor> {
        self.layers.iter().flat_map(|l| [&l.weight, &l.bias]).collect()
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].weight.shape()[1]
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().expect("non-empty").weight.shape()[0]
    }

    pub fn seed_shape(&self) -> &[usize] {
        &self.seed_shape
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    /// Upper bound on the net's Lipschitz constant (Euclidean norms):
    /// the product of the layers' Frobenius norms. All supported
    /// activations are 1-Lipschitz.
    pub fn lipschitz_bound(&self) -> f64 {
        self.layers.iter().map(|l| l.weight.norm()).product()
    }
}

/// `hₖ₊₁ = act(Wₖ·hₖ + bₖ)`, final output reshaped to the seed shape.
pub fn mapping_forward(net: &MappingNet, f: &DenseTensor) -> Result<DenseTensor, MetaNetError> {
    if f.shape() != [net.input_dim()] {
        return Err(MetaNetError::Dimension(format!(
            "feature vector {:?} does not match input width {}",
            f.shape(),
            net.input_dim()
        )));
    }
    let mut h = f.clone();
    for l in &net.layers {
        let pre = contract(&l.weight, &h, &[(1, 0)])?.add(&l.bias)?;
        h = pre.map(|v| l.activation.apply(v));
    }
    Ok(h.into_reshaped(&net.seed_shape)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identity_layer_passes_features_through() {
        let net = MappingNet::new(
            vec![DenseLayer {
                weight: DenseTensor::identity(3),
                bias: DenseTensor::zeros(&[3]),
                activation: Activation::Identity,
            }],
            vec![3],
        )
        .unwrap();
        let f = DenseTensor::vector(&[0.5, -1.0, 2.0]);
        assert_eq!(mapping_forward(&net, &f).unwrap(), f);
    }

    #[test]
    fn zero_net_gives_zero_seed() {
        let mut rng = ChaCha8Rng::seed_from_u64(61);
        let net = MappingNet::init(4, &[(4, Activation::Tanh)], &[2, 2], &mut rng).zeroed();
        let seed = mapping_forward(&net, &DenseTensor::randn(&[4], 1.0, &mut rng)).unwrap();
        assert_eq!(seed, DenseTensor::zeros(&[2, 2]));
    }

    #[test]
    fn two_layer_net_matches_loop_evaluation() {
        let mut rng = ChaCha8Rng::seed_from_u64(62);
        let mut net = MappingNet::init(3, &[(4, Activation::Tanh)], &[2], &mut rng);
        for p in net.params_mut() {
            *p = DenseTensor::randn(p.shape(), 1.0, &mut rng);
        }
        let f = DenseTensor::vector(&[0.3, -0.7, 1.1]);
        let seed = mapping_forward(&net, &f).unwrap();
        let (l0, l1) = (&net.layers()[0], &net.layers()[1]);
        let mut hidden = [0.0; 4];
        for (j, h) in hidden.iter_mut().enumerate() {
            let mut s = l0.bias.data()[j];
            for i in 0..3 {
                s += l0.weight.get(&[j, i]) * f.data()[i];
            }
            *h = s.tanh();
        }
        for k in 0..2 {
            let mut s = l1.bias.data()[k];
            for (j, h) in hidden.iter().enumerate() {
                s += l1.weight.get(&[k, j]) * h;
            }
            assert!((seed.data()[k] - s).abs() <= 1e-12);
        }
    }

    #[test]
    fn rejects_broken_chains() {
        let layer = |o: usize, i: usize, act| DenseLayer {
            weight: DenseTensor::zeros(&[o, i]),
            bias: DenseTensor::zeros(&[o]),
            activation: act,
        };
        assert!(MappingNet::new(vec![layer(4, 3, Activation::Tanh), layer(2, 5, Activation::Identity)], vec![2]).is_err());
        assert!(MappingNet::new(vec![layer(2, 3, Activation::Tanh)], vec![2]).is_err());
        assert!(MappingNet::new(vec![layer(4, 3, Activation::Identity)], vec![2]).is_err());
        assert!(MappingNet::new(vec![layer(4, 3, Activation::Identity)], vec![2, 2]).is_ok());
    }

    #[test]
    fn lipschitz_bound_holds_on_random_pairs() {
        let mut rng = ChaCha8Rng::seed_from_u64(63);
        let net = MappingNet::init(5, &[(6, Activation::Tanh), (6, Activation::Relu)], &[3], &mut rng);
        let lip = net.lipschitz_bound();
        for _ in 0..50 {
            let f1 = DenseTensor::randn(&[5], 1.0, &mut rng);
            let f2 = DenseTensor::randn(&[5], 1.0, &mut rng);
            let dy = mapping_forward(&net, &f1).unwrap().sub(&mapping_forward(&net, &f2).unwrap()).unwrap().norm();
            assert!(dy <= lip * f1.sub(&f2).unwrap().norm() + 1e-12);
        }
    }

    #[test]
    fn output_bias_sets_operating_point() {
        let mut rng = ChaCha8Rng::seed_from_u64(64);
        let net = MappingNet::init(3, &[(4, Activation::Tanh)], &[2, 2], &mut rng)
            .zeroed()
            .with_output_bias(&DenseTensor::identity(2))
            .unwrap();
        assert_eq!(mapping_forward(&net, &DenseTensor::ones(&[3])).unwrap(), DenseTensor::identity(2));
    }
}
