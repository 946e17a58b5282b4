use rand::Rng;

use super::matrix::{check_ring_pair, ring_close, scale_last_axis};
use super::{expect_order, expect_seed_shape, AdapterError};
use crate::tensor::{contract, conv2d_forward, DenseTensor};

/// Conv-LoRA: a bank of `R` small `K×K×I` filters followed by an `R×O`
/// channel-recovery matrix, `Δ𝒲 = scale · 𝒜 ×⁴₁ B`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvLoRA {
    pub a: DenseTensor,
    pub b: DenseTensor,
    pub scale: f64,
}

impl ConvLoRA {
    /// `a: K×K×I×R`, `b: R×O`.
    pub fn new(a: DenseTensor, b: DenseTensor, scale: f64) -> Result<Self, AdapterError> {
        check_conv_pair(&a, &b)?;
        Ok(Self { a, b, scale })
    }

    /// Gaussian filters with std `1/√(K·K·I)`, zero recovery matrix.
    pub fn init<R: Rng + ?Sized>(
        kernel: usize,
        input: usize,
        output: usize,
        rank: usize,
        rng: &mut R,
    ) -> Self {
        let fan_in = (kernel * kernel * input) as f64;
        Self {
            a: DenseTensor::randn(&[kernel, kernel, input, rank], 1.0 / fan_in.sqrt(), rng),
            b: DenseTensor::zeros(&[rank, output]),
            scale: 1.0,
        }
    }

    pub fn rank(&self) -> usize {
        self.a.shape()[3]
    }

    /// `(K, I, O)`.
    pub fn geometry(&self) -> (usize, usize, usize) {
        (self.a.shape()[0], self.a.shape()[2], self.b.shape()[1])
    }
}

pub fn conv_lora_delta(ad: &ConvLoRA) -> Result<DenseTensor, AdapterError> {
    Ok(contract(&ad.a, &ad.b, &[(3, 0)])?.scale(ad.scale))
}

/// Applies Conv-LoRA without materializing `Δ𝒲`: convolve with the rank-`R`
/// filter bank, then map channels `R → O` with `B` (a 1×1 convolution).
pub fn conv_lora_apply_factored(
    x: &DenseTensor,
    ad: &ConvLoRA,
    stride: usize,
    padding: usize,
) -> Result<DenseTensor, AdapterError> {
    let reduced = conv2d_forward(x, &ad.a, stride, padding)?; // H′ × W′ × R
    Ok(contract(&reduced, &ad.b, &[(2, 0)])?.scale(ad.scale))
}

/// Convolutional MetaLoRA (CP): `Δ𝒲 = Σ_r 𝒜[..,r] ⊗ B[r,:] · c_r`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvMetaCPAdapter {
    pub a: DenseTensor,
    pub b: DenseTensor,
    pub scale: f64,
}

impl ConvMetaCPAdapter {
    pub fn new(a: DenseTensor, b: DenseTensor, scale: f64) -> Result<Self, AdapterError> {
        check_conv_pair(&a, &b)?;
        Ok(Self { a, b, scale })
    }

    pub fn init<R: Rng + ?Sized>(
        kernel: usize,
        input: usize,
        output: usize,
        rank: usize,
        rng: &mut R,
    ) -> Self {
        let lora = ConvLoRA::init(kernel, input, output, rank, rng);
        Self {
            a: lora.a,
            b: lora.b,
            scale: 1.0,
        }
    }

    pub fn seed_dim(&self) -> usize {
        self.a.shape()[3]
    }

    pub fn geometry(&self) -> (usize, usize, usize) {
        (self.a.shape()[0], self.a.shape()[2], self.b.shape()[1])
    }
}

pub fn conv_meta_cp_delta(
    ad: &ConvMetaCPAdapter,
    c: &DenseTensor,
) -> Result<DenseTensor, AdapterError> {
    expect_seed_shape(c, &[ad.seed_dim()])?;
    let scaled = scale_last_axis(&ad.a, c);
    Ok(contract(&scaled, &ad.b, &[(3, 0)])?.scale(ad.scale))
}

/// Convolutional MetaLoRA (TR). The kernel's `K·K·I` axes are folded into
/// the physical axis of `A` (`R × K·K·I × R`), so the matrix ring
/// contraction applies unchanged and the result is reshaped to `K×K×I×O`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvMetaTRAdapter {
    pub a: DenseTensor,
    pub b: DenseTensor,
    pub kernel: usize,
    pub in_channels: usize,
    pub scale: f64,
}

impl ConvMetaTRAdapter {
    pub fn new(
        a: DenseTensor,
        b: DenseTensor,
        kernel: usize,
        in_channels: usize,
        scale: f64,
    ) -> Result<Self, AdapterError> {
        check_ring_pair(&a, &b)?;
        if kernel == 0 || in_channels == 0 || a.shape()[1] != kernel * kernel * in_channels {
            return Err(AdapterError::Shape(format!(
                "A's middle extent {} must equal K·K·I = {}·{}·{}",
                a.shape()[1],
                kernel,
                kernel,
                in_channels
            )));
        }
        Ok(Self {
            a,
            b,
            kernel,
            in_channels,
            scale,
        })
    }

    pub fn init<R: Rng + ?Sized>(
        kernel: usize,
        input: usize,
        output: usize,
        rank: usize,
        rng: &mut R,
    ) -> Self {
        let folded = kernel * kernel * input;
        Self {
            a: DenseTensor::randn(&[rank, folded, rank], 1.0 / ((rank * folded) as f64).sqrt(), rng),
            b: DenseTensor::zeros(&[rank, output, rank]),
            kernel,
            in_channels: input,
            scale: 1.0,
        }
    }

    pub fn rank(&self) -> usize {
        self.a.shape()[0]
    }

    pub fn seed_shape(&self) -> [usize; 2] {
        [self.rank(), self.rank()]
    }

    pub fn geometry(&self) -> (usize, usize, usize) {
        (self.kernel, self.in_channels, self.b.shape()[1])
    }
}

pub fn conv_meta_tr_delta(
    ad: &ConvMetaTRAdapter,
    c: &DenseTensor,
) -> Result<DenseTensor, AdapterError> {
    expect_seed_shape(c, &ad.seed_shape())?;
    let (k, i, o) = ad.geometry();
    let matricized = ring_close(&ad.a, &ad.b, c)?.scale(ad.scale);
    Ok(matricized.into_reshaped(&[k, k, i, o])?)
}

fn check_conv_pair(a: &DenseTensor, b: &DenseTensor) -> Result<(), AdapterError> {
    expect_order(a, 4, "A")?;
    expect_order(b, 2, "B")?;
    if a.shape()[0] != a.shape()[1] {
        return Err(AdapterError::Shape(format!(
            "kernel must be square, got {}×{}",
            a.shape()[0],
            a.shape()[1]
        )));
    }
    if a.shape()[3] != b.shape()[0] {
        return Err(AdapterError::Shape(format!(
            "A is {:?} but B is {:?}; rank axes differ",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}
