use rand::Rng;

use super::{expect_order, expect_seed_shape, AdapterError};
use crate::tensor::{contract, matmul, DenseTensor};

/// Static LoRA on a weight matrix: `ΔW = scale · A·B`.
#[derive(Debug, Clone, PartialEq)]
pub struct MatrixLoRA {
    pub a: DenseTensor,
    pub b: DenseTensor,
    pub scale: f64,
}

impl MatrixLoRA {
    /// `a: I×R`, `b: R×O`.
    pub fn new(a: DenseTensor, b: DenseTensor, scale: f64) -> Result<Self, AdapterError> {
        check_matrix_pair(&a, &b)?;
        Ok(Self { a, b, scale })
    }

    /// Gaussian `A` with std `1/√I`, zero `B`.
    pub fn init<R: Rng + ?Sized>(input: usize, output: usize, rank: usize, rng: &mut R) -> Self {
        Self {
            a: DenseTensor::randn(&[input, rank], 1.0 / (input as f64).sqrt(), rng),
            b: DenseTensor::zeros(&[rank, output]),
            scale: 1.0,
        }
    }

    pub fn rank(&self) -> usize {
        self.a.shape()[1]
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.a.shape()[0], self.b.shape()[1])
    }

    /// Returns a message when the rank exceeds `min(I, O)`; such adapters
    /// are legal but cannot be lower-rank than the weight they adapt.
    pub fn rank_warning(&self) -> Option<String> {
        let (i, o) = self.dims();
        (self.rank() > i.min(o)).then(|| {
            format!("LoRA rank {} exceeds min(I, O) = {}", self.rank(), i.min(o))
        })
    }
}

pub fn matrix_lora_delta(ad: &MatrixLoRA) -> Result<DenseTensor, AdapterError> {
    Ok(matmul(&ad.a, &ad.b)?.scale(ad.scale))
}

/// MetaLoRA in CP form: `ΔW = Σ_r A[:,r] ⊗ B[r,:] · c_r`, with `c` supplied
/// per call. The diagonal core is the identity and is never stored.
#[derive(Debug, Clone, PartialEq)]
pub struct MetaCPAdapter {
    pub a: DenseTensor,
    pub b: DenseTensor,
    pub scale: f64,
}

impl MetaCPAdapter {
    pub fn new(a: DenseTensor, b: DenseTensor, scale: f64) -> Result<Self, AdapterError> {
        check_matrix_pair(&a, &b)?;
        Ok(Self { a, b, scale })
    }

    pub fn init<R: Rng + ?Sized>(input: usize, output: usize, rank: usize, rng: &mut R) -> Self {
        let lora = MatrixLoRA::init(input, output, rank, rng);
        Self {
            a: lora.a,
            b: lora.b,
            scale: 1.0,
        }
    }

    pub fn seed_dim(&self) -> usize {
        self.a.shape()[1]
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.a.shape()[0], self.b.shape()[1])
    }
}

/// `ΔW[i,o] = scale · Σ_r A[i,r]·B[r,o]·c[r]`, i.e. `A·diag(c)·B`.
pub fn meta_cp_delta(ad: &MetaCPAdapter, c: &DenseTensor) -> Result<DenseTensor, AdapterError> {
    expect_seed_shape(c, &[ad.seed_dim()])?;
    let scaled = scale_last_axis(&ad.a, c);
    Ok(matmul(&scaled, &ad.b)?.scale(ad.scale))
}

/// MetaLoRA in tensor-ring form:
/// `ΔW[i,o] = Σ_{r0,r1,r2} A[r0,i,r1]·B[r1,o,r2]·C[r2,r0]`.
#[derive(Debug, Clone, PartialEq)]
pub struct MetaTRAdapter {
    pub a: DenseTensor,
    pub b: DenseTensor,
    pub scale: f64,
}

impl MetaTRAdapter {
    /// `a: R×I×R`, `b: R×O×R`.
    pub fn new(a: DenseTensor, b: DenseTensor, scale: f64) -> Result<Self, AdapterError> {
        check_ring_pair(&a, &b)?;
        Ok(Self { a, b, scale })
    }

    /// Gaussian `A` with std `1/√(R·I)`, zero `B`.
    pub fn init<R: Rng + ?Sized>(input: usize, output: usize, rank: usize, rng: &mut R) -> Self {
        Self {
            a: DenseTensor::randn(&[rank, input, rank], 1.0 / ((rank * input) as f64).sqrt(), rng),
            b: DenseTensor::zeros(&[rank, output, rank]),
            scale: 1.0,
        }
    }

    pub fn rank(&self) -> usize {
        self.a.shape()[0]
    }

    pub fn seed_shape(&self) -> [usize; 2] {
        [self.rank(), self.rank()]
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.a.shape()[1], self.b.shape()[1])
    }
}

/// Closes the ring `Tr(A[:,i,:]·B[:,o,:]·C)` for every `(i, o)`.
pub fn meta_tr_delta(ad: &MetaTRAdapter, c: &DenseTensor) -> Result<DenseTensor, AdapterError> {
    expect_seed_shape(c, &ad.seed_shape())?;
    ring_close(&ad.a, &ad.b, c).map(|d| d.scale(ad.scale))
}

/// `Σ_{r0,r1,r2} A[r0,i,r1]·B[r1,o,r2]·C[r2,r0]` as two contractions.
pub(crate) fn ring_close(
    a: &DenseTensor,
    b: &DenseTensor,
    c: &DenseTensor,
) -> Result<DenseTensor, AdapterError> {
    let ab = contract(a, b, &[(2, 0)])?; // r0, i, o, r2
    Ok(contract(&ab, c, &[(3, 0), (0, 1)])?) // i, o
}

/// `x[..., r] · v[r]`.
pub(crate) fn scale_last_axis(x: &DenseTensor, v: &DenseTensor) -> DenseTensor {
    let r = v.len();
    let mut out = x.clone();
    for row in out.data_mut().chunks_exact_mut(r) {
        for (o, s) in row.iter_mut().zip(v.data()) {
            *o *= s;
        }
    }
    out
}

fn check_matrix_pair(a: &DenseTensor, b: &DenseTensor) -> Result<(), AdapterError> {
    expect_order(a, 2, "A")?;
    expect_order(b, 2, "B")?;
    if a.shape()[1] != b.shape()[0] {
        return Err(AdapterError::Shape(format!(
            "A is {:?} but B is {:?}; rank axes differ",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

pub(super) fn check_ring_pair(a: &DenseTensor, b: &DenseTensor) -> Result<(), AdapterError> {
    expect_order(a, 3, "A")?;
    expect_order(b, 3, "B")?;
    let r = a.shape()[0];
    if a.shape()[2] != r || b.shape()[0] != r || b.shape()[2] != r {
        return Err(AdapterError::Shape(format!(
            "tensor-ring factors need a single bond rank; got A {:?}, B {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{cp_reconstruct, tr_reconstruct};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(21)
    }

    #[test]
    fn lora_zero_factor_and_identity() {
        let mut r = rng();
        let ad = MatrixLoRA::new(DenseTensor::zeros(&[3, 2]), DenseTensor::randn(&[2, 4], 1.0, &mut r), 1.0).unwrap();
        assert!(matrix_lora_delta(&ad).unwrap().data().iter().all(|&v| v == 0.0));
        let id = MatrixLoRA::new(DenseTensor::identity(3), DenseTensor::identity(3), 1.0).unwrap();
        assert_eq!(matrix_lora_delta(&id).unwrap(), DenseTensor::identity(3));
    }

    #[test]
    fn lora_matches_triple_loop() {
        let mut r = rng();
        let ad = MatrixLoRA::new(
            DenseTensor::randn(&[3, 2], 1.0, &mut r),
            DenseTensor::randn(&[2, 4], 1.0, &mut r),
            0.5,
        )
        .unwrap();
        let d = matrix_lora_delta(&ad).unwrap();
        for i in 0..3 {
            for o in 0..4 {
                let s: f64 = (0..2).map(|k| ad.a.get(&[i, k]) * ad.b.get(&[k, o])).sum();
                assert!((d.get(&[i, o]) - 0.5 * s).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn lora_init_is_zero_delta_and_warns_on_large_rank() {
        let mut r = rng();
        let ad = MatrixLoRA::init(4, 3, 5, &mut r);
        assert!(matrix_lora_delta(&ad).unwrap().data().iter().all(|&v| v == 0.0));
        assert!(ad.rank_warning().is_some());
        assert!(MatrixLoRA::init(4, 3, 2, &mut r).rank_warning().is_none());
    }

    #[test]
    fn meta_cp_examples() {
        let id = MetaCPAdapter::new(DenseTensor::identity(2), DenseTensor::identity(2), 1.0).unwrap();
        let d = meta_cp_delta(&id, &DenseTensor::vector(&[2.0, 3.0])).unwrap();
        assert_eq!(d.data(), &[2.0, 0.0, 0.0, 3.0]);
        let z = meta_cp_delta(&id, &DenseTensor::zeros(&[2])).unwrap();
        assert!(z.data().iter().all(|&v| v == 0.0));
        assert!(matches!(
            meta_cp_delta(&id, &DenseTensor::zeros(&[3])),
            Err(AdapterError::SeedShape { .. })
        ));
    }

    #[test]
    fn meta_cp_matches_triple_sum_and_cp_reconstruct() {
        let mut r = rng();
        let ad = MetaCPAdapter::new(
            DenseTensor::randn(&[3, 2], 1.0, &mut r),
            DenseTensor::randn(&[2, 4], 1.0, &mut r),
            1.0,
        )
        .unwrap();
        let c = DenseTensor::randn(&[2], 1.0, &mut r);
        let d = meta_cp_delta(&ad, &c).unwrap();
        let brute = DenseTensor::from_fn(&[3, 4], |io| {
            (0..2).map(|k| ad.a.get(&[io[0], k]) * ad.b.get(&[k, io[1]]) * c.data()[k]).sum()
        });
        assert!(d.rel_error(&brute).unwrap() <= 1e-12);
        let via_cp = cp_reconstruct(&[ad.a.clone(), ad.b.transpose().unwrap()], &c).unwrap();
        assert!(d.rel_error(&via_cp).unwrap() <= 1e-12);
    }

    #[test]
    fn meta_tr_examples() {
        let ad = MetaTRAdapter::new(
            DenseTensor::new(vec![1, 3, 1], vec![1.0, 2.0, 3.0]).unwrap(),
            DenseTensor::new(vec![1, 2, 1], vec![4.0, 5.0]).unwrap(),
            1.0,
        )
        .unwrap();
        let d = meta_tr_delta(&ad, &DenseTensor::new(vec![1, 1], vec![0.5]).unwrap()).unwrap();
        assert_eq!(d.data(), &[2.0, 2.5, 4.0, 5.0, 6.0, 7.5]);
        let z = meta_tr_delta(&ad, &DenseTensor::zeros(&[1, 1])).unwrap();
        assert!(z.data().iter().all(|&v| v == 0.0));
        assert!(meta_tr_delta(&ad, &DenseTensor::zeros(&[2, 2])).is_err());
    }

    #[test]
    fn meta_tr_matches_bond_sum_and_tr_reconstruct() {
        let mut r = rng();
        let ad = MetaTRAdapter::new(
            DenseTensor::randn(&[2, 3, 2], 1.0, &mut r),
            DenseTensor::randn(&[2, 4, 2], 1.0, &mut r),
            1.0,
        )
        .unwrap();
        let c = DenseTensor::randn(&[2, 2], 1.0, &mut r);
        let d = meta_tr_delta(&ad, &c).unwrap();
        let brute = DenseTensor::from_fn(&[3, 4], |io| {
            let mut s = 0.0;
            for r0 in 0..2 {
                for r1 in 0..2 {
                    for r2 in 0..2 {
                        s += ad.a.get(&[r0, io[0], r1]) * ad.b.get(&[r1, io[1], r2]) * c.get(&[r2, r0]);
                    }
                }
            }
            s
        });
        assert!(d.rel_error(&brute).unwrap() <= 1e-12);
        let ring = tr_reconstruct(&[ad.a.clone(), ad.b.clone(), c.reshape(&[2, 1, 2]).unwrap()]).unwrap();
        assert!(d.rel_error(&ring.reshape(&[3, 4]).unwrap()).unwrap() <= 1e-12);
    }

    #[test]
    fn ring_shape_validation() {
        assert!(MetaTRAdapter::new(DenseTensor::zeros(&[2, 3, 3]), DenseTensor::zeros(&[2, 4, 2]), 1.0).is_err());
        assert!(MetaTRAdapter::new(DenseTensor::zeros(&[2, 3]), DenseTensor::zeros(&[2, 4, 2]), 1.0).is_err());
    }
}
