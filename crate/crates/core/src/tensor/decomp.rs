use super::{increment_index, DenseTensor, TensorError};

/// Rebuilds a tensor from CP factors: `X[i1..iN] = Σ_r λ_r ∏ₙ A⁽ⁿ⁾[iₙ, r]`.
pub fn cp_reconstruct(
    factors: &[DenseTensor],
    lambdas: &DenseTensor,
) -> Result<DenseTensor, TensorError> {
    if factors.is_empty() {
        return Err(TensorError::Invalid("CP reconstruction needs at least one factor".into()));
    }
    if lambdas.order() != 1 {
        return Err(TensorError::OrderMismatch {
            expected: 1,
            actual: lambdas.order(),
        });
    }
    let rank = lambdas.shape()[0];
    for (index, f) in factors.iter().enumerate() {
        if f.order() != 2 {
            return Err(TensorError::OrderMismatch {
                expected: 2,
                actual: f.order(),
            });
        }
        if f.shape()[1] != rank {
            return Err(TensorError::RankMismatch {
                index,
                expected: rank,
                actual: f.shape()[1],
            });
        }
    }

    let shape: Vec<usize> = factors.iter().map(|f| f.shape()[0]).collect();
    // Accumulate rank-one terms one mode at a time: row-major outer
    // products of the scaled column vectors.
    let mut out = vec![0.0; shape.iter().product()];
    let mut term = Vec::with_capacity(out.len());
    for r in 0..rank {
        term.clear();
        term.push(lambdas.data()[r]);
        for f in factors {
            let rows = f.shape()[0];
            let prev = std::mem::take(&mut term);
            term.reserve(prev.len() * rows);
            for &p in &prev {
                for i in 0..rows {
                    term.push(p * f.data()[i * rank + r]);
                }
            }
        }
        for (o, t) in out.iter_mut().zip(&term) {
            *o += t;
        }
    }
    DenseTensor::new(shape, out)
}

/// Rebuilds a tensor from tensor-ring cores `Gⁿ ∈ R^{Rₙ × Iₙ × Rₙ₊₁}`
/// with `R_{N+1} = R₁`: `X[i1..iN] = Tr(G¹[:,i1,:] ⋯ Gᴺ[:,iN,:])`.
pub fn tr_reconstruct(cores: &[DenseTensor]) -> Result<DenseTensor, TensorError> {
    if cores.is_empty() {
        return Err(TensorError::Invalid("tensor-ring reconstruction needs at least one core".into()));
    }
    for c in cores {
        if c.order() != 3 {
            return Err(TensorError::OrderMismatch {
                expected: 3,
                actual: c.order(),
            });
        }
    }
    let n = cores.len();
    for left in 0..n {
        let right = (left + 1) % n;
        let (lb, rb) = (cores[left].shape()[2], cores[right].shape()[0]);
        if lb != rb {
            return Err(TensorError::BondMismatch {
                left,
                right,
                left_bond: lb,
                right_bond: rb,
            });
        }
    }

    let shape: Vec<usize> = cores.iter().map(|c| c.shape()[1]).collect();
    let r0 = cores[0].shape()[0];
    let mut idx = vec![0usize; n];
    let total: usize = shape.iter().product();
    let mut out = Vec::with_capacity(total);
    let mut acc: Vec<f64> = Vec::new();
    let mut next: Vec<f64> = Vec::new();
    for _ in 0..total {
        // acc holds the running r0 × r_k product of slices.
        let first = &cores[0];
        let (rl, ir, rr) = (first.shape()[0], first.shape()[1], first.shape()[2]);
        acc.clear();
        for a in 0..rl {
            for b in 0..rr {
                acc.push(first.data()[(a * ir + idx[0]) * rr + b]);
            }
        }
        let mut cols = rr;
        for (k, core) in cores.iter().enumerate().skip(1) {
            let (cl, ci, cr) = (core.shape()[0], core.shape()[1], core.shape()[2]);
            debug_assert_eq!(cl, cols);
            next.clear();
            next.resize(r0 * cr, 0.0);
            for a in 0..r0 {
                for m in 0..cl {
                    let av = acc[a * cols + m];
                    if av == 0.0 {
                        continue;
                    }
                    let slice = &core.data()[(m * ci + idx[k]) * cr..(m * ci + idx[k] + 1) * cr];
                    for (dst, &g) in next[a * cr..(a + 1) * cr].iter_mut().zip(slice) {
                        *dst += av * g;
                    }
                }
            }
            std::mem::swap(&mut acc, &mut next);
            cols = cr;
        }
        out.push((0..r0).map(|a| acc[a * cols + a]).sum());
        increment_index(&mut idx, &shape);
    }
    DenseTensor::new(shape, out)
}
