use super::{DenseTensor, TensorError};

/// Contracts `a` and `b` over the listed `(axis of a, axis of b)` pairs.
///
/// The result has order `order(a) + order(b) − 2·|pairs|`: first a's
/// uncontracted axes in their original order, then b's. An empty `pairs`
/// list gives the outer product; contracting every axis gives a scalar.
pub fn contract(
    a: &DenseTensor,
    b: &DenseTensor,
    pairs: &[(usize, usize)],
) -> Result<DenseTensor, TensorError> {
    let (na, nb) = (a.order(), b.order());
    let mut used_a = vec![false; na];
    let mut used_b = vec![false; nb];
    for (pair, &(ax, bx)) in pairs.iter().enumerate() {
        if ax >= na {
            return Err(TensorError::InvalidAxis { axis: ax, order: na });
        }
        if bx >= nb {
            return Err(TensorError::InvalidAxis { axis: bx, order: nb });
        }
        if used_a[ax] {
            return Err(TensorError::DuplicateAxis { axis: ax });
        }
        if used_b[bx] {
            return Err(TensorError::DuplicateAxis { axis: bx });
        }
        used_a[ax] = true;
        used_b[bx] = true;
        if a.shape()[ax] != b.shape()[bx] {
            return Err(TensorError::PairExtentMismatch {
                pair,
                a_axis: ax,
                b_axis: bx,
                a_extent: a.shape()[ax],
                b_extent: b.shape()[bx],
            });
        }
    }

    let free_a: Vec<usize> = (0..na).filter(|&i| !used_a[i]).collect();
    let free_b: Vec<usize> = (0..nb).filter(|&i| !used_b[i]).collect();

    let perm_a: Vec<usize> = free_a.iter().copied().chain(pairs.iter().map(|p| p.0)).collect();
    let perm_b: Vec<usize> = pairs.iter().map(|p| p.1).chain(free_b.iter().copied()).collect();
    let a_perm = a.permute(&perm_a)?;
    let b_perm = b.permute(&perm_b)?;

    let m: usize = free_a.iter().map(|&i| a.shape()[i]).product();
    let n: usize = free_b.iter().map(|&i| b.shape()[i]).product();
    let s: usize = pairs.iter().map(|p| a.shape()[p.0]).product();

    let data = gemm(a_perm.data(), b_perm.data(), m, s, n);
    let shape: Vec<usize> = free_a
        .iter()
        .map(|&i| a.shape()[i])
        .chain(free_b.iter().map(|&i| b.shape()[i]))
        .collect();
    DenseTensor::new(shape, data)
}

/// Plain matrix product of two 2-order tensors.
pub fn matmul(a: &DenseTensor, b: &DenseTensor) -> Result<DenseTensor, TensorError> {
    for t in [a, b] {
        if t.order() != 2 {
            return Err(TensorError::OrderMismatch {
                expected: 2,
                actual: t.order(),
            });
        }
    }
    contract(a, b, &[(1, 0)])
}

fn gemm(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for (kk, &aik) in a[i * k..(i + 1) * k].iter().enumerate() {
            if aik == 0.0 {
                continue;
            }
            for (o, &bkj) in row.iter_mut().zip(&b[kk * n..(kk + 1) * n]) {
                *o += aik * bkj;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::increment_index;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn triple_loop(a: &DenseTensor, b: &DenseTensor) -> DenseTensor {
        let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
        DenseTensor::from_fn(&[m, n], |ij| {
            let mut s = 0.0;
            for kk in 0..k {
                s += a.get(&[ij[0], kk]) * b.get(&[kk, ij[1]]);
            }
            s
        })
    }

    #[test]
    fn identity_contraction_returns_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = DenseTensor::randn(&[3, 4], 1.0, &mut rng);
        let out = contract(&m, &DenseTensor::identity(4), &[(1, 0)]).unwrap();
        assert_eq!(out, m);
    }

    #[test]
    fn matches_triple_loop_matmul() {
        let a = DenseTensor::matrix(&[&[1.0, -2.0, 0.5], &[3.0, 0.25, -1.0]]);
        let b = DenseTensor::matrix(&[&[2.0, 1.0], &[-1.0, 4.0], &[0.5, -3.0]]);
        let out = contract(&a, &b, &[(1, 0)]).unwrap();
        // Frozen from the triple-loop oracle: [[4.25, -8.5], [5.25, 7.0]].
        assert_eq!(out.data(), &[4.25, -8.5, 5.25, 7.0]);
        assert_eq!(out, triple_loop(&a, &b));
    }

    #[test]
    fn three_by_four_order_with_two_pairs_gives_order_three() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = DenseTensor::randn(&[2, 3, 4], 1.0, &mut rng);
        let b = DenseTensor::randn(&[4, 5, 3, 2], 1.0, &mut rng);
        let c = contract(&a, &b, &[(1, 2), (2, 0)]).unwrap();
        assert_eq!(c.shape(), &[2, 5, 2]);
        for i in 0..2 {
            for j in 0..5 {
                for l in 0..2 {
                    let mut s = 0.0;
                    for x in 0..3 {
                        for y in 0..4 {
                            s += a.get(&[i, x, y]) * b.get(&[y, j, x, l]);
                        }
                    }
                    assert!((c.get(&[i, j, l]) - s).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn empty_pairs_is_outer_product_and_full_pairs_is_scalar() {
        let u = DenseTensor::vector(&[1.0, 2.0]);
        let v = DenseTensor::vector(&[3.0, 4.0, 5.0]);
        let outer = contract(&u, &v, &[]).unwrap();
        assert_eq!(outer.shape(), &[2, 3]);
        assert_eq!(outer.get(&[1, 2]), 10.0);
        let dot = contract(&u, &u, &[(0, 0)]).unwrap();
        assert_eq!(dot.order(), 0);
        assert_eq!(dot.item(), 5.0);
    }

    #[test]
    fn reports_offending_pair() {
        let a = DenseTensor::zeros(&[2, 3]);
        let b = DenseTensor::zeros(&[3, 4]);
        let err = contract(&a, &b, &[(1, 0), (0, 1)]).unwrap_err();
        assert_eq!(
            err,
            TensorError::PairExtentMismatch {
                pair: 1,
                a_axis: 0,
                b_axis: 1,
                a_extent: 2,
                b_extent: 4
            }
        );
        assert!(matches!(
            contract(&a, &b, &[(2, 0)]),
            Err(TensorError::InvalidAxis { axis: 2, order: 2 })
        ));
        assert!(matches!(
            contract(&a, &DenseTensor::zeros(&[3, 3]), &[(1, 0), (1, 1)]),
            Err(TensorError::DuplicateAxis { axis: 1 })
        ));
    }

    /// Brute-force contraction by enumerating every output and summed index.
    fn brute_contract(a: &DenseTensor, b: &DenseTensor, pairs: &[(usize, usize)]) -> DenseTensor {
        let free_a: Vec<usize> = (0..a.order()).filter(|i| !pairs.iter().any(|p| p.0 == *i)).collect();
        let free_b: Vec<usize> = (0..b.order()).filter(|i| !pairs.iter().any(|p| p.1 == *i)).collect();
        let out_shape: Vec<usize> = free_a
            .iter()
            .map(|&i| a.shape()[i])
            .chain(free_b.iter().map(|&i| b.shape()[i]))
            .collect();
        let sum_shape: Vec<usize> = pairs.iter().map(|p| a.shape()[p.0]).collect();
        let sum_len: usize = sum_shape.iter().product();
        let eval = |oi: &[usize]| {
            let mut ia = vec![0; a.order()];
            let mut ib = vec![0; b.order()];
            for (k, &ax) in free_a.iter().enumerate() {
                ia[ax] = oi[k];
            }
            for (k, &bx) in free_b.iter().enumerate() {
                ib[bx] = oi[free_a.len() + k];
            }
            let mut si = vec![0; pairs.len()];
            let mut acc = 0.0;
            for _ in 0..sum_len {
                for (k, &(ax, bx)) in pairs.iter().enumerate() {
                    ia[ax] = si[k];
                    ib[bx] = si[k];
                }
                acc += a.get(&ia) * b.get(&ib);
                increment_index(&mut si, &sum_shape);
            }
            acc
        };
        if out_shape.is_empty() {
            DenseTensor::scalar(eval(&[]))
        } else {
            DenseTensor::from_fn(&out_shape, eval)
        }
    }

    fn contraction_case() -> impl Strategy<Value = (DenseTensor, DenseTensor, Vec<(usize, usize)>, f64, f64)> {
        (1usize..=3, 1usize..=3, 0usize..=2, any::<u64>()).prop_map(|(free_a, free_b, s, seed)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            use rand::Rng;
            let shared: Vec<usize> = (0..s).map(|_| rng.random_range(1..=3)).collect();
            let fa: Vec<usize> = (0..free_a).map(|_| rng.random_range(1..=3)).collect();
            let fb: Vec<usize> = (0..free_b).map(|_| rng.random_range(1..=3)).collect();
            // Interleave shared axes at the front of a and the back of b.
            let a_shape: Vec<usize> = shared.iter().chain(&fa).copied().collect();
            let b_shape: Vec<usize> = fb.iter().chain(shared.iter().rev()).copied().collect();
            let pairs: Vec<(usize, usize)> = (0..s).map(|k| (k, b_shape.len() - 1 - k)).collect();
            let a = DenseTensor::randn(&a_shape, 1.0, &mut rng);
            let b = DenseTensor::randn(&b_shape, 1.0, &mut rng);
            (a, b, pairs, rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0))
        })
    }

    proptest! {
        #[test]
        fn order_bookkeeping_and_brute_force((a, b, pairs, _, _) in contraction_case()) {
            let c = contract(&a, &b, &pairs).unwrap();
            prop_assert_eq!(c.order(), a.order() + b.order() - 2 * pairs.len());
            let oracle = brute_contract(&a, &b, &pairs);
            prop_assert!(c.rel_error(&oracle).unwrap() <= 1e-12);
        }

        #[test]
        fn bilinear_in_first_operand((a1, b, pairs, alpha, beta) in contraction_case(), seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a2 = DenseTensor::randn(a1.shape(), 1.0, &mut rng);
            let mixed = a1.scale(alpha).add(&a2.scale(beta)).unwrap();
            let lhs = contract(&mixed, &b, &pairs).unwrap();
            let rhs = contract(&a1, &b, &pairs).unwrap().scale(alpha)
                .add(&contract(&a2, &b, &pairs).unwrap().scale(beta)).unwrap();
            prop_assert!(lhs.rel_error(&rhs).unwrap() <= 1e-12);
        }
    }
}
