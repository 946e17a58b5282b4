use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use metalora_core::adapters::{matrix_lora_delta, meta_cp_delta, meta_tr_delta, MatrixLoRA, MetaCPAdapter, MetaTRAdapter};
use metalora_core::tensor::{build_dummy_tensor, contract, cp_reconstruct, tr_reconstruct, DenseTensor, DummyTensorSpec};

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn close(a: &DenseTensor, b: &DenseTensor) -> bool {
    a.shape() == b.shape() && a.rel_error(b).unwrap() <= 1e-12
}

proptest! {
    #[test]
    fn contraction_commutes_up_to_axis_order(
        p in 1usize..5, q in 1usize..5, r in 1usize..5, s in 1usize..5, seed in any::<u64>()
    ) {
        let mut g = rng(seed);
        let a = DenseTensor::randn(&[p, q, r], 1.0, &mut g);
        let b = DenseTensor::randn(&[r, s], 1.0, &mut g);
        let ab = contract(&a, &b, &[(2, 0)]).unwrap();
        let ba = contract(&b, &a, &[(0, 2)]).unwrap().permute(&[1, 2, 0]).unwrap();
        prop_assert!(close(&ab, &ba));
    }

    #[test]
    fn dummy_entries_follow_the_index_law(
        alpha in 1usize..=12, beta in 1usize..=5, s in 1usize..=3, p in 0usize..=2
    ) {
        prop_assume!(alpha + 2 * p >= beta);
        let spec = DummyTensorSpec::new(alpha, beta, s, p).unwrap();
        let t = build_dummy_tensor(&spec);
        let out = spec.output_len();
        prop_assert_eq!(t.shape(), &[alpha, out, beta][..]);
        for j in 0..alpha {
            for jp in 0..out {
                for k in 0..beta {
                    let hit = (s * jp + k) as isize - p as isize == j as isize;
                    prop_assert_eq!(t.get(&[j, jp, k]), if hit { 1.0 } else { 0.0 });
                }
            }
        }
    }

    #[test]
    fn ring_rotation_rotates_the_axes(
        dims in proptest::collection::vec(1usize..4, 3),
        ranks in proptest::collection::vec(1usize..4, 3),
        seed in any::<u64>()
    ) {
        let mut g = rng(seed);
        let cores: Vec<DenseTensor> = (0..3)
            .map(|n| DenseTensor::randn(&[ranks[n], dims[n], ranks[(n + 1) % 3]], 1.0, &mut g))
            .collect();
        let x = tr_reconstruct(&cores).unwrap();
        let rotated = tr_reconstruct(&[cores[1].clone(), cores[2].clone(), cores[0].clone()]).unwrap();
        prop_assert!(close(&rotated, &x.permute(&[1, 2, 0]).unwrap()));
    }

    #[test]
    fn cp_is_linear_in_the_weights(
        dims in proptest::collection::vec(1usize..5, 1..4),
        rank in 1usize..4,
        w in -3.0f64..3.0,
        seed in any::<u64>()
    ) {
        let mut g = rng(seed);
        let factors: Vec<DenseTensor> = dims.iter().map(|&d| DenseTensor::randn(&[d, rank], 1.0, &mut g)).collect();
        let l1 = DenseTensor::randn(&[rank], 1.0, &mut g);
        let l2 = DenseTensor::randn(&[rank], 1.0, &mut g);
        let lhs = cp_reconstruct(&factors, &l1.add(&l2.scale(w)).unwrap()).unwrap();
        let rhs = cp_reconstruct(&factors, &l1)
            .unwrap()
            .add(&cp_reconstruct(&factors, &l2).unwrap().scale(w))
            .unwrap();
        prop_assert!(lhs.sub(&rhs).unwrap().max_abs() <= 1e-12 * (1.0 + rhs.max_abs()));
    }

    #[test]
    fn unit_seeds_recover_static_lora(
        i in 1usize..7, o in 1usize..7, rank in 1usize..4, scale in 0.1f64..3.0, seed in any::<u64>()
    ) {
        let mut g = rng(seed);
        let a = DenseTensor::randn(&[i, rank], 1.0, &mut g);
        let b = DenseTensor::randn(&[rank, o], 1.0, &mut g);
        let lora = matrix_lora_delta(&MatrixLoRA::new(a.clone(), b.clone(), scale).unwrap()).unwrap();
        let cp = meta_cp_delta(&MetaCPAdapter::new(a, b, scale).unwrap(), &DenseTensor::ones(&[rank])).unwrap();
        prop_assert_eq!(lora, cp);
    }

    #[test]
    fn tr_delta_is_a_ring_reconstruction(
        i in 1usize..6, o in 1usize..6, rank in 1usize..4, seed in any::<u64>()
    ) {
        let mut g = rng(seed);
        let a = DenseTensor::randn(&[rank, i, rank], 1.0, &mut g);
        let b = DenseTensor::randn(&[rank, o, rank], 1.0, &mut g);
        let c = DenseTensor::randn(&[rank, rank], 1.0, &mut g);
        let delta = meta_tr_delta(&MetaTRAdapter::new(a.clone(), b.clone(), 1.0).unwrap(), &c).unwrap();
        let seed_core = c.reshape(&[rank, 1, rank]).unwrap();
        let ring = tr_reconstruct(&[a, b, seed_core]).unwrap().reshape(&[i, o]).unwrap();
        prop_assert!(close(&delta, &ring));
    }
}
