use std::collections::BTreeSet;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::oracles::{self, relative_error};
use super::{Kernels, SuiteReport};
use crate::adapters::{
    conv_lora_apply_factored, conv_meta_cp_delta, conv_meta_tr_delta, matrix_lora_delta, meta_cp_delta,
    param_count, Adapter, AdapterVariant, ConvLoRA, ConvMetaCPAdapter, ConvMetaTRAdapter, MatrixLoRA,
    MetaCPAdapter, MetaTRAdapter,
};
use crate::meta_net::{extract_features, mapping_forward, Activation, DenseLayer, ExtractorKind, FeatureExtractor, MappingNet};
use crate::tensor::{
    build_dummy_tensor, contract, conv1d_via_dummy, conv2d_forward, conv2d_via_dummy, cp_reconstruct,
    tr_reconstruct, DenseTensor, DummyTensorSpec,
};
use crate::training::{
    forward_adapted, forward_reference, gradient_check, train, AdaptationSet, BaseModel, Cue, ExtractorSpec,
    MappingSpec, ModelGeometry, OptimizerConfig, Sample, SeedMode, Split, SyntheticTaskSet, TaskSetSpec,
    TrainConfig, TrainState, VariantKind, VariantSpec,
};

type Body = fn(&Kernels, &mut ChaCha8Rng, &mut Check) -> Result<(), String>;

pub(crate) struct Suite {
    pub name: &'static str,
    criterion: u8,
    tolerance: f64,
    min_cases: usize,
    body: Body,
}

pub(crate) struct Check {
    tolerance: f64,
    cases: usize,
    max_error: f64,
    failure: Option<String>,
}

impl Check {
    fn record(&mut self, error: f64, describe: impl FnOnce() -> String) {
        self.cases += 1;
        let error = if error.is_nan() { f64::INFINITY } else { error };
        self.max_error = self.max_error.max(error);
        if error > self.tolerance && self.failure.is_none() {
            self.failure = Some(format!("{} (error {error:.3e})", describe()));
        }
    }
}

impl Suite {
    pub(crate) fn run(&self, kernels: &Kernels) -> SuiteReport {
        let seed = self.name.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x100_0000_01b3));
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut check = Check {
            tolerance: self.tolerance,
            cases: 0,
            max_error: 0.0,
            failure: None,
        };
        let outcome = (self.body)(kernels, &mut rng, &mut check);
        let mut failure = match outcome {
            Err(e) => Some(e),
            Ok(()) => check.failure,
        };
        if failure.is_none() && check.cases < self.min_cases {
            failure = Some(format!("only {} cases, need {}", check.cases, self.min_cases));
        }
        SuiteReport {
            name: self.name.into(),
            criterion: self.criterion,
            cases: check.cases,
            tolerance: self.tolerance,
            max_error: check.max_error,
            passed: failure.is_none(),
            failure,
        }
    }
}

pub(crate) const ALL: &[Suite] = &[
    Suite { name: "tensor_core.contract_bruteforce", criterion: 1, tolerance: 1e-12, min_cases: 100, body: contract_bruteforce },
    Suite { name: "tensor_core.conv1d_dummy_bruteforce", criterion: 1, tolerance: 1e-12, min_cases: 100, body: conv1d_bruteforce },
    Suite { name: "tensor_core.conv2d_bruteforce", criterion: 1, tolerance: 1e-12, min_cases: 100, body: conv2d_bruteforce },
    Suite { name: "tensor_core.cp_reconstruct_bruteforce", criterion: 1, tolerance: 1e-12, min_cases: 100, body: cp_bruteforce },
    Suite { name: "tensor_core.tr_reconstruct_bruteforce", criterion: 1, tolerance: 1e-12, min_cases: 100, body: tr_bruteforce },
    Suite { name: "tensor_core.dummy_law", criterion: 2, tolerance: 0.0, min_cases: 12 * 5 * 3 * 3, body: dummy_law },
    Suite { name: "adapters.conv_lora_factored", criterion: 3, tolerance: 1e-12, min_cases: 50, body: conv_lora_factored },
    Suite { name: "adapters.meta_cp_bruteforce", criterion: 4, tolerance: 1e-12, min_cases: 20, body: meta_cp_bruteforce },
    Suite { name: "adapters.meta_tr_bruteforce", criterion: 4, tolerance: 1e-12, min_cases: 20, body: meta_tr_bruteforce },
    Suite { name: "adapters.conv_meta_cp_bruteforce", criterion: 4, tolerance: 1e-12, min_cases: 20, body: conv_meta_cp_bruteforce },
    Suite { name: "adapters.conv_meta_tr_bruteforce", criterion: 4, tolerance: 1e-12, min_cases: 20, body: conv_meta_tr_bruteforce },
    Suite { name: "adapters.zero_seed", criterion: 4, tolerance: 1e-12, min_cases: 20, body: zero_seed },
    Suite { name: "adapters.cp_ones_equals_static", criterion: 4, tolerance: 0.0, min_cases: 20, body: cp_ones_equals_static },
    Suite { name: "adapters.param_count", criterion: 7, tolerance: 0.0, min_cases: 100, body: param_count_arithmetic },
    Suite { name: "meta_net.mapping_bruteforce", criterion: 4, tolerance: 1e-12, min_cases: 20, body: mapping_bruteforce },
    Suite { name: "training.gradient_check", criterion: 5, tolerance: 1e-4, min_cases: 20, body: gradient_checks },
    Suite { name: "training.freeze_determinism", criterion: 6, tolerance: 0.0, min_cases: 3, body: freeze_determinism },
];

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

fn extents(rng: &mut ChaCha8Rng, order: usize, max: usize) -> Vec<usize> {
    (0..order).map(|_| rng.random_range(1..=max)).collect()
}

fn randn(shape: &[usize], rng: &mut ChaCha8Rng) -> DenseTensor {
    DenseTensor::randn(shape, 1.0, rng)
}

fn contract_bruteforce(_: &Kernels, rng: &mut ChaCha8Rng, check: &mut Check) -> Result<(), String> {
    let mut case = 0;
    while case < 120 {
        let (oa, ob) = (rng.random_range(0..=3), rng.random_range(0..=3));
        let sa = extents(rng, oa, 8);
        let mut sb = extents(rng, ob, 8);
        let mut axes_a: Vec<usize> = (0..oa).collect();
        let mut axes_b: Vec<usize> = (0..ob).collect();
        axes_a.shuffle(rng);
        axes_b.shuffle(rng);
        let n = rng.random_range(0..=oa.min(ob));
        let pairs: Vec<(usize, usize)> = (0..n).map(|k| (axes_a[k], axes_b[k])).collect();
        for &(x, y) in &pairs {
            sb[y] = sa[x];
        }
        let work = sa.iter().product::<usize>() * sb.iter().product::<usize>();
        if work > 40_000 {
            continue;
        }
        let (a, b) = (randn(&sa, rng), randn(&sb, rng));
        let got = contract(&a, &b, &pairs).map_err(err)?;
        check.record(relative_error(&got, &oracles::contract(&a, &b, &pairs)), || {
            format!("{sa:?} with {sb:?} over {pairs:?}")
        });
        case += 1;
    }
    Ok(())
}

fn conv1d_bruteforce(_: &Kernels, rng: &mut ChaCha8Rng, check: &mut Check) -> Result<(), String> {
    while check.cases < 120 {
        let (alpha, beta) = (rng.random_range(1..=8), rng.random_range(1..=5));
        let (s, p) = (rng.random_range(1..=3), rng.random_range(0..=2));
        if alpha + 2 * p < beta {
            continue;
        }
        let spec = DummyTensorSpec::new(alpha, beta, s, p).map_err(err)?;
        let (a, b) = (randn(&[alpha], rng), randn(&[beta], rng));
        let out_len = (alpha + 2 * p - beta) / s + 1;
        let got = conv1d_via_dummy(&a, &b, &spec).map_err(err)?;
        check.record(relative_error(&got, &oracles::conv1d(&a, &b, s, p, out_len)), || {
            format!("α={alpha} β={beta} s={s} p={p}")
        });
    }
    Ok(())
}

fn conv2d_bruteforce(_: &Kernels, rng: &mut ChaCha8Rng, check: &mut Check) -> Result<(), String> {
    let mut case = 0;
    while case < 110 {
        let (h, w, i, o, k) = (
            rng.random_range(1..=8),
            rng.random_range(1..=8),
            rng.random_range(1..=3),
            rng.random_range(1..=3),
            rng.random_range(1..=3),
        );
        let (s, p) = (rng.random_range(1..=2), rng.random_range(0..=1));
        if h + 2 * p < k || w + 2 * p < k {
            continue;
        }
        let x = randn(&[h, w, i], rng);
        let kern = randn(&[k, k, i, o], rng);
        let want = oracles::conv2d(&x, &kern, s, p);
        let describe = || format!("x {h}×{w}×{i}, kernel {k}×{k}×{i}×{o}, s={s} p={p}");
        check.record(relative_error(&conv2d_forward(&x, &kern, s, p).map_err(err)?, &want), describe);
        check.record(relative_error(&conv2d_via_dummy(&x, &kern, s, p).map_err(err)?, &want), || {
            format!("dummy route: {}", describe())
        });
        case += 1;
    }
    Ok(())
}

fn cp_bruteforce(_: &Kernels, rng: &mut ChaCha8Rng, check: &mut Check) -> Result<(), String> {
    for _ in 0..120 {
        let n = rng.random_range(1..=4);
        let r = rng.random_range(1..=3);
        let shape = extents(rng, n, 8);
        let factors: Vec<DenseTensor> = shape.iter().map(|&e| randn(&[e, r], rng)).collect();
        let lambdas = randn(&[r], rng);
        let got = cp_reconstruct(&factors, &lambdas).map_err(err)?;
        check.record(relative_error(&got, &oracles::cp_reconstruct(&factors, &lambdas)), || {
            format!("shape {shape:?}, rank {r}")
        });
    }
    Ok(())
}

fn tr_bruteforce(_: &Kernels, rng: &mut ChaCha8Rng, check: &mut Check) -> Result<(), String> {
    while check.cases < 120 {
        let n = rng.random_range(1..=4);
        let shape = extents(rng, n, 8);
        let bonds = extents(rng, n, 3);
        if shape.iter().product::<usize>() * bonds.iter().product::<usize>() > 20_000 {
            continue;
        }
        let cores: Vec<DenseTensor> =
            (0..n).map(|k| randn(&[bonds[k], shape[k], bonds[(k + 1) % n]], rng)).collect();
        let got = tr_reconstruct(&cores).map_err(err)?;
        check.record(relative_error(&got, &oracles::tr_reconstruct(&cores)), || {
            format!("shape {shape:?}, bonds {bonds:?}")
        });
    }
    Ok(())
}

/// Counts disagreements with the index rule for every geometry in the grid.
/// Geometries whose kernel exceeds the padded input must be rejected.
fn dummy_law(_: &Kernels, _: &mut ChaCha8Rng, check: &mut Check) -> Result<(), String> {
    for alpha in 1..=12usize {
        for beta in 1..=5usize {
            for s in 1..=3usize {
                for p in 0..=2usize {
                    let describe = || format!("α={alpha} β={beta} s={s} p={p}");
                    let spec = match DummyTensorSpec::new(alpha, beta, s, p) {
                        Ok(spec) => spec,
                        Err(_) => {
                            check.record(if alpha + 2 * p < beta { 0.0 } else { 1.0 }, || {
                                format!("valid geometry rejected: {}", describe())
                            });
                            continue;
                        }
                    };
                    if alpha + 2 * p < beta {
                        check.record(1.0, || format!("invalid geometry accepted: {}", describe()));
                        continue;
                    }
                    let out = (alpha + 2 * p - beta) / s + 1;
                    let t = build_dummy_tensor(&spec);
                    if t.shape() != [alpha, out, beta] {
                        check.record(f64::INFINITY, || format!("shape {:?}: {}", t.shape(), describe()));
                        continue;
                    }
                    let mut wrong = 0usize;
                    oracles::for_each_index(&[alpha, out, beta], |x| {
                        let rule = x[0] as i64 == (s * x[1] + x[2]) as i64 - p as i64;
                        if (t.get(x) == 1.0) != rule || (t.get(x) != 0.0 && t.get(x) != 1.0) {
                            wrong += 1;
                        }
                    });
                    check.record(wrong as f64, describe);
                }
            }
        }
    }
    Ok(())
}

fn conv_lora_factored(_: &Kernels, rng: &mut ChaCha8Rng, check: &mut Check) -> Result<(), String> {
    for _ in 0..60 {
        let (h, w) = (rng.random_range(3..=8), rng.random_range(3..=8));
        let (i, o, r) = (rng.random_range(1..=4), rng.random_range(1..=4), rng.random_range(1..=3));
        let k: usize = *[1, 3, 5].into_iter().filter(|&k| k <= h.min(w)).collect::<Vec<_>>().choose(rng).expect("k=1 fits");
        let (s, p) = (rng.random_range(1..=2), rng.random_range(0..=k / 2));
        let scale = rng.random_range(0.5..2.0);
        let ad = ConvLoRA::new(randn(&[k, k, i, r], rng), randn(&[r, o], rng), scale).map_err(err)?;
        let x = randn(&[h, w, i], rng);
        let got = conv_lora_apply_factored(&x, &ad, s, p).map_err(err)?;
        let want = oracles::conv2d(&x, &oracles::conv_cp(&ad.a, &ad.b, None, scale), s, p);
        check.record(relative_error(&got, &want), || format!("x {h}×{w}×{i}, K={k} R={r} O={o} s={s} p={p}"));
    }
    Ok(())
}

fn meta_cp_bruteforce(_: &Kernels, rng: &mut ChaCha8Rng, check: &mut Check) -> Result<(), String> {
    for _ in 0..40 {
        let (i, o, r) = (rng.random_range(1..=8), rng.random_range(1..=8), rng.random_range(1..=3));
        let scale = rng.random_range(0.5..2.0);
        let ad = MetaCPAdapter::new(randn(&[i, r], rng), randn(&[r, o], rng), scale).map_err(err)?;
        let c = randn(&[r], rng);
        let got = meta_cp_delta(&ad, &c).map_err(err)?;
        check.record(relative_error(&got, &oracles::meta_cp(&ad.a, &ad.b, &c, scale)), || {
            format!("I={i} O={o} R={r}")
        });
    }
    Ok(())
}

fn meta_tr_bruteforce(kernels: &Kernels, rng: &mut ChaCha8Rng, check: &mut Check) -> Result<(), String> {
    for _ in 0..40 {
        let (i, o, r) = (rng.random_range(1..=8), rng.random_range(1..=8), rng.random_range(1..=3));
        let scale = rng.random_range(0.5..2.0);
        let ad = MetaTRAdapter::new(randn(&[r, i, r], rng), randn(&[r, o, r], rng), scale).map_err(err)?;
        let c = randn(&[r, r], rng);
        let got = (kernels.meta_tr_delta)(&ad, &c).map_err(err)?;
        check.record(relative_error(&got, &oracles::meta_tr(&ad.a, &ad.b, &c, scale)), || {
            format!("I={i} O={o} R={r}")
        });
    }
    Ok(())
}

fn conv_meta_cp_bruteforce(_: &Kernels, rng: &mut ChaCha8Rng, check: &mut Check) -> Result<(), String> {
    for _ in 0..40 {
        let (k, i, o, r) = (rng.random_range(1..=3), rng.random_range(1..=4), rng.random_range(1..=4), rng.random_range(1..=3));
        let scale = rng.random_range(0.5..2.0);
        let ad = ConvMetaCPAdapter::new(randn(&[k, k, i, r], rng), randn(&[r, o], rng), scale).map_err(err)?;
        let c = randn(&[r], rng);
        let got = conv_meta_cp_delta(&ad, &c).map_err(err)?;
        check.record(relative_error(&got, &oracles::conv_cp(&ad.a, &ad.b, Some(&c), scale)), || {
            format!("K={k} I={i} O={o} R={r}")
        });
    }
    Ok(())
}

fn conv_meta_tr_bruteforce(_: &Kernels, rng: &mut ChaCha8Rng, check: &mut Check) -> Result<(), String> {
    for _ in 0..40 {
        let (k, i, o, r) = (rng.random_range(1..=3), rng.random_range(1..=4), rng.random_range(1..=4), rng.random_range(1..=3));
        let scale = rng.random_range(0.5..2.0);
        let ad = ConvMetaTRAdapter::new(randn(&[r, k * k * i, r], rng), randn(&[r, o, r], rng), k, i, scale)
            .map_err(err)?;
        let c = randn(&[r, r], rng);
        let got = conv_meta_tr_delta(&ad, &c).map_err(err)?;
        check.record(relative_error(&got, &oracles::conv_tr(&ad.a, &ad.b, &c, k, i, scale)), || {
            format!("K={k} I={i} O={o} R={r}")
        });
    }
    Ok(())
}

fn random_meta_adapters(rng: &mut ChaCha8Rng) -> Result<[Adapter; 4], String> {
    let (k, i, o, r) = (rng.random_range(1..=3), rng.random_range(1..=4), rng.random_range(1..=4), rng.random_range(1..=3));
    Ok([
        Adapter::MetaCp(MetaCPAdapter::new(randn(&[i, r], rng), randn(&[r, o], rng), 1.0).map_err(err)?),
        Adapter::MetaTr(MetaTRAdapter::new(randn(&[r, i, r], rng), randn(&[r, o, r], rng), 1.0).map_err(err)?),
        Adapter::ConvMetaCp(ConvMetaCPAdapter::new(randn(&[k, k, i, r], rng), randn(&[r, o], rng), 1.0).map_err(err)?),
        Adapter::ConvMetaTr(
            ConvMetaTRAdapter::new(randn(&[r, k * k * i, r], rng), randn(&[r, o, r], rng), k, i, 1.0).map_err(err)?,
        ),
    ])
}

fn zero_seed(_: &Kernels, rng: &mut ChaCha8Rng, check: &mut Check) -> Result<(), String> {
    for _ in 0..10 {
        for ad in random_meta_adapters(rng)? {
            let seed = DenseTensor::zeros(&ad.seed_shape().expect("meta adapter"));
            let delta = ad.delta(Some(&seed)).map_err(err)?;
            check.record(delta.max_abs(), || format!("{:?} delta with zero seed", ad.variant()));
        }
    }
    // With every mapping net zeroed the seeds vanish, so adapted logits must
    // equal the base model's.
    for (kind, shared) in [(VariantKind::MetaCp, false), (VariantKind::MetaTr, false), (VariantKind::MetaCp, true), (VariantKind::MetaTr, true)] {
        let base = BaseModel::init(&ModelGeometry { kernel: 3, filters: 4 }, 2, 3, rng);
        let ex = ExtractorSpec { kind: ExtractorKind::PooledConv, features: 4, kernel: 3 }.build([6, 6, 2], rng);
        let mapping = MappingSpec { shared, ..MappingSpec::default() };
        let mut set = AdaptationSet::init(&VariantSpec::new(kind, 2), &base, 1, &mapping, ex.output_dim(), rng).map_err(err)?;
        for p in set.params_mut() {
            *p = randn(p.shape(), rng);
        }
        for route in &mut set.routes {
            for layer in route.conv.iter_mut().chain(route.head.iter_mut()) {
                layer.mapping = layer.mapping.as_ref().map(MappingNet::zeroed);
            }
            route.shared_mapping = route.shared_mapping.as_ref().map(MappingNet::zeroed);
        }
        for _ in 0..3 {
            let x = randn(&[6, 6, 2], rng);
            let (plain, _) = forward_reference(&base, &AdaptationSet::original(), &ex, &x, 0).map_err(err)?;
            let (reference, _) = forward_reference(&base, &set, &ex, &x, 0).map_err(err)?;
            let (taped, _) = forward_adapted(&base, &set, &ex, &x, 0).map_err(err)?;
            check.record(relative_error(&reference, &plain), || format!("{kind:?} (shared {shared}) reference logits"));
            check.record(relative_error(&taped, &plain), || format!("{kind:?} (shared {shared}) tape logits"));
        }
    }
    Ok(())
}

fn cp_ones_equals_static(_: &Kernels, rng: &mut ChaCha8Rng, check: &mut Check) -> Result<(), String> {
    for _ in 0..15 {
        let (k, i, o, r) = (rng.random_range(1..=3), rng.random_range(1..=6), rng.random_range(1..=6), rng.random_range(1..=3));
        let scale = rng.random_range(0.5..2.0);
        let (a, b) = (randn(&[i, r], rng), randn(&[r, o], rng));
        let ones = DenseTensor::ones(&[r]);
        let lora = matrix_lora_delta(&MatrixLoRA::new(a.clone(), b.clone(), scale).map_err(err)?).map_err(err)?;
        let meta = meta_cp_delta(&MetaCPAdapter::new(a, b, scale).map_err(err)?, &ones).map_err(err)?;
        check.record(relative_error(&meta, &lora), || format!("matrix I={i} O={o} R={r}"));
        let (a, b) = (randn(&[k, k, i, r], rng), randn(&[r, o], rng));
        let lora = Adapter::ConvLora(ConvLoRA::new(a.clone(), b.clone(), scale).map_err(err)?).delta(None).map_err(err)?;
        let meta = conv_meta_cp_delta(&ConvMetaCPAdapter::new(a, b, scale).map_err(err)?, &ones).map_err(err)?;
        check.record(relative_error(&meta, &lora), || format!("conv K={k} I={i} O={o} R={r}"));
    }
    Ok(())
}

fn param_count_arithmetic(_: &Kernels, rng: &mut ChaCha8Rng, check: &mut Check) -> Result<(), String> {
    for _ in 0..40 {
        let (k, i, o, r) = (rng.random_range(1..=5), rng.random_range(1..=16), rng.random_range(1..=16), rng.random_range(1..=4));
        let cases = [
            (Adapter::MatrixLora(MatrixLoRA::init(i, o, r, rng)), i * r + r * o),
            (Adapter::ConvLora(ConvLoRA::init(k, i, o, r, rng)), k * k * i * r + r * o),
            (Adapter::MetaCp(MetaCPAdapter::init(i, o, r, rng)), i * r + r * o),
            (Adapter::MetaTr(MetaTRAdapter::init(i, o, r, rng)), r * i * r + r * o * r),
            (Adapter::ConvMetaCp(ConvMetaCPAdapter::init(k, i, o, r, rng)), k * k * i * r + r * o),
            (Adapter::ConvMetaTr(ConvMetaTRAdapter::init(k, i, o, r, rng)), r * k * k * i * r + r * o * r),
        ];
        for (ad, expected) in cases {
            let got = param_count(&ad);
            check.record(got.abs_diff(expected) as f64, || {
                format!("{:?} K={k} I={i} O={o} R={r}: {got} vs {expected}", ad.variant())
            });
        }
    }
    let k = 3;
    for r in 1..=4 {
        for i in (8..=64).step_by(4) {
            for o in (8..=64).step_by(4) {
                let lora = param_count(&Adapter::ConvLora(ConvLoRA {
                    a: DenseTensor::zeros(&[k, k, i, r]),
                    b: DenseTensor::zeros(&[r, o]),
                    scale: 1.0,
                }));
                let full = k * k * i * o;
                check.record(if lora < full { 0.0 } else { 1.0 }, || {
                    format!("Conv-LoRA R={r} I={i} O={o}: {lora} ≥ full kernel {full}")
                });
            }
        }
    }
    Ok(())
}

fn mapping_bruteforce(_: &Kernels, rng: &mut ChaCha8Rng, check: &mut Check) -> Result<(), String> {
    let acts = [Activation::Tanh, Activation::Relu, Activation::Identity];
    for _ in 0..30 {
        let input = rng.random_range(1..=8);
        let depth = rng.random_range(1..=3);
        let mut widths: Vec<usize> = extents(rng, depth, 8);
        let seed_shape = if rng.random_bool(0.5) {
            vec![widths[depth - 1]]
        } else {
            let r = rng.random_range(1..=3);
            widths[depth - 1] = r * r;
            vec![r, r]
        };
        let mut fan_in = input;
        let mut layers = Vec::new();
        for (k, &w) in widths.iter().enumerate() {
            layers.push(DenseLayer {
                weight: randn(&[w, fan_in], rng),
                bias: randn(&[w], rng),
                activation: if k + 1 == depth { Activation::Identity } else { *acts.choose(rng).expect("nonempty") },
            });
            fan_in = w;
        }
        let net = MappingNet::new(layers, seed_shape.clone()).map_err(err)?;
        let f = randn(&[input], rng);
        let got = mapping_forward(&net, &f).map_err(err)?;
        check.record(relative_error(&got, &oracles::mapping(&net, &f)), || {
            format!("widths {widths:?}, seed {seed_shape:?}")
        });
    }
    for _ in 0..10 {
        let (h, w, c, feats) = (rng.random_range(2..=7), rng.random_range(2..=7), rng.random_range(1..=3), rng.random_range(1..=5));
        let kernel = randn(&[3, 3, c, feats], rng);
        let x = randn(&[h, w, c], rng);
        let fe = FeatureExtractor::pooled_conv(kernel.clone()).map_err(err)?;
        let got = extract_features(&x, &fe).map_err(err)?;
        check.record(relative_error(&got, &oracles::pooled_conv(&x, &kernel)), || {
            format!("pooled conv on {h}×{w}×{c}, {feats} features")
        });
    }
    Ok(())
}

/// Central differences against tape gradients for every trainable tensor,
/// cycling through variants, extractor kinds, shared nets and seed modes.
fn gradient_checks(_: &Kernels, rng: &mut ChaCha8Rng, check: &mut Check) -> Result<(), String> {
    const KINDS: [VariantKind; 4] = [VariantKind::Lora, VariantKind::MultiLora, VariantKind::MetaCp, VariantKind::MetaTr];
    let (tasks, classes, shape) = (2, 2, [5, 5, 2]);
    let mut covered: BTreeSet<String> = BTreeSet::new();
    for config in 0..24usize {
        let kind = KINDS[config % 4];
        let rank = 1 + config % 3;
        let mut spec = VariantSpec::new(kind, rank);
        match config / 4 {
            4 => spec.adapt_conv = false,
            5 => spec.adapt_head = false,
            _ => {}
        }
        spec.scale = rng.random_range(0.5..1.5);
        let mapping = MappingSpec {
            shared: config / 4 == 1 || config / 4 == 3,
            seed_mode: if config / 4 >= 2 && config / 4 <= 3 { SeedMode::BatchMean } else { SeedMode::PerSample },
            ..MappingSpec::default()
        };
        let extractor = ExtractorSpec {
            kind: if config % 3 == 0 { ExtractorKind::RawFlatten } else { ExtractorKind::PooledConv },
            features: 3,
            kernel: 3,
        };
        let base = BaseModel::init(&ModelGeometry { kernel: 3, filters: 3 }, shape[2], tasks * classes, rng);
        let ex = extractor.build(shape, rng);
        let mut set =
            AdaptationSet::init(&spec, &base, tasks, &mapping, ex.output_dim(), rng).map_err(err)?;
        for p in set.params_mut() {
            *p = DenseTensor::randn(p.shape(), 0.5, rng);
        }
        let batch: Vec<Sample> = (0..3)
            .map(|index| {
                let (task, class) = (rng.random_range(0..tasks), rng.random_range(0..classes));
                Sample {
                    input: randn(&shape, rng),
                    task,
                    class,
                    label: task * classes + class,
                    split: Split::Train,
                    index,
                }
            })
            .collect();
        let refs: Vec<&Sample> = batch.iter().collect();
        for entry in gradient_check(&base, &set, &ex, &refs, 1e-5).map_err(err)? {
            check.record(entry.rel_error, || format!("config {config} ({kind:?}, {mapping:?}): {}", entry.name));
        }
        for route in &set.routes {
            for layer in route.conv.iter().chain(route.head.iter()) {
                covered.insert(format!("{:?}", layer.adapter.variant()));
            }
            if route.conv.iter().chain(route.head.iter()).any(|l| l.mapping.is_some()) {
                covered.insert("per-layer mapping".into());
            }
            if route.shared_mapping.is_some() {
                covered.insert("shared mapping".into());
            }
        }
    }
    let all = [
        AdapterVariant::MatrixLora,
        AdapterVariant::ConvLora,
        AdapterVariant::MetaCp,
        AdapterVariant::MetaTr,
        AdapterVariant::ConvMetaCp,
        AdapterVariant::ConvMetaTr,
    ];
    let mut missing: Vec<String> = all.iter().map(|v| format!("{v:?}")).filter(|v| !covered.contains(v)).collect();
    missing.extend(["per-layer mapping", "shared mapping"].iter().filter(|m| !covered.contains(**m)).map(|m| m.to_string()));
    if !missing.is_empty() {
        return Err(format!("parameter classes never checked: {missing:?}"));
    }
    Ok(())
}

/// 100 optimizer steps leave the base and extractor bitwise unchanged, and
/// repeating a run reproduces its report byte for byte.
fn freeze_determinism(_: &Kernels, _: &mut ChaCha8Rng, check: &mut Check) -> Result<(), String> {
    let spec = TaskSetSpec {
        tasks: 2,
        classes: 2,
        height: 6,
        width: 6,
        channels: 2,
        train_per_class: 5,
        test_per_class: 1,
        ..TaskSetSpec::default()
    };
    let data = SyntheticTaskSet::generate(&spec, 7, Cue::Orientation).map_err(err)?;
    let config = TrainConfig {
        optimizer: OptimizerConfig::Adam { lr: 0.01, beta1: 0.9, beta2: 0.999, eps: 1e-8 },
        batch_size: 4,
        epochs: 20,
        ..TrainConfig::default()
    };
    let fresh = |kind: VariantKind| -> Result<TrainState, String> {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let base = BaseModel::init(&ModelGeometry { kernel: 3, filters: 4 }, 2, 4, &mut rng);
        let ex = ExtractorSpec::default().build(spec.input_shape(), &mut rng);
        let set = AdaptationSet::init(&VariantSpec::new(kind, 2), &base, spec.tasks, &MappingSpec::default(), ex.output_dim(), &mut rng)
            .map_err(err)?;
        Ok(TrainState::new(base, ex, set, config.clone(), 5))
    };
    let bits = |t: &DenseTensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<u64>>();
    for kind in [VariantKind::Lora, VariantKind::MultiLora, VariantKind::MetaCp, VariantKind::MetaTr] {
        let mut state = fresh(kind)?;
        let before = state.clone();
        let report = train(&mut state, &data).map_err(err)?;
        let mut mismatches = usize::from(report.steps != 100);
        for (a, b) in [(&state.base.conv, &before.base.conv), (&state.base.head, &before.base.head), (&state.base.bias, &before.base.bias)] {
            mismatches += bits(a).iter().zip(bits(b)).filter(|(x, y)| **x != *y).count();
        }
        mismatches += usize::from(state.extractor != before.extractor);
        if state.adaptation == before.adaptation {
            return Err(format!("{kind:?}: training did not move the adapters"));
        }
        let mut again = fresh(kind)?;
        let repeat = train(&mut again, &data).map_err(err)?;
        let (first, second) = (
            serde_json::to_string(&report).map_err(err)?,
            serde_json::to_string(&repeat).map_err(err)?,
        );
        mismatches += usize::from(first != second);
        check.record(mismatches as f64, || format!("{kind:?}: {} steps, frozen or repeatable state differs", report.steps));
    }
    Ok(())
}
