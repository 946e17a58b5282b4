use super::{contract, DenseTensor, TensorError};

/// Geometry of the binary dummy tensor `P ∈ {0,1}^{α × α′ × β}` that
/// expresses a strided, zero-padded 1-D cross-correlation as a
/// multilinear contraction: `P[j, j′, k] = 1` iff `j = s·j′ + k − p`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DummyTensorSpec {
    input_len: usize,
    output_len: usize,
    kernel_len: usize,
    stride: usize,
    padding: usize,
}

impl DummyTensorSpec {
    /// Derives the output length as `floor((α + 2p − β)/s) + 1`.
    pub fn new(
        input_len: usize,
        kernel_len: usize,
        stride: usize,
        padding: usize,
    ) -> Result<Self, TensorError> {
        let output_len = conv_output_len(input_len, kernel_len, stride, padding)?;
        Ok(Self {
            input_len,
            output_len,
            kernel_len,
            stride,
            padding,
        })
    }

    /// Uses an explicit output length, which must satisfy the coverage
    /// invariant: every output position reads at least one real input.
    pub fn with_output_len(
        input_len: usize,
        output_len: usize,
        kernel_len: usize,
        stride: usize,
        padding: usize,
    ) -> Result<Self, TensorError> {
        if input_len == 0 || output_len == 0 || kernel_len == 0 || stride == 0 {
            return Err(TensorError::Geometry(
                "input, output and kernel lengths and stride must be positive".into(),
            ));
        }
        let spec = Self {
            input_len,
            output_len,
            kernel_len,
            stride,
            padding,
        };
        if !spec.covers_every_output() {
            return Err(TensorError::Geometry(format!(
                "output length {output_len} has positions that see only padding \
                 (input {input_len}, kernel {kernel_len}, stride {stride}, padding {padding})"
            )));
        }
        Ok(spec)
    }

    pub fn input_len(&self) -> usize {
        self.input_len
    }

    pub fn output_len(&self) -> usize {
        self.output_len
    }

    pub fn kernel_len(&self) -> usize {
        self.kernel_len
    }

    pub fn stride(&self) -> usize {
        self.stride
    }

    pub fn padding(&self) -> usize {
        self.padding
    }

    /// Input position read by output `j′` through kernel tap `k`, or `None`
    /// when it falls in the padding.
    pub fn source_index(&self, out: usize, tap: usize) -> Option<usize> {
        let j = (self.stride * out + tap) as isize - self.padding as isize;
        (j >= 0 && (j as usize) < self.input_len).then_some(j as usize)
    }

    /// True when every `j′ < α′` has some tap `k < β` landing inside `[0, α)`.
    /// Formula-derived specs can violate this when `p ≥ β`: the border
    /// outputs then read padding only and are identically zero.
    pub fn covers_every_output(&self) -> bool {
        (0..self.output_len)
            .all(|out| (0..self.kernel_len).any(|tap| self.source_index(out, tap).is_some()))
    }
}

/// `floor((len + 2·padding − kernel)/stride) + 1`, rejecting empty outputs.
pub fn conv_output_len(
    len: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
) -> Result<usize, TensorError> {
    if len == 0 || kernel == 0 || stride == 0 {
        return Err(TensorError::Geometry(
            "input length, kernel length and stride must be positive".into(),
        ));
    }
    let padded = len + 2 * padding;
    if padded < kernel {
        return Err(TensorError::Geometry(format!(
            "kernel {kernel} exceeds padded input {padded}"
        )));
    }
    Ok((padded - kernel) / stride + 1)
}

pub fn build_dummy_tensor(spec: &DummyTensorSpec) -> DenseTensor {
    let mut p = DenseTensor::zeros(&[spec.input_len, spec.output_len, spec.kernel_len]);
    for out in 0..spec.output_len {
        for tap in 0..spec.kernel_len {
            if let Some(j) = spec.source_index(out, tap) {
                p.set(&[j, out, tap], 1.0);
            }
        }
    }
    p
}

/// 1-D convolution computed as two contractions against the dummy tensor:
/// `y[j′] = Σ_{j,k} P[j, j′, k]·a[j]·b[k]`.
pub fn conv1d_via_dummy(
    a: &DenseTensor,
    b: &DenseTensor,
    spec: &DummyTensorSpec,
) -> Result<DenseTensor, TensorError> {
    expect_vector(a, spec.input_len, "input")?;
    expect_vector(b, spec.kernel_len, "kernel")?;
    let p = build_dummy_tensor(spec);
    let pa = contract(&p, a, &[(0, 0)])?; // α′ × β
    contract(&pa, b, &[(1, 0)])
}

fn expect_vector(t: &DenseTensor, len: usize, what: &str) -> Result<(), TensorError> {
    if t.shape() != [len] {
        return Err(TensorError::Geometry(format!(
            "{what} has shape {:?}, expected [{len}]",
            t.shape()
        )));
    }
    Ok(())
}

struct Conv2dGeometry {
    h: usize,
    w: usize,
    c_in: usize,
    kh: usize,
    kw: usize,
    c_out: usize,
    rows: DummyTensorSpec,
    cols: DummyTensorSpec,
}

fn conv2d_geometry(
    x_shape: &[usize],
    w_shape: &[usize],
    stride: usize,
    padding: usize,
) -> Result<Conv2dGeometry, TensorError> {
    if x_shape.len() != 3 {
        return Err(TensorError::Geometry(format!(
            "input must be H×W×I, got {x_shape:?}"
        )));
    }
    if w_shape.len() != 4 {
        return Err(TensorError::Geometry(format!(
            "kernel must be K×K×I×O, got {w_shape:?}"
        )));
    }
    if x_shape[2] != w_shape[2] {
        return Err(TensorError::Geometry(format!(
            "input has {} channels but kernel expects {}",
            x_shape[2], w_shape[2]
        )));
    }
    Ok(Conv2dGeometry {
        h: x_shape[0],
        w: x_shape[1],
        c_in: x_shape[2],
        kh: w_shape[0],
        kw: w_shape[1],
        c_out: w_shape[3],
        rows: DummyTensorSpec::new(x_shape[0], w_shape[0], stride, padding)?,
        cols: DummyTensorSpec::new(x_shape[1], w_shape[1], stride, padding)?,
    })
}

/// 2-D cross-correlation of an `H×W×I` input with a `K×K×I×O` kernel:
/// `out[h′,w′,o] = Σ_{kh,kw,i} x[s·h′+kh−p, s·w′+kw−p, i]·w[kh,kw,i,o]`,
/// reading zero outside the input. The dummy-tensor index rule is applied
/// independently on the height and width axes.
pub fn conv2d_forward(
    x: &DenseTensor,
    w: &DenseTensor,
    stride: usize,
    padding: usize,
) -> Result<DenseTensor, TensorError> {
    let g = conv2d_geometry(x.shape(), w.shape(), stride, padding)?;
    let (ho, wo) = (g.rows.output_len(), g.cols.output_len());
    let mut out = vec![0.0; ho * wo * g.c_out];
    let (xd, wd) = (x.data(), w.data());
    for oh in 0..ho {
        for ow in 0..wo {
            let acc = &mut out[(oh * wo + ow) * g.c_out..(oh * wo + ow + 1) * g.c_out];
            for th in 0..g.kh {
                let Some(ih) = g.rows.source_index(oh, th) else { continue };
                for tw in 0..g.kw {
                    let Some(iw) = g.cols.source_index(ow, tw) else { continue };
                    let xrow = &xd[(ih * g.w + iw) * g.c_in..(ih * g.w + iw + 1) * g.c_in];
                    let wbase = (th * g.kw + tw) * g.c_in;
                    for (ci, &xv) in xrow.iter().enumerate() {
                        let wrow = &wd[(wbase + ci) * g.c_out..(wbase + ci + 1) * g.c_out];
                        for (a, &wv) in acc.iter_mut().zip(wrow) {
                            *a += xv * wv;
                        }
                    }
                }
            }
        }
    }
    DenseTensor::new(vec![ho, wo, g.c_out], out)
}

/// The same convolution composed literally from two 1-D dummy tensors
/// (one per spatial axis) and three contractions. Slow; used as a
/// structural cross-check of [`conv2d_forward`].
pub fn conv2d_via_dummy(
    x: &DenseTensor,
    w: &DenseTensor,
    stride: usize,
    padding: usize,
) -> Result<DenseTensor, TensorError> {
    let g = conv2d_geometry(x.shape(), w.shape(), stride, padding)?;
    let p_rows = build_dummy_tensor(&g.rows); // H × H′ × Kh
    let p_cols = build_dummy_tensor(&g.cols); // W × W′ × Kw
    let t1 = contract(x, &p_rows, &[(0, 0)])?; // W, I, H′, Kh
    let t2 = contract(&t1, &p_cols, &[(0, 0)])?; // I, H′, Kh, W′, Kw
    // Sum over I, Kh, Kw against the kernel's axes 2, 0, 1.
    contract(&t2, w, &[(0, 2), (2, 0), (4, 1)]) // H′, W′, O
}

/// Gradient of `conv2d_forward` with respect to its kernel.
pub fn conv2d_kernel_grad(
    x: &DenseTensor,
    grad_out: &DenseTensor,
    kernel_shape: &[usize],
    stride: usize,
    padding: usize,
) -> Result<DenseTensor, TensorError> {
    let g = conv2d_geometry(x.shape(), kernel_shape, stride, padding)?;
    let (ho, wo) = (g.rows.output_len(), g.cols.output_len());
    if grad_out.shape() != [ho, wo, g.c_out] {
        return Err(TensorError::ShapeMismatch {
            left: grad_out.shape().to_vec(),
            right: vec![ho, wo, g.c_out],
        });
    }
    let mut dw = vec![0.0; g.kh * g.kw * g.c_in * g.c_out];
    let (xd, gd) = (x.data(), grad_out.data());
    for oh in 0..ho {
        for ow in 0..wo {
            let grow = &gd[(oh * wo + ow) * g.c_out..(oh * wo + ow + 1) * g.c_out];
            for th in 0..g.kh {
                let Some(ih) = g.rows.source_index(oh, th) else { continue };
                for tw in 0..g.kw {
                    let Some(iw) = g.cols.source_index(ow, tw) else { continue };
                    let xrow = &xd[(ih * g.w + iw) * g.c_in..(ih * g.w + iw + 1) * g.c_in];
                    let wbase = (th * g.kw + tw) * g.c_in;
                    for (ci, &xv) in xrow.iter().enumerate() {
                        let drow = &mut dw[(wbase + ci) * g.c_out..(wbase + ci + 1) * g.c_out];
                        for (d, &gv) in drow.iter_mut().zip(grow) {
                            *d += xv * gv;
                        }
                    }
                }
            }
        }
    }
    DenseTensor::new(kernel_shape.to_vec(), dw)
}

/// Gradient of `conv2d_forward` with respect to its input.
pub fn conv2d_input_grad(
    w: &DenseTensor,
    grad_out: &DenseTensor,
    input_shape: &[usize],
    stride: usize,
    padding: usize,
) -> Result<DenseTensor, TensorError> {
    let g = conv2d_geometry(input_shape, w.shape(), stride, padding)?;
    let (ho, wo) = (g.rows.output_len(), g.cols.output_len());
    if grad_out.shape() != [ho, wo, g.c_out] {
        return Err(TensorError::ShapeMismatch {
            left: grad_out.shape().to_vec(),
            right: vec![ho, wo, g.c_out],
        });
    }
    let mut dx = vec![0.0; g.h * g.w * g.c_in];
    let (wd, gd) = (w.data(), grad_out.data());
    for oh in 0..ho {
        for ow in 0..wo {
            let grow = &gd[(oh * wo + ow) * g.c_out..(oh * wo + ow + 1) * g.c_out];
            for th in 0..g.kh {
                let Some(ih) = g.rows.source_index(oh, th) else { continue };
                for tw in 0..g.kw {
                    let Some(iw) = g.cols.source_index(ow, tw) else { continue };
                    let wbase = (th * g.kw + tw) * g.c_in;
                    let base = (ih * g.w + iw) * g.c_in;
                    for ci in 0..g.c_in {
                        let wrow = &wd[(wbase + ci) * g.c_out..(wbase + ci + 1) * g.c_out];
                        dx[base + ci] += wrow.iter().zip(grow).map(|(a, b)| a * b).sum::<f64>();
                    }
                }
            }
        }
    }
    DenseTensor::new(input_shape.to_vec(), dx)
}

/// Channel-wise mean over the two spatial axes of an `H×W×C` tensor.
pub fn global_avg_pool(x: &DenseTensor) -> Result<DenseTensor, TensorError> {
    if x.order() != 3 {
        return Err(TensorError::OrderMismatch {
            expected: 3,
            actual: x.order(),
        });
    }
    let c = x.shape()[2];
    let pixels = x.shape()[0] * x.shape()[1];
    let mut out = vec![0.0; c];
    for px in x.data().chunks_exact(c) {
        for (o, v) in out.iter_mut().zip(px) {
            *o += v;
        }
    }
    let inv = 1.0 / pixels as f64;
    out.iter_mut().for_each(|v| *v *= inv);
    DenseTensor::new(vec![c], out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn sliding_window(a: &[f64], b: &[f64], stride: usize, padding: usize, out_len: usize) -> Vec<f64> {
        (0..out_len)
            .map(|jo| {
                (0..b.len())
                    .map(|k| {
                        let j = (stride * jo + k) as isize - padding as isize;
                        if j >= 0 && (j as usize) < a.len() {
                            a[j as usize] * b[k]
                        } else {
                            0.0
                        }
                    })
                    .sum()
            })
            .collect()
    }

    /// Direct convolution on an explicitly zero-padded copy of the input.
    fn nested_loop_conv2d(x: &DenseTensor, w: &DenseTensor, s: usize, p: usize) -> DenseTensor {
        let (h, wd, ci) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let (k, co) = (w.shape()[0], w.shape()[3]);
        let padded = DenseTensor::from_fn(&[h + 2 * p, wd + 2 * p, ci], |i| {
            if i[0] < p || i[0] >= h + p || i[1] < p || i[1] >= wd + p {
                0.0
            } else {
                x.get(&[i[0] - p, i[1] - p, i[2]])
            }
        });
        let ho = (h + 2 * p - k) / s + 1;
        let wo = (wd + 2 * p - k) / s + 1;
        DenseTensor::from_fn(&[ho, wo, co], |o| {
            let mut acc = 0.0;
            for kh in 0..k {
                for kw in 0..k {
                    for c in 0..ci {
                        acc += padded.get(&[s * o[0] + kh, s * o[1] + kw, c]) * w.get(&[kh, kw, c, o[2]]);
                    }
                }
            }
            acc
        })
    }

    #[test]
    fn dummy_tensor_follows_index_rule() {
        let spec = DummyTensorSpec::new(5, 2, 1, 0).unwrap();
        assert_eq!(spec.output_len(), 4);
        let p = build_dummy_tensor(&spec);
        for j in 0..5 {
            for jo in 0..4 {
                for k in 0..2 {
                    let expect = if j == jo + k { 1.0 } else { 0.0 };
                    assert_eq!(p.get(&[j, jo, k]), expect);
                }
            }
        }
    }

    #[test]
    fn unit_kernel_dummy_is_identity() {
        let spec = DummyTensorSpec::new(6, 1, 1, 0).unwrap();
        let p = build_dummy_tensor(&spec).reshape(&[6, 6]).unwrap();
        assert_eq!(p, DenseTensor::identity(6));
    }

    #[test]
    fn each_output_tap_hits_at_most_one_input() {
        let spec = DummyTensorSpec::new(7, 3, 2, 2).unwrap();
        let p = build_dummy_tensor(&spec);
        for jo in 0..spec.output_len() {
            for k in 0..3 {
                let hits: f64 = (0..7).map(|j| p.get(&[j, jo, k])).sum();
                let in_range = spec.source_index(jo, k).is_some();
                assert_eq!(hits, if in_range { 1.0 } else { 0.0 });
            }
        }
    }

    #[test]
    fn explicit_output_len_must_cover() {
        assert!(DummyTensorSpec::with_output_len(3, 2, 2, 1, 0).is_ok());
        // α′ = 4 would put j′ = 3 entirely past the input.
        assert!(DummyTensorSpec::with_output_len(3, 4, 2, 1, 0).is_err());
        assert!(!DummyTensorSpec::new(1, 1, 1, 2).unwrap().covers_every_output());
    }

    #[test]
    fn conv1d_small_example() {
        let spec = DummyTensorSpec::new(3, 2, 1, 0).unwrap();
        let y = conv1d_via_dummy(
            &DenseTensor::vector(&[1.0, 2.0, 3.0]),
            &DenseTensor::vector(&[1.0, 1.0]),
            &spec,
        )
        .unwrap();
        assert_eq!(y.data(), &[3.0, 5.0]);
    }

    #[test]
    fn conv1d_unit_kernel_and_zero_input() {
        let a = DenseTensor::vector(&[0.5, -1.0, 2.0, 4.0]);
        let spec = DummyTensorSpec::new(4, 1, 1, 0).unwrap();
        assert_eq!(conv1d_via_dummy(&a, &DenseTensor::vector(&[1.0]), &spec).unwrap(), a);
        let spec = DummyTensorSpec::new(4, 3, 2, 1).unwrap();
        let y = conv1d_via_dummy(&DenseTensor::zeros(&[4]), &DenseTensor::vector(&[1.0, -2.0, 3.0]), &spec).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
        assert!(conv1d_via_dummy(&a, &DenseTensor::vector(&[1.0, 2.0]), &spec).is_err());
    }

    #[test]
    fn conv1d_matches_sliding_window_randomized() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..200 {
            let alpha = rng.random_range(1..=16);
            let beta = rng.random_range(1..=5);
            let s = rng.random_range(1..=2);
            let p = rng.random_range(0..=2);
            let Ok(spec) = DummyTensorSpec::new(alpha, beta, s, p) else { continue };
            let a = DenseTensor::randn(&[alpha], 1.0, &mut rng);
            let b = DenseTensor::randn(&[beta], 1.0, &mut rng);
            let y = conv1d_via_dummy(&a, &b, &spec).unwrap();
            let oracle = DenseTensor::vector(&sliding_window(a.data(), b.data(), s, p, spec.output_len()));
            assert!(y.rel_error(&oracle).unwrap() <= 1e-12);
        }
    }

    #[test]
    fn conv2d_pointwise_kernel_is_channel_map() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = DenseTensor::randn(&[3, 4, 2], 1.0, &mut rng);
        let w = DenseTensor::randn(&[1, 1, 2, 5], 1.0, &mut rng);
        let out = conv2d_forward(&x, &w, 1, 0).unwrap();
        let w_mat = w.reshape(&[2, 5]).unwrap();
        let expect = contract(&x, &w_mat, &[(2, 0)]).unwrap();
        assert!(out.rel_error(&expect).unwrap() <= 1e-14);
    }

    #[test]
    fn conv2d_matches_nested_loops_and_dummy_route() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = DenseTensor::randn(&[4, 4, 2], 1.0, &mut rng);
        let w = DenseTensor::randn(&[3, 3, 2, 3], 1.0, &mut rng);
        let out = conv2d_forward(&x, &w, 1, 0).unwrap();
        assert_eq!(out.shape(), &[2, 2, 3]);
        assert!(out.rel_error(&nested_loop_conv2d(&x, &w, 1, 0)).unwrap() <= 1e-12);
        for _ in 0..50 {
            let h = rng.random_range(1..=8);
            let wd = rng.random_range(1..=8);
            let k = rng.random_range(1..=3);
            let s = rng.random_range(1..=2);
            let p = rng.random_range(0..=1);
            if h + 2 * p < k || wd + 2 * p < k {
                continue;
            }
            let ci = rng.random_range(1..=4);
            let co = rng.random_range(1..=4);
            let x = DenseTensor::randn(&[h, wd, ci], 1.0, &mut rng);
            let w = DenseTensor::randn(&[k, k, ci, co], 1.0, &mut rng);
            let out = conv2d_forward(&x, &w, s, p).unwrap();
            assert!(out.rel_error(&nested_loop_conv2d(&x, &w, s, p)).unwrap() <= 1e-12);
            assert!(out.rel_error(&conv2d_via_dummy(&x, &w, s, p).unwrap()).unwrap() <= 1e-12);
        }
    }

    #[test]
    fn conv2d_zero_kernel_and_geometry_errors() {
        let x = DenseTensor::ones(&[3, 3, 2]);
        let out = conv2d_forward(&x, &DenseTensor::zeros(&[3, 3, 2, 2]), 1, 1).unwrap();
        assert_eq!(out.shape(), &[3, 3, 2]);
        assert!(out.data().iter().all(|&v| v == 0.0));
        assert!(conv2d_forward(&x, &DenseTensor::zeros(&[3, 3, 1, 2]), 1, 0).is_err());
        assert!(conv2d_forward(&x, &DenseTensor::zeros(&[5, 5, 2, 2]), 1, 0).is_err());
    }

    #[test]
    fn avg_pool_averages_each_channel() {
        let x = DenseTensor::from_fn(&[2, 2, 2], |i| if i[2] == 0 { (i[0] * 2 + i[1]) as f64 } else { 1.0 });
        assert_eq!(global_avg_pool(&x).unwrap().data(), &[1.5, 1.0]);
    }
}
