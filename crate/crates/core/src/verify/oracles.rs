//! Plain index-loop reference implementations. None of these call the
//! library kernels they are compared against; they only read and write
//! individual tensor entries.

use crate::meta_net::MappingNet;
use crate::tensor::DenseTensor;

/// Calls `f` with every multi-index of `shape` in row-major order. A
/// 0-order shape yields the single empty index.
pub fn for_each_index(shape: &[usize], mut f: impl FnMut(&[usize])) {
    if shape.contains(&0) {
        return;
    }
    let mut idx = vec![0; shape.len()];
    loop {
        f(&idx);
        let mut axis = shape.len();
        loop {
            if axis == 0 {
                return;
            }
            axis -= 1;
            idx[axis] += 1;
            if idx[axis] < shape[axis] {
                break;
            }
            idx[axis] = 0;
        }
    }
}

/// `max|a − b| / max(max|a|, max|b|)`, zero when both are zero. Shape
/// mismatches count as infinite error.
pub fn relative_error(a: &DenseTensor, b: &DenseTensor) -> f64 {
    if a.shape() != b.shape() {
        return f64::INFINITY;
    }
    let diff = a.data().iter().zip(b.data()).fold(0.0f64, |m, (x, y)| m.max((x - y).abs()));
    let scale = a.max_abs().max(b.max_abs());
    if diff == 0.0 {
        0.0
    } else if scale == 0.0 || !diff.is_finite() {
        f64::INFINITY
    } else {
        diff / scale
    }
}

pub fn contract(a: &DenseTensor, b: &DenseTensor, pairs: &[(usize, usize)]) -> DenseTensor {
    let free_a: Vec<usize> = (0..a.order()).filter(|x| !pairs.iter().any(|p| p.0 == *x)).collect();
    let free_b: Vec<usize> = (0..b.order()).filter(|x| !pairs.iter().any(|p| p.1 == *x)).collect();
    let out_shape: Vec<usize> =
        free_a.iter().map(|&x| a.shape()[x]).chain(free_b.iter().map(|&x| b.shape()[x])).collect();
    let sum_shape: Vec<usize> = pairs.iter().map(|p| a.shape()[p.0]).collect();
    let mut out = DenseTensor::zeros(&out_shape);
    let (mut ia, mut ib) = (vec![0; a.order()], vec![0; b.order()]);
    for_each_index(&out_shape, |o| {
        for (k, &x) in free_a.iter().enumerate() {
            ia[x] = o[k];
        }
        for (k, &x) in free_b.iter().enumerate() {
            ib[x] = o[free_a.len() + k];
        }
        let mut acc = 0.0;
        for_each_index(&sum_shape, |s| {
            for (k, p) in pairs.iter().enumerate() {
                ia[p.0] = s[k];
                ib[p.1] = s[k];
            }
            acc += a.get(&ia) * b.get(&ib);
        });
        out.set(o, acc);
    });
    out
}

/// Input position for output `out` and tap `tap`, if inside `[0, len)`.
fn source(out: usize, tap: usize, stride: usize, padding: usize, len: usize) -> Option<usize> {
    let j = (stride * out + tap) as i64 - padding as i64;
    (j >= 0 && (j as usize) < len).then_some(j as usize)
}

pub fn conv1d(a: &DenseTensor, b: &DenseTensor, stride: usize, padding: usize, out_len: usize) -> DenseTensor {
    let (n, k) = (a.len(), b.len());
    let mut y = DenseTensor::zeros(&[out_len]);
    for o in 0..out_len {
        let mut acc = 0.0;
        for t in 0..k {
            if let Some(j) = source(o, t, stride, padding, n) {
                acc += a.data()[j] * b.data()[t];
            }
        }
        y.set(&[o], acc);
    }
    y
}

/// `H×W×I` input, `K×K×I×O` kernel, zero padding.
pub fn conv2d(x: &DenseTensor, w: &DenseTensor, stride: usize, padding: usize) -> DenseTensor {
    let (h, wd, ci) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (kh, kw, co) = (w.shape()[0], w.shape()[1], w.shape()[3]);
    let ho = (h + 2 * padding - kh) / stride + 1;
    let wo = (wd + 2 * padding - kw) / stride + 1;
    let mut out = DenseTensor::zeros(&[ho, wo, co]);
    for_each_index(&[ho, wo, co], |o| {
        let mut acc = 0.0;
        for th in 0..kh {
            let Some(ih) = source(o[0], th, stride, padding, h) else { continue };
            for tw in 0..kw {
                let Some(iw) = source(o[1], tw, stride, padding, wd) else { continue };
                for c in 0..ci {
                    acc += x.get(&[ih, iw, c]) * w.get(&[th, tw, c, o[2]]);
                }
            }
        }
        out.set(o, acc);
    });
    out
}

pub fn cp_reconstruct(factors: &[DenseTensor], lambdas: &DenseTensor) -> DenseTensor {
    let shape: Vec<usize> = factors.iter().map(|f| f.shape()[0]).collect();
    let mut out = DenseTensor::zeros(&shape);
    for_each_index(&shape, |idx| {
        let mut acc = 0.0;
        for r in 0..lambdas.len() {
            let mut term = lambdas.data()[r];
            for (n, f) in factors.iter().enumerate() {
                term *= f.get(&[idx[n], r]);
            }
            acc += term;
        }
        out.set(idx, acc);
    });
    out
}

/// Sums `∏ₙ Gⁿ[bₙ, iₙ, bₙ₊₁]` over every bond assignment with `b_N = b_0`.
pub fn tr_reconstruct(cores: &[DenseTensor]) -> DenseTensor {
    let shape: Vec<usize> = cores.iter().map(|c| c.shape()[1]).collect();
    let bonds: Vec<usize> = cores.iter().map(|c| c.shape()[0]).collect();
    let n = cores.len();
    let mut out = DenseTensor::zeros(&shape);
    for_each_index(&shape, |idx| {
        let mut acc = 0.0;
        for_each_index(&bonds, |b| {
            let mut term = 1.0;
            for k in 0..n {
                term *= cores[k].get(&[b[k], idx[k], b[(k + 1) % n]]);
            }
            acc += term;
        });
        out.set(idx, acc);
    });
    out
}

/// `scale · Σ_r A[i,r]·c[r]·B[r,o]`.
pub fn meta_cp(a: &DenseTensor, b: &DenseTensor, c: &DenseTensor, scale: f64) -> DenseTensor {
    let (i, r, o) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    DenseTensor::from_fn(&[i, o], |x| {
        scale * (0..r).map(|k| a.get(&[x[0], k]) * c.data()[k] * b.get(&[k, x[1]])).sum::<f64>()
    })
}

/// `scale · Σ_{r0,r1,r2} A[r0,i,r1]·B[r1,o,r2]·C[r2,r0]`.
pub fn meta_tr(a: &DenseTensor, b: &DenseTensor, c: &DenseTensor, scale: f64) -> DenseTensor {
    let (r, i, o) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    DenseTensor::from_fn(&[i, o], |x| {
        let mut acc = 0.0;
        for_each_index(&[r, r, r], |k| {
            acc += a.get(&[k[0], x[0], k[1]]) * b.get(&[k[1], x[1], k[2]]) * c.get(&[k[2], k[0]]);
        });
        scale * acc
    })
}

/// `scale · Σ_r A[kh,kw,i,r]·c[r]·B[r,o]`; a `None` seed means all ones.
pub fn conv_cp(a: &DenseTensor, b: &DenseTensor, c: Option<&DenseTensor>, scale: f64) -> DenseTensor {
    let (k, i, r, o) = (a.shape()[0], a.shape()[2], a.shape()[3], b.shape()[1]);
    DenseTensor::from_fn(&[k, k, i, o], |x| {
        let mut acc = 0.0;
        for q in 0..r {
            let cq = c.map_or(1.0, |c| c.data()[q]);
            acc += a.get(&[x[0], x[1], x[2], q]) * cq * b.get(&[q, x[3]]);
        }
        scale * acc
    })
}

/// Folded-kernel TR delta: the physical axis of `A` enumerates
/// `(kh, kw, i)` row-major.
pub fn conv_tr(a: &DenseTensor, b: &DenseTensor, c: &DenseTensor, kernel: usize, channels: usize, scale: f64) -> DenseTensor {
    let (r, o) = (a.shape()[0], b.shape()[1]);
    DenseTensor::from_fn(&[kernel, kernel, channels, o], |x| {
        let row = (x[0] * kernel + x[1]) * channels + x[2];
        let mut acc = 0.0;
        for_each_index(&[r, r, r], |k| {
            acc += a.get(&[k[0], row, k[1]]) * b.get(&[k[1], x[3], k[2]]) * c.get(&[k[2], k[0]]);
        });
        scale * acc
    })
}

pub fn mapping(net: &MappingNet, f: &DenseTensor) -> DenseTensor {
    let mut h: Vec<f64> = f.data().to_vec();
    for layer in net.layers() {
        let (rows, cols) = (layer.weight.shape()[0], layer.weight.shape()[1]);
        h = (0..rows)
            .map(|o| {
                let pre = (0..cols).map(|k| layer.weight.get(&[o, k]) * h[k]).sum::<f64>() + layer.bias.data()[o];
                layer.activation.apply(pre)
            })
            .collect();
    }
    DenseTensor::new(net.seed_shape().to_vec(), h).expect("output width matches seed shape")
}

/// Channel-wise spatial mean of a same-padded stride-1 convolution.
pub fn pooled_conv(x: &DenseTensor, kernel: &DenseTensor) -> DenseTensor {
    let maps = conv2d(x, kernel, 1, (kernel.shape()[0] - 1) / 2);
    let (h, w, c) = (maps.shape()[0], maps.shape()[1], maps.shape()[2]);
    DenseTensor::from_fn(&[c], |o| {
        let mut acc = 0.0;
        for_each_index(&[h, w], |p| acc += maps.get(&[p[0], p[1], o[0]]));
        acc / (h * w) as f64
    })
}
