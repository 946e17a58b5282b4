use thiserror::Error;

use crate::meta_net::Activation;
use crate::tensor::{
    contract, conv2d_forward, conv2d_input_grad, conv2d_kernel_grad, global_avg_pool, DenseTensor,
    TensorError,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TapeError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("parameter {0} registered twice on one tape")]
    DuplicateParam(usize),
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("label {label} out of range for {classes} classes")]
    Label { label: usize, classes: usize },
    #[error("{0}")]
    Invalid(String),
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Contract { a: usize, b: usize, pairs: Vec<(usize, usize)> },
    Add(usize, usize),
    Scale(usize, f64),
    MulAxis { x: usize, v: usize, axis: usize },
    Reshape(usize),
    Slice { x: usize, start: usize },
    Conv2d { x: usize, w: usize, stride: usize, padding: usize },
    Activate(usize, Activation),
    AvgPool(usize),
    SoftmaxCe { logits: usize, label: usize },
    Sum(usize),
}

#[derive(Debug, Clone)]
struct Node {
    value: DenseTensor,
    op: Op,
    needs_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    /// `(parameter id, node index)` in registration order.
    params: Vec<(usize, usize)>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &DenseTensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: DenseTensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: usize) -> bool {
        self.nodes[v].needs_grad
    }

    pub fn constant(&mut self, value: DenseTensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Registers a trainable leaf. Each id may be registered once per tape.
    pub fn param(&mut self, id: usize, value: DenseTensor) -> Result<Var, TapeError> {
        if self.params.iter().any(|&(p, _)| p == id) {
            return Err(TapeError::DuplicateParam(id));
        }
        let v = self.push(value, Op::Leaf, true);
        self.params.push((id, v.0));
        Ok(v)
    }

    pub fn contract(&mut self, a: Var, b: Var, pairs: &[(usize, usize)]) -> Result<Var, TapeError> {
        let value = contract(self.value(a), self.value(b), pairs)?;
        let needs = self.needs(a.0) || self.needs(b.0);
        Ok(self.push(
            value,
            Op::Contract {
                a: a.0,
                b: b.0,
                pairs: pairs.to_vec(),
            },
            needs,
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TapeError> {
        let value = self.value(a).add(self.value(b))?;
        let needs = self.needs(a.0) || self.needs(b.0);
        Ok(self.push(value, Op::Add(a.0, b.0), needs))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let value = self.value(a).scale(factor);
        let needs = self.needs(a.0);
        self.push(value, Op::Scale(a.0, factor), needs)
    }

    /// Multiplies `x` by the vector `v` broadcast along `axis`:
    /// `y[.., i, ..] = x[.., i, ..] · v[i]`.
    pub fn mul_axis(&mut self, x: Var, v: Var, axis: usize) -> Result<Var, TapeError> {
        let (xt, vt) = (self.value(x), self.value(v));
        if axis >= xt.order() || vt.shape() != [xt.shape()[axis]] {
            return Err(TapeError::Invalid(format!(
                "cannot broadcast {:?} along axis {axis} of {:?}",
                vt.shape(),
                xt.shape()
            )));
        }
        let inner: usize = xt.shape()[axis + 1..].iter().product();
        let n = xt.shape()[axis];
        let mut out = xt.clone();
        for (k, val) in out.data_mut().iter_mut().enumerate() {
            *val *= vt.data()[(k / inner) % n];
        }
        let needs = self.needs(x.0) || self.needs(v.0);
        Ok(self.push(out, Op::MulAxis { x: x.0, v: v.0, axis }, needs))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var, TapeError> {
        let value = self.value(x).reshape(shape)?;
        let needs = self.needs(x.0);
        Ok(self.push(value, Op::Reshape(x.0), needs))
    }

    /// Contiguous slice `x[start..start+len]` of a vector.
    pub fn slice(&mut self, x: Var, start: usize, len: usize) -> Result<Var, TapeError> {
        let xt = self.value(x);
        if xt.order() != 1 || len == 0 || start + len > xt.len() {
            return Err(TapeError::Invalid(format!(
                "slice {start}..{} of shape {:?}",
                start + len,
                xt.shape()
            )));
        }
        let value = DenseTensor::vector(&xt.data()[start..start + len]);
        let needs = self.needs(x.0);
        Ok(self.push(value, Op::Slice { x: x.0, start }, needs))
    }

    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, padding: usize) -> Result<Var, TapeError> {
        let value = conv2d_forward(self.value(x), self.value(w), stride, padding)?;
        let needs = self.needs(x.0) || self.needs(w.0);
        Ok(self.push(
            value,
            Op::Conv2d {
                x: x.0,
                w: w.0,
                stride,
                padding,
            },
            needs,
        ))
    }

    pub fn activate(&mut self, x: Var, act: Activation) -> Var {
        if act == Activation::Identity {
            return x;
        }
        let value = self.value(x).map(|v| act.apply(v));
        let needs = self.needs(x.0);
        self.push(value, Op::Activate(x.0, act), needs)
    }

    pub fn avg_pool(&mut self, x: Var) -> Result<Var, TapeError> {
        let value = global_avg_pool(self.value(x))?;
        let needs = self.needs(x.0);
        Ok(self.push(value, Op::AvgPool(x.0), needs))
    }

    /// `logsumexp(logits) − logits[label]` as a scalar node.
    pub fn softmax_cross_entropy(&mut self, logits: Var, label: usize) -> Result<Var, TapeError> {
        let lt = self.value(logits);
        if lt.order() != 1 {
            return Err(TapeError::Invalid(format!("logits must be a vector, got {:?}", lt.shape())));
        }
        if label >= lt.len() {
            return Err(TapeError::Label {
                label,
                classes: lt.len(),
            });
        }
        let loss = log_sum_exp(lt.data()) - lt.data()[label];
        let needs = self.needs(logits.0);
        Ok(self.push(
            DenseTensor::scalar(loss),
            Op::SoftmaxCe {
                logits: logits.0,
                label,
            },
            needs,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = DenseTensor::scalar(self.value(x).sum());
        let needs = self.needs(x.0);
        self.push(value, Op::Sum(x.0), needs)
    }

    /// Gradients of the scalar `loss` with respect to every registered
    /// parameter. Parameters the loss does not depend on get zeros.
    pub fn backward(&self, loss: Var) -> Result<Gradients, TapeError> {
        let lt = self.value(loss);
        if lt.len() != 1 {
            return Err(TapeError::NotScalar(lt.shape().to_vec()));
        }
        let mut grads: Vec<Option<DenseTensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(DenseTensor::new(lt.shape().to_vec(), vec![1.0])?);

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            match &node.op {
                Op::Leaf => {
                    grads[idx] = Some(g);
                    continue;
                }
                Op::Contract { a, b, pairs } => {
                    let (av, bv) = (&self.nodes[*a].value, &self.nodes[*b].value);
                    if self.needs(*a) {
                        accumulate(&mut grads, *a, contract_grad_lhs(&g, av, bv, pairs)?)?;
                    }
                    if self.needs(*b) {
                        accumulate(&mut grads, *b, contract_grad_rhs(&g, av, bv, pairs)?)?;
                    }
                }
                Op::Add(a, b) => {
                    if self.needs(*a) {
                        accumulate(&mut grads, *a, g.clone())?;
                    }
                    if self.needs(*b) {
                        accumulate(&mut grads, *b, g)?;
                    }
                }
                Op::Scale(a, f) => accumulate(&mut grads, *a, g.scale(*f))?,
                Op::MulAxis { x, v, axis } => {
                    let (xv, vv) = (&self.nodes[*x].value, &self.nodes[*v].value);
                    let inner: usize = xv.shape()[axis + 1..].iter().product();
                    let n = xv.shape()[*axis];
                    if self.needs(*x) {
                        let mut dx = g.clone();
                        for (k, val) in dx.data_mut().iter_mut().enumerate() {
                            *val *= vv.data()[(k / inner) % n];
                        }
                        accumulate(&mut grads, *x, dx)?;
                    }
                    if self.needs(*v) {
                        let mut dv = vec![0.0; n];
                        for (k, (gv, xval)) in g.data().iter().zip(xv.data()).enumerate() {
                            dv[(k / inner) % n] += gv * xval;
                        }
                        accumulate(&mut grads, *v, DenseTensor::new(vec![n], dv)?)?;
                    }
                }
                Op::Reshape(x) => {
                    let shape = self.nodes[*x].value.shape().to_vec();
                    accumulate(&mut grads, *x, g.into_reshaped(&shape)?)?;
                }
                Op::Slice { x, start } => {
                    let mut dx = DenseTensor::zeros(self.nodes[*x].value.shape());
                    dx.data_mut()[*start..*start + g.len()].copy_from_slice(g.data());
                    accumulate(&mut grads, *x, dx)?;
                }
                Op::Conv2d {
                    x,
                    w,
                    stride,
                    padding,
                } => {
                    let (xv, wv) = (&self.nodes[*x].value, &self.nodes[*w].value);
                    if self.needs(*x) {
                        let dx = conv2d_input_grad(wv, &g, xv.shape(), *stride, *padding)?;
                        accumulate(&mut grads, *x, dx)?;
                    }
                    if self.needs(*w) {
                        let dw = conv2d_kernel_grad(xv, &g, wv.shape(), *stride, *padding)?;
                        accumulate(&mut grads, *w, dw)?;
                    }
                }
                Op::Activate(x, act) => {
                    let dx = g.zip_map(&node.value, |gv, y| gv * act.derivative_from_output(y))?;
                    accumulate(&mut grads, *x, dx)?;
                }
                Op::AvgPool(x) => {
                    let shape = self.nodes[*x].value.shape();
                    let inv = 1.0 / (shape[0] * shape[1]) as f64;
                    let c = shape[2];
                    let dx = DenseTensor::from_fn(shape, |i| g.data()[i[2]] * inv);
                    debug_assert_eq!(g.len(), c);
                    accumulate(&mut grads, *x, dx)?;
                }
                Op::SoftmaxCe { logits, label } => {
                    let lv = &self.nodes[*logits].value;
                    let mut d = softmax(lv.data());
                    d[*label] -= 1.0;
                    let gs = g.item();
                    d.iter_mut().for_each(|v| *v *= gs);
                    accumulate(&mut grads, *logits, DenseTensor::new(lv.shape().to_vec(), d)?)?;
                }
                Op::Sum(x) => {
                    let dx = DenseTensor::filled(self.nodes[*x].value.shape(), g.item());
                    accumulate(&mut grads, *x, dx)?;
                }
            }
        }

        let params = self
            .params
            .iter()
            .map(|&(id, node)| {
                let g = grads
                    .get_mut(node)
                    .and_then(Option::take)
                    .unwrap_or_else(|| DenseTensor::zeros(self.nodes[node].value.shape()));
                (id, g)
            })
            .collect();
        Ok(Gradients { params })
    }
}

/// Per-parameter gradients returned by [`Tape::backward`].
#[derive(Debug, Clone)]
pub struct Gradients {
    params: Vec<(usize, DenseTensor)>,
}

impl Gradients {
    pub fn get(&self, id: usize) -> Option<&DenseTensor> {
        self.params.iter().find(|(p, _)| *p == id).map(|(_, g)| g)
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, &DenseTensor)> {
        self.params.iter().map(|(id, g)| (*id, g))
    }

    pub fn into_vec(self) -> Vec<(usize, DenseTensor)> {
        self.params
    }
}

fn accumulate(grads: &mut [Option<DenseTensor>], idx: usize, g: DenseTensor) -> Result<(), TapeError> {
    match &mut grads[idx] {
        Some(existing) => existing.add_assign(&g)?,
        slot @ None => *slot = Some(g),
    }
    Ok(())
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

pub(crate) fn softmax(v: &[f64]) -> Vec<f64> {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = v.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

/// Inverse of the permutation that brought `axes` (original axis ids in
/// their current positions) into the current layout.
fn restore_order(t: DenseTensor, axes: &[usize]) -> Result<DenseTensor, TensorError> {
    let mut perm = vec![0usize; axes.len()];
    for (pos, &ax) in axes.iter().enumerate() {
        perm[ax] = pos;
    }
    t.permute(&perm)
}

/// `∂L/∂a` for `c = contract(a, b, pairs)` given `g = ∂L/∂c`.
fn contract_grad_lhs(
    g: &DenseTensor,
    a: &DenseTensor,
    b: &DenseTensor,
    pairs: &[(usize, usize)],
) -> Result<DenseTensor, TensorError> {
    let free_a: Vec<usize> = (0..a.order()).filter(|i| !pairs.iter().any(|p| p.0 == *i)).collect();
    let free_b: Vec<usize> = (0..b.order()).filter(|i| !pairs.iter().any(|p| p.1 == *i)).collect();
    let gpairs: Vec<(usize, usize)> = free_b
        .iter()
        .enumerate()
        .map(|(k, &bx)| (free_a.len() + k, bx))
        .collect();
    let raw = contract(g, b, &gpairs)?;
    // Result axes: free_a, then b's paired axes in ascending b order.
    let mut paired_b: Vec<(usize, usize)> = pairs.iter().map(|&(ax, bx)| (bx, ax)).collect();
    paired_b.sort_unstable();
    let axes: Vec<usize> = free_a
        .iter()
        .copied()
        .chain(paired_b.iter().map(|&(_, ax)| ax))
        .collect();
    restore_order(raw, &axes)
}

/// `∂L/∂b` for `c = contract(a, b, pairs)` given `g = ∂L/∂c`.
fn contract_grad_rhs(
    g: &DenseTensor,
    a: &DenseTensor,
    b: &DenseTensor,
    pairs: &[(usize, usize)],
) -> Result<DenseTensor, TensorError> {
    let free_a: Vec<usize> = (0..a.order()).filter(|i| !pairs.iter().any(|p| p.0 == *i)).collect();
    let free_b: Vec<usize> = (0..b.order()).filter(|i| !pairs.iter().any(|p| p.1 == *i)).collect();
    let gpairs: Vec<(usize, usize)> = free_a.iter().enumerate().map(|(k, &ax)| (ax, k)).collect();
    let raw = contract(a, g, &gpairs)?;
    // Result axes: a's paired axes in ascending a order, then free_b.
    let mut paired_a: Vec<(usize, usize)> = pairs.to_vec();
    paired_a.sort_unstable();
    let axes: Vec<usize> = paired_a
        .iter()
        .map(|&(_, bx)| bx)
        .chain(free_b.iter().copied())
        .collect();
    restore_order(raw, &axes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Central differences of `f` at every element of `x`.
    fn numeric_grad(x: &DenseTensor, f: impl Fn(&DenseTensor) -> f64) -> DenseTensor {
        let h = 1e-5;
        let mut g = DenseTensor::zeros(x.shape());
        for k in 0..x.len() {
            let mut p = x.clone();
            p.data_mut()[k] += h;
            let mut m = x.clone();
            m.data_mut()[k] -= h;
            g.data_mut()[k] = (f(&p) - f(&m)) / (2.0 * h);
        }
        g
    }

    fn rel(a: &DenseTensor, b: &DenseTensor) -> f64 {
        a.sub(b).unwrap().norm() / a.norm().max(b.norm()).max(1e-12)
    }

    #[test]
    fn linear_layer_gradient_by_hand() {
        // d/dA sum(A·B) = 1·Bᵀ
        let a = DenseTensor::matrix(&[&[1.0, 2.0], &[3.0, 4.0]]);
        let b = DenseTensor::matrix(&[&[5.0, 6.0], &[7.0, 8.0]]);
        let mut t = Tape::new();
        let av = t.param(0, a).unwrap();
        let bv = t.constant(b);
        let c = t.contract(av, bv, &[(1, 0)]).unwrap();
        let s = t.sum(c);
        let g = t.backward(s).unwrap();
        assert_eq!(g.get(0).unwrap().data(), &[11.0, 15.0, 11.0, 15.0]);
    }

    #[test]
    fn contract_gradients_with_permuted_pairs() {
        let mut rng = ChaCha8Rng::seed_from_u64(81);
        let a = DenseTensor::randn(&[2, 3, 4], 1.0, &mut rng);
        let b = DenseTensor::randn(&[4, 5, 3], 1.0, &mut rng);
        let w = DenseTensor::randn(&[2, 5], 1.0, &mut rng);
        let pairs = [(2, 0), (1, 2)];
        let loss = |a: &DenseTensor, b: &DenseTensor| {
            contract(a, b, &pairs).unwrap().mul(&w).unwrap().sum()
        };
        let mut t = Tape::new();
        let av = t.param(0, a.clone()).unwrap();
        let bv = t.param(1, b.clone()).unwrap();
        let wv = t.constant(w.clone());
        let c = t.contract(av, bv, &pairs).unwrap();
        let cw = t.contract(c, wv, &[(0, 0), (1, 1)]).unwrap();
        let g = t.backward(cw).unwrap();
        assert!(rel(g.get(0).unwrap(), &numeric_grad(&a, |x| loss(x, &b))) < 1e-8);
        assert!(rel(g.get(1).unwrap(), &numeric_grad(&b, |x| loss(&a, x))) < 1e-8);
    }

    #[test]
    fn conv_pool_activation_chain() {
        let mut rng = ChaCha8Rng::seed_from_u64(82);
        let x = DenseTensor::randn(&[5, 4, 2], 1.0, &mut rng);
        let w = DenseTensor::randn(&[3, 3, 2, 3], 0.5, &mut rng);
        let head = DenseTensor::randn(&[3], 1.0, &mut rng);
        let f = |x: &DenseTensor, w: &DenseTensor| {
            let y = conv2d_forward(x, w, 2, 1).unwrap().map(f64::tanh);
            global_avg_pool(&y).unwrap().mul(&head).unwrap().sum()
        };
        let mut t = Tape::new();
        let xv = t.param(0, x.clone()).unwrap();
        let wv = t.param(1, w.clone()).unwrap();
        let hv = t.constant(head.clone());
        let y = t.conv2d(xv, wv, 2, 1).unwrap();
        let y = t.activate(y, Activation::Tanh);
        let p = t.avg_pool(y).unwrap();
        let l = t.contract(p, hv, &[(0, 0)]).unwrap();
        let g = t.backward(l).unwrap();
        assert!(rel(g.get(0).unwrap(), &numeric_grad(&x, |x| f(x, &w))) < 1e-7);
        assert!(rel(g.get(1).unwrap(), &numeric_grad(&w, |w| f(&x, w))) < 1e-7);
    }

    #[test]
    fn softmax_ce_gradient_sums_to_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(83);
        for label in 0..4 {
            let z = DenseTensor::randn(&[4], 3.0, &mut rng);
            let mut t = Tape::new();
            let zv = t.param(0, z.clone()).unwrap();
            let l = t.softmax_cross_entropy(zv, label).unwrap();
            let g = t.backward(l).unwrap();
            assert!(g.get(0).unwrap().sum().abs() <= 1e-12);
            let numeric = numeric_grad(&z, |z| {
                let m = z.data().iter().copied().fold(f64::MIN, f64::max);
                m + z.data().iter().map(|v| (v - m).exp()).sum::<f64>().ln() - z.data()[label]
            });
            assert!(rel(g.get(0).unwrap(), &numeric) < 1e-8);
        }
    }

    #[test]
    fn mul_axis_reshape_slice_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(84);
        let x = DenseTensor::randn(&[2, 3, 4], 1.0, &mut rng);
        let v = DenseTensor::randn(&[6], 1.0, &mut rng);
        let w = DenseTensor::randn(&[4, 6], 1.0, &mut rng);
        let f = |x: &DenseTensor, v: &DenseTensor| {
            let vs = &v.data()[1..4];
            let y = DenseTensor::from_fn(x.shape(), |i| x.get(i) * vs[i[1]]);
            y.reshape(&[4, 6]).unwrap().mul(&w).unwrap().sum()
        };
        let mut t = Tape::new();
        let xv = t.param(0, x.clone()).unwrap();
        let vv = t.param(1, v.clone()).unwrap();
        let wv = t.constant(w.clone());
        let vs = t.slice(vv, 1, 3).unwrap();
        let y = t.mul_axis(xv, vs, 1).unwrap();
        let y = t.reshape(y, &[4, 6]).unwrap();
        let l = t.contract(y, wv, &[(0, 0), (1, 1)]).unwrap();
        let g = t.backward(l).unwrap();
        assert!(rel(g.get(0).unwrap(), &numeric_grad(&x, |x| f(x, &v))) < 1e-8);
        let gv = g.get(1).unwrap();
        assert!(rel(gv, &numeric_grad(&v, |v| f(&x, v))) < 1e-8);
        assert_eq!(gv.data()[0], 0.0);
        assert_eq!(gv.data()[5], 0.0);
    }

    #[test]
    fn disconnected_and_duplicate_params() {
        let mut t = Tape::new();
        let a = t.param(0, DenseTensor::ones(&[2])).unwrap();
        let _unused = t.param(1, DenseTensor::ones(&[3])).unwrap();
        assert_eq!(t.param(0, DenseTensor::ones(&[2])), Err(TapeError::DuplicateParam(0)));
        let s = t.sum(a);
        let g = t.backward(s).unwrap();
        assert_eq!(g.get(1).unwrap(), &DenseTensor::zeros(&[3]));
        assert_eq!(t.backward(a).unwrap_err(), TapeError::NotScalar(vec![2]));
    }
}
