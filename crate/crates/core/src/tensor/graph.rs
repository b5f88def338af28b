//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records each operation eagerly, storing its output value and
//! whatever the backward rule needs. Parameter leaves are copies of
//! [`ParamStore`](super::ParamStore) entries tagged with their index, so
//! [`Graph::backward`] can hand gradients back by parameter id.

use super::kernels::{self, ConvGeom};
use super::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op {
    Input,
    Param(usize),
    Conv2d { x: Var, w: Var, b: Var, geom: ConvGeom },
    MaxPool2 { x: Var, argmax: Vec<usize> },
    Relu(Var),
    Clamp01(Var),
    Linear { x: Var, w: Var, b: Var },
    Reshape(Var),
    Concat(Vec<Var>),
    Mul(Var, Var),
    Sum(Var),
    Scale(Var, f64),
    WeightedSum(Vec<(Var, f64)>),
    /// Scalar-valued fused function with its gradient precomputed at forward time.
    Scalar { x: Var, local_grad: Vec<f64> },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Parameter gradients keyed by [`ParamStore`](super::ParamStore) index.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Gradients {
    entries: Vec<(usize, Vec<f64>)>,
}

impl Gradients {
    pub fn get(&self, id: usize) -> Option<&[f64]> {
        self.entries.iter().find(|(i, _)| *i == id).map(|(_, g)| g.as_slice())
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, &[f64])> {
        self.entries.iter().map(|(i, g)| (*i, g.as_slice()))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

fn add_into(slot: &mut Option<Vec<f64>>, g: Vec<f64>) {
    match slot {
        Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
        None => *slot = Some(g),
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Constant input; never receives a gradient.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Input, false)
    }

    /// Trainable leaf bound to parameter `id`.
    pub fn param(&mut self, id: usize, value: &Tensor) -> Var {
        let mut v = value.clone();
        v.clear_grad();
        self.push(v, Op::Param(id), true)
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let geom = ConvGeom::new(self.shape(x), self.shape(w), self.shape(b), stride, pad)?;
        let out = kernels::conv2d_raw(
            self.value(x).data(),
            self.value(w).data(),
            self.value(b).data(),
            &geom,
        );
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        Ok(self.push(Tensor::new(&geom.out_shape(), out)?, Op::Conv2d { x, w, b, geom }, rg))
    }

    pub fn maxpool2x2(&mut self, x: Var) -> Result<Var> {
        let (out, argmax, shape) = kernels::maxpool2x2_raw(self.value(x).data(), self.shape(x))?;
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(&shape, out)?, Op::MaxPool2 { x, argmax }, rg))
    }

    /// `max(x, 0)`, except that NaN passes through.
    pub fn relu(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let data = t.data().iter().map(|&v| if v < 0.0 { 0.0 } else { v }).collect();
        let out = Tensor::new(t.shape(), data).expect("same shape");
        let rg = self.rg(x);
        self.push(out, Op::Relu(x), rg)
    }

    /// `min(max(x, 0), 1)`; gradient 1 on the closed interval [0, 1].
    pub fn clamp01(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let data = t.data().iter().map(|&v| v.clamp(0.0, 1.0)).collect();
        let out = Tensor::new(t.shape(), data).expect("same shape");
        let rg = self.rg(x);
        self.push(out, Op::Clamp01(x), rg)
    }

    /// x[N,In], w[Out,In], b[Out] → x·wᵀ + b.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xs, ws, bs) = (self.shape(x), self.shape(w), self.shape(b));
        if xs.len() != 2 || ws.len() != 2 || ws[1] != xs[1] || bs != [ws[0]] {
            return Err(Error::shape("linear", xs, ws));
        }
        let (n, fin, fout) = (xs[0], xs[1], ws[0]);
        let y = kernels::linear_raw(
            self.value(x).data(),
            self.value(w).data(),
            self.value(b).data(),
            n,
            fin,
            fout,
        );
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        Ok(self.push(Tensor::new(&[n, fout], y)?, Op::Linear { x, w, b }, rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::Reshape(x), rg))
    }

    /// [N, ...] → [N, prod(...)].
    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        let n = s[0];
        let rest = s[1..].iter().product();
        self.reshape(x, &[n, rest])
    }

    /// Concatenates 2-D tensors along the feature axis.
    pub fn concat(&mut self, xs: &[Var]) -> Result<Var> {
        let first = xs.first().ok_or_else(|| Error::Invalid("concat of nothing".into()))?;
        let n = self.shape(*first)[0];
        for &v in xs {
            let s = self.shape(v);
            if s.len() != 2 || s[0] != n {
                return Err(Error::shape("concat", self.shape(*first), s));
            }
        }
        let total: usize = xs.iter().map(|&v| self.shape(v)[1]).sum();
        let mut data = Vec::with_capacity(n * total);
        for i in 0..n {
            for &v in xs {
                data.extend_from_slice(self.value(v).row(i));
            }
        }
        let rg = xs.iter().any(|&v| self.rg(v));
        Ok(self.push(Tensor::new(&[n, total], data)?, Op::Concat(xs.to_vec()), rg))
    }

    /// Elementwise product of equal-shape tensors.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape("mul", self.shape(a), self.shape(b)));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let out = Tensor::new(self.shape(a), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    /// Multiplies every element by a constant.
    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let t = self.value(x);
        let out = Tensor::new(t.shape(), t.data().iter().map(|v| v * factor).collect()).expect("same shape");
        let rg = self.rg(x);
        self.push(out, Op::Scale(x, factor), rg)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    /// Σ wᵢ·xᵢ over scalar nodes.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Result<Var> {
        let mut s = 0.0;
        for &(v, w) in terms {
            if self.value(v).numel() != 1 {
                return Err(Error::shape("weighted_sum (scalar terms)", self.shape(v), &[1]));
            }
            s += w * self.value(v).item();
        }
        let rg = terms.iter().any(|&(v, _)| self.rg(v));
        Ok(self.push(Tensor::scalar(s), Op::WeightedSum(terms.to_vec()), rg))
    }

    /// Registers a scalar function of `x` whose value and gradient the caller
    /// computed. Used for fused losses.
    pub fn scalar_fn(&mut self, x: Var, value: f64, local_grad: Vec<f64>) -> Result<Var> {
        if local_grad.len() != self.value(x).numel() {
            return Err(Error::shape("scalar_fn", self.shape(x), &[local_grad.len()]));
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::scalar(value), Op::Scalar { x, local_grad }, rg))
    }

    /// Mean softmax cross-entropy over rows of `logits` [N,K].
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || s[0] != labels.len() {
            return Err(Error::shape("softmax_cross_entropy", &s, &[labels.len()]));
        }
        let k = s[1];
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::Invalid(format!("label {bad} out of range for {k} classes")));
        }
        let n = s[0] as f64;
        let probs = softmax_rows(self.value(logits))?;
        let t = self.value(logits);
        let mut loss = 0.0;
        let mut grad = probs.into_data();
        for (i, &l) in labels.iter().enumerate() {
            let row = t.row(i);
            loss += log_sum_exp(row) - row[l];
            grad[i * k + l] -= 1.0;
        }
        grad.iter_mut().for_each(|g| *g /= n);
        self.scalar_fn(logits, loss / n, grad)
    }

    /// Mean absolute error against a constant target of the same shape.
    pub fn l1_loss(&mut self, x: Var, target: &Tensor) -> Result<Var> {
        if self.shape(x) != target.shape() {
            return Err(Error::shape("l1_loss", self.shape(x), target.shape()));
        }
        let n = target.numel() as f64;
        let (mut loss, mut grad) = (0.0, Vec::with_capacity(target.numel()));
        for (a, b) in self.value(x).data().iter().zip(target.data()) {
            loss += (a - b).abs();
            grad.push(sign(a - b) / n);
        }
        self.scalar_fn(x, loss / n, grad)
    }

    /// Reverse pass from a scalar node; returns gradients of every reachable parameter.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Invalid(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = Vec::new();
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(vec![1.0]);
        let mut out = Gradients::default();

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let send = |v: Var, gv: Vec<f64>, grads: &mut Vec<Option<Vec<f64>>>| {
                if self.nodes[v.0].requires_grad {
                    add_into(&mut grads[v.0], gv);
                }
            };
            match &node.op {
                Op::Input => {}
                Op::Param(id) => match out.entries.iter_mut().find(|(j, _)| j == id) {
                    Some((_, acc)) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    None => out.entries.push((*id, g)),
                },
                Op::Conv2d { x, w, b, geom } => {
                    let (dx, dw, db) = kernels::conv2d_backward(
                        self.value(*x).data(),
                        self.value(*w).data(),
                        &g,
                        geom,
                        self.rg(*x),
                    );
                    if let Some(dx) = dx {
                        send(*x, dx, &mut grads);
                    }
                    send(*w, dw, &mut grads);
                    send(*b, db, &mut grads);
                }
                Op::MaxPool2 { x, argmax } => {
                    let mut dx = vec![0.0; self.value(*x).numel()];
                    for (gi, &src) in g.iter().zip(argmax) {
                        dx[src] += gi;
                    }
                    send(*x, dx, &mut grads);
                }
                Op::Relu(x) => {
                    let dx = g
                        .iter()
                        .zip(self.value(*x).data())
                        .map(|(gi, &xi)| if xi > 0.0 { *gi } else { 0.0 })
                        .collect();
                    send(*x, dx, &mut grads);
                }
                Op::Clamp01(x) => {
                    let dx = g
                        .iter()
                        .zip(self.value(*x).data())
                        .map(|(gi, &xi)| if (0.0..=1.0).contains(&xi) { *gi } else { 0.0 })
                        .collect();
                    send(*x, dx, &mut grads);
                }
                Op::Linear { x, w, b } => {
                    let xs = self.shape(*x);
                    let (n, fin) = (xs[0], xs[1]);
                    let fout = self.shape(*w)[0];
                    if self.rg(*x) {
                        let mut dx = vec![0.0; n * fin];
                        kernels::gemm(n, fout, fin, &g, fout, 1, self.value(*w).data(), fin, 1, 0.0, &mut dx, fin, 1);
                        send(*x, dx, &mut grads);
                    }
                    if self.rg(*w) {
                        let mut dw = vec![0.0; fout * fin];
                        kernels::gemm(fout, n, fin, &g, 1, fout, self.value(*x).data(), fin, 1, 0.0, &mut dw, fin, 1);
                        send(*w, dw, &mut grads);
                    }
                    if self.rg(*b) {
                        let mut db = vec![0.0; fout];
                        for row in g.chunks(fout) {
                            db.iter_mut().zip(row).for_each(|(a, b)| *a += b);
                        }
                        send(*b, db, &mut grads);
                    }
                }
                Op::Reshape(x) => send(*x, g, &mut grads),
                Op::Concat(xs) => {
                    let n = node.value.shape()[0];
                    let total = node.value.shape()[1];
                    let mut offset = 0;
                    for &v in xs {
                        let width = self.shape(v)[1];
                        if self.rg(v) {
                            let mut dv = Vec::with_capacity(n * width);
                            for r in 0..n {
                                dv.extend_from_slice(&g[r * total + offset..r * total + offset + width]);
                            }
                            send(v, dv, &mut grads);
                        }
                        offset += width;
                    }
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                    send(*a, g.iter().zip(vb).map(|(x, y)| x * y).collect(), &mut grads);
                    send(*b, g.iter().zip(va).map(|(x, y)| x * y).collect(), &mut grads);
                }
                Op::Scale(x, f) => send(*x, g.iter().map(|v| v * f).collect(), &mut grads),
                Op::Sum(x) => {
                    let n = self.value(*x).numel();
                    send(*x, vec![g[0]; n], &mut grads);
                }
                Op::WeightedSum(terms) => {
                    for &(v, w) in terms {
                        send(v, vec![w * g[0]], &mut grads);
                    }
                }
                Op::Scalar { x, local_grad } => {
                    send(*x, local_grad.iter().map(|l| l * g[0]).collect(), &mut grads);
                }
            }
        }
        out.entries.sort_by_key(|(i, _)| *i);
        Ok(out)
    }
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn log_sum_exp(row: &[f64]) -> f64 {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

/// Row-wise softmax of a 2-D tensor, max-shifted.
pub fn softmax_rows(t: &Tensor) -> Result<Tensor> {
    if t.shape().len() != 2 {
        return Err(Error::shape("softmax", t.shape(), &[0, 0]));
    }
    let mut out = Vec::with_capacity(t.numel());
    for i in 0..t.shape()[0] {
        let row = t.row(i);
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
        let z: f64 = e.iter().sum();
        out.extend(e.into_iter().map(|v| v / z));
    }
    Tensor::new(t.shape(), out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_scalar_gradient() {
        let mut g = Graph::new();
        let x = g.input(Tensor::scalar(3.0));
        let w = g.param(0, &Tensor::scalar(2.0));
        let y = g.mul(w, x).unwrap();
        let loss = g.sum(y);
        assert_eq!(g.value(loss).item(), 6.0);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(0).unwrap(), &[3.0]);
    }

    #[test]
    fn clamp_forward_and_subgradient() {
        let mut g = Graph::new();
        let w = g.param(0, &Tensor::new(&[3], vec![-1.0, 0.5, 2.0]).unwrap());
        let c = g.clamp01(w);
        assert_eq!(g.value(c).data(), &[0.0, 0.5, 1.0]);
        let s = g.sum(c);
        assert_eq!(g.backward(s).unwrap().get(0).unwrap(), &[0.0, 1.0, 0.0]);

        let mut g = Graph::new();
        let w = g.param(0, &Tensor::new(&[3], vec![-0.1, 0.3, 1.2]).unwrap());
        let c = g.clamp01(w);
        let s = g.sum(c);
        assert_eq!(g.backward(s).unwrap().get(0).unwrap(), &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn clamp_boundary_convention() {
        let mut g = Graph::new();
        let w = g.param(0, &Tensor::new(&[4], vec![0.0, 1.0, -2.0, 3.0]).unwrap());
        let c = g.clamp01(w);
        assert_eq!(g.value(c).data(), &[0.0, 1.0, 0.0, 1.0]);
        let s = g.sum(c);
        assert_eq!(g.backward(s).unwrap().get(0).unwrap(), &[1.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::new();
        let w = g.param(0, &Tensor::zeros(&[2]));
        let r = g.relu(w);
        assert!(g.backward(r).is_err());
    }

    #[test]
    fn shared_parameter_accumulates() {
        let mut g = Graph::new();
        let a = g.param(4, &Tensor::scalar(2.0));
        let b = g.param(4, &Tensor::scalar(2.0));
        let p = g.mul(a, b).unwrap();
        let s = g.sum(p);
        assert_eq!(g.backward(s).unwrap().get(4).unwrap(), &[4.0]);
    }

    #[test]
    fn softmax_rows_normalized() {
        let t = Tensor::new(&[2, 3], vec![1000.0, 0.0, -1000.0, 0.1, 0.2, 0.3]).unwrap();
        let p = softmax_rows(&t).unwrap();
        for i in 0..2 {
            let s: f64 = p.row(i).iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
        assert!(p.data().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn cross_entropy_is_stable_and_rejects_bad_labels() {
        let mut g = Graph::new();
        let l = g.param(0, &Tensor::new(&[1, 2], vec![800.0, -800.0]).unwrap());
        let ce = g.softmax_cross_entropy(l, &[1]).unwrap();
        assert!((g.value(ce).item() - 1600.0).abs() < 1e-9);
        assert!(g.softmax_cross_entropy(l, &[2]).is_err());
    }
}
