//! Dense float64 tensors, trainable parameters, reverse-mode differentiation
//! and the momentum SGD optimizer.

mod graph;
mod kernels;

pub use graph::{softmax_rows, Gradients, Graph, Var};
pub use kernels::{conv2d_forward, conv_output_size, maxpool2x2_forward};

use crate::error::{Error, Result};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

/// Row-major n-dimensional array with an optional gradient buffer.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::Invalid(format!("tensor shape {shape:?} has a zero extent")));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape("Tensor::new", shape, &[data.len()]));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
            grad: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
            grad: None,
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
            grad: None,
        }
    }

    /// He-uniform initialization, for layers followed by a ReLU.
    pub fn he_uniform(shape: &[usize], fan_in: usize, rng: &mut crate::rng::Rng) -> Self {
        let bound = (6.0 / fan_in as f64).sqrt();
        Self::uniform(shape, bound, rng)
    }

    /// Xavier/Glorot-uniform initialization.
    pub fn xavier_uniform(
        shape: &[usize],
        fan_in: usize,
        fan_out: usize,
        rng: &mut crate::rng::Rng,
    ) -> Self {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        Self::uniform(shape, bound, rng)
    }

    /// Independent draws from U(−bound, bound).
    pub fn uniform(shape: &[usize], bound: f64, rng: &mut crate::rng::Rng) -> Self {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
        Tensor {
            shape: shape.to_vec(),
            data,
            grad: None,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Scalar value of a one-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn set_grad(&mut self, grad: Vec<f64>) -> Result<()> {
        if grad.len() != self.data.len() {
            return Err(Error::shape("set_grad", &self.shape, &[grad.len()]));
        }
        self.grad = Some(grad);
        Ok(())
    }

    /// Adds `g` into the gradient buffer, creating it if absent.
    pub fn accumulate_grad(&mut self, g: &[f64]) -> Result<()> {
        if g.len() != self.data.len() {
            return Err(Error::shape("accumulate_grad", &self.shape, &[g.len()]));
        }
        match &mut self.grad {
            Some(buf) => buf.iter_mut().zip(g).for_each(|(a, b)| *a += b),
            None => self.grad = Some(g.to_vec()),
        }
        Ok(())
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::shape("reshape", &self.shape, shape));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
            && self
                .grad
                .as_ref()
                .is_none_or(|g| g.iter().all(|v| v.is_finite()))
    }

    /// Row `i` of a 2-D tensor.
    pub fn row(&self, i: usize) -> &[f64] {
        let cols = self.shape[1..].iter().product::<usize>();
        &self.data[i * cols..(i + 1) * cols]
    }
}

/// A trainable tensor together with its momentum buffer.
#[derive(Clone, Debug, PartialEq)]
pub struct Parameter {
    pub value: Tensor,
    pub momentum_buffer: Tensor,
}

impl Parameter {
    pub fn new(value: Tensor) -> Self {
        let momentum_buffer = Tensor::zeros(value.shape());
        Parameter {
            value,
            momentum_buffer,
        }
    }
}

/// Momentum SGD hyper-parameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl OptimizerState {
    pub fn new(learning_rate: f64, momentum: f64, weight_decay: f64) -> Result<Self> {
        if !(learning_rate > 0.0) {
            return Err(Error::Config(format!("learning rate must be > 0, got {learning_rate}")));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::Config(format!("momentum must be in [0,1), got {momentum}")));
        }
        if !(weight_decay >= 0.0) {
            return Err(Error::Config(format!("weight decay must be >= 0, got {weight_decay}")));
        }
        Ok(OptimizerState {
            learning_rate,
            momentum,
            weight_decay,
        })
    }
}

/// One momentum SGD step over `params`:
/// `buf = momentum*buf + grad + wd*value; value -= lr*buf`, then grads are cleared.
///
/// Nothing is modified unless every parameter carries a gradient.
pub fn sgd_step<'a, I>(params: I, opt: &OptimizerState) -> Result<()>
where
    I: IntoIterator<Item = &'a mut Parameter>,
{
    let params: Vec<&mut Parameter> = params.into_iter().collect();
    if let Some(i) = params.iter().position(|p| p.value.grad.is_none()) {
        return Err(Error::Invalid(format!("sgd_step: parameter {i} has no gradient")));
    }
    for p in params {
        let grad = p.value.grad.take().expect("checked above");
        let buf = &mut p.momentum_buffer.data;
        let val = &mut p.value.data;
        for ((b, v), g) in buf.iter_mut().zip(val.iter_mut()).zip(grad) {
            *b = opt.momentum * *b + g + opt.weight_decay * *v;
            *v -= opt.learning_rate * *b;
        }
    }
    Ok(())
}

/// Named, ordered collection of parameters. Graph parameter leaves refer to
/// entries by index.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    params: Vec<Parameter>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, value: Tensor) -> usize {
        self.names.push(name.into());
        self.params.push(Parameter::new(value));
        self.params.len() - 1
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn name(&self, id: usize) -> &str {
        &self.names[id]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn get(&self, id: usize) -> &Parameter {
        &self.params[id]
    }

    pub fn get_mut(&mut self, id: usize) -> &mut Parameter {
        &mut self.params[id]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Parameter)> {
        self.names.iter().map(String::as_str).zip(self.params.iter())
    }

    /// Writes gradients from a backward pass into the parameters' grad buffers.
    pub fn accumulate(&mut self, grads: &Gradients) -> Result<()> {
        for (id, g) in grads.iter() {
            self.params[id].value.accumulate_grad(g)?;
        }
        Ok(())
    }

    pub fn clear_grads(&mut self) {
        self.params.iter_mut().for_each(|p| p.value.clear_grad());
    }

    /// Rescales the gradients of `ids` so their joint L2 norm is at most
    /// `max_norm`. Returns the norm before rescaling.
    pub fn clip_grad_norm(&mut self, ids: &[usize], max_norm: f64) -> f64 {
        let sq: f64 = ids
            .iter()
            .filter_map(|&i| self.params[i].value.grad())
            .flat_map(|g| g.iter().map(|v| v * v))
            .sum();
        let norm = sq.sqrt();
        if norm > max_norm {
            let s = max_norm / norm;
            for &i in ids {
                if let Some(g) = self.params[i].value.grad.as_mut() {
                    g.iter_mut().for_each(|v| *v *= s);
                }
            }
        }
        norm
    }

    /// Applies [`sgd_step`] to the parameters whose ids are listed.
    pub fn step(&mut self, ids: &[usize], opt: &OptimizerState) -> Result<()> {
        let mut selected = vec![false; self.params.len()];
        for &i in ids {
            selected[i] = true;
        }
        let chosen = self
            .params
            .iter_mut()
            .zip(selected)
            .filter_map(|(p, s)| s.then_some(p));
        sgd_step(chosen, opt)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn param(v: f64, g: f64) -> Parameter {
        let mut p = Parameter::new(Tensor::scalar(v));
        p.value.set_grad(vec![g]).unwrap();
        p
    }

    #[test]
    fn clip_rescales_joint_norm() {
        let mut store = ParamStore::new();
        let a = store.push("a", Tensor::zeros(&[1]));
        let b = store.push("b", Tensor::zeros(&[1]));
        store.get_mut(a).value.set_grad(vec![3.0]).unwrap();
        store.get_mut(b).value.set_grad(vec![4.0]).unwrap();
        assert_eq!(store.clip_grad_norm(&[a, b], 10.0), 5.0);
        assert_eq!(store.get(a).value.grad().unwrap(), &[3.0]);
        assert_eq!(store.clip_grad_norm(&[a, b], 1.0), 5.0);
        assert!((store.get(a).value.grad().unwrap()[0] - 0.6).abs() < 1e-15);
        assert!((store.get(b).value.grad().unwrap()[0] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn sgd_plain_step() {
        let mut p = param(1.0, 1.0);
        let opt = OptimizerState::new(0.1, 0.0, 0.0).unwrap();
        sgd_step([&mut p], &opt).unwrap();
        assert!((p.value.item() - 0.9).abs() < 1e-15);
        assert!(p.value.grad().is_none());
    }

    #[test]
    fn sgd_momentum_two_steps() {
        let mut p = param(1.0, 1.0);
        let opt = OptimizerState::new(0.1, 0.9, 0.0).unwrap();
        sgd_step([&mut p], &opt).unwrap();
        p.value.set_grad(vec![1.0]).unwrap();
        sgd_step([&mut p], &opt).unwrap();
        // buf: 1, then 0.9 + 1 = 1.9; w = 1 - 0.1 - 0.19
        assert!((p.value.item() - 0.71).abs() < 1e-12);
    }

    #[test]
    fn sgd_zero_grad_is_fixed_point() {
        let mut p = Parameter::new(Tensor::new(&[3], vec![0.5, -2.0, 3.0]).unwrap());
        p.value.set_grad(vec![0.0; 3]).unwrap();
        let before = p.value.data().to_vec();
        sgd_step([&mut p], &OptimizerState::new(0.5, 0.0, 0.0).unwrap()).unwrap();
        assert_eq!(p.value.data(), &before[..]);
    }

    #[test]
    fn sgd_weight_decay() {
        let mut p = param(2.0, 0.0);
        sgd_step([&mut p], &OptimizerState::new(0.1, 0.0, 0.5).unwrap()).unwrap();
        assert!((p.value.item() - 1.9).abs() < 1e-15);
    }

    #[test]
    fn sgd_rejects_missing_grad() {
        let mut a = param(1.0, 1.0);
        let mut b = Parameter::new(Tensor::scalar(1.0));
        let err = sgd_step([&mut a, &mut b], &OptimizerState::new(0.1, 0.0, 0.0).unwrap());
        assert!(err.is_err());
        // untouched on failure
        assert_eq!(a.value.item(), 1.0);
    }

    #[test]
    fn optimizer_validation() {
        assert!(OptimizerState::new(0.0, 0.5, 0.0).is_err());
        assert!(OptimizerState::new(0.1, 1.0, 0.0).is_err());
        assert!(OptimizerState::new(0.1, 0.5, -1.0).is_err());
    }

    #[test]
    fn tensor_shape_checked() {
        assert!(Tensor::new(&[2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::new(&[0], vec![]).is_err());
        let t = Tensor::new(&[2, 3], (0..6).map(f64::from).collect()).unwrap();
        assert_eq!(t.row(1), &[3.0, 4.0, 5.0]);
        assert!(t.clone().reshape(&[3, 3]).is_err());
        assert_eq!(t.reshape(&[6]).unwrap().shape(), &[6]);
    }
}
