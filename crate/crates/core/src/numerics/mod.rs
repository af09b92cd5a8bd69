//! Dense tensor storage, forward/backward kernels, and the Adam optimizer.
//!
//! Everything here is generic over [`Scalar`] so the same kernel code runs
//! at f32 for training and at f64 for finite-difference gradient checks.
//! Storage is row-major and contiguous; slicing copies (no aliasing views).

mod gradcheck;
mod ops;

pub use gradcheck::{grad_check, GradCheckFn};
pub use ops::*;

use crate::error::{Error, Result};
use num_traits::Float;
use std::fmt;

/// Element type of tensors: f32 in production, f64 for gradient oracles.
pub trait Scalar:
    Float
    + num_traits::NumAssign
    + std::iter::Sum
    + Send
    + Sync
    + fmt::Debug
    + fmt::Display
    + 'static
{
    fn of_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
    fn from_usize(v: usize) -> Self {
        Self::of_f64(v as f64)
    }
}

impl Scalar for f32 {
    fn of_f64(v: f64) -> Self {
        v as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    fn of_f64(v: f64) -> Self {
        v
    }
    fn as_f64(self) -> f64 {
        self
    }
}

/// Dense n-dimensional array, row-major, with an optional gradient buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
    grad: Option<Vec<T>>,
}

pub(crate) fn shape_len(shape: &[usize]) -> usize {
    shape.iter().product()
}

pub(crate) fn fmt_shape(shape: &[usize]) -> String {
    let dims: Vec<String> = shape.iter().map(|d| d.to_string()).collect();
    format!("[{}]", dims.join("x"))
}

impl<T: Scalar> Tensor<T> {
    pub fn zeros(shape: &[usize]) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![T::zero(); shape_len(shape)],
            grad: None,
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Result<Self> {
        if shape_len(shape) != data.len() {
            return Err(Error::DimensionMismatch {
                op: "Tensor::from_vec",
                left: fmt_shape(shape),
                right: format!("{} elements", data.len()),
            });
        }
        if shape.iter().any(|&d| d == 0) && !data.is_empty() {
            return Err(Error::contract("zero extent with non-empty data"));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
            grad: None,
        })
    }

    pub fn scalar(v: T) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![v],
            grad: None,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn grad(&self) -> Option<&[T]> {
        self.grad.as_deref()
    }

    pub fn grad_mut(&mut self) -> Option<&mut [T]> {
        self.grad.as_deref_mut()
    }

    /// Allocate (or keep) a zero-initialized gradient buffer and return it.
    pub fn ensure_grad(&mut self) -> &mut [T] {
        if self.grad.is_none() {
            self.grad = Some(vec![T::zero(); self.data.len()]);
        }
        self.grad.as_deref_mut().unwrap()
    }

    /// Split borrow: read the values while writing the gradient buffer
    /// (allocated on demand).
    pub fn data_and_grad_mut(&mut self) -> (&[T], &mut [T]) {
        if self.grad.is_none() {
            self.grad = Some(vec![T::zero(); self.data.len()]);
        }
        (&self.data, self.grad.as_deref_mut().unwrap())
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = self.grad.as_deref_mut() {
            g.fill(T::zero());
        }
    }

    pub fn set_grad(&mut self, grad: Vec<T>) -> Result<()> {
        if grad.len() != self.data.len() {
            return Err(Error::DimensionMismatch {
                op: "set_grad",
                left: fmt_shape(&self.shape),
                right: format!("{} elements", grad.len()),
            });
        }
        self.grad = Some(grad);
        Ok(())
    }

    /// Reinterpret the shape without touching data (element count must match).
    pub fn reshaped(mut self, shape: &[usize]) -> Result<Self> {
        if shape_len(shape) != self.data.len() {
            return Err(Error::DimensionMismatch {
                op: "reshape",
                left: fmt_shape(&self.shape),
                right: fmt_shape(shape),
            });
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    /// Leading dimensions folded into rows, last dimension as columns.
    pub fn fold_2d(&self) -> (usize, usize) {
        match self.shape.split_last() {
            Some((&cols, lead)) => (lead.iter().product::<usize>().max(1), cols),
            None => (1, 1),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Map to a different scalar type (f32 <-> f64 promotion for oracles).
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::of_f64(v.as_f64())).collect(),
            grad: self
                .grad
                .as_ref()
                .map(|g| g.iter().map(|v| U::of_f64(v.as_f64())).collect()),
        }
    }
}

/// First/second Adam moment buffers for one parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T = f32> {
    pub m: Vec<T>,
    pub v: Vec<T>,
    pub step: u64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(param_len: usize) -> Self {
        AdamState {
            m: vec![T::zero(); param_len],
            v: vec![T::zero(); param_len],
            step: 0,
        }
    }
}

/// Adam hyperparameters. Betas follow the minGPT convention.
#[derive(Debug, Clone, Copy)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        AdamHyper {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
        }
    }
}

/// One bias-corrected Adam update. Requires `param.grad` to be present;
/// increments `state.step`.
pub fn adam_step<T: Scalar>(
    param: &mut Tensor<T>,
    state: &mut AdamState<T>,
    hyper: AdamHyper,
) -> Result<()> {
    let n = param.len();
    if state.m.len() != n || state.v.len() != n {
        return Err(Error::DimensionMismatch {
            op: "adam_step",
            left: fmt_shape(param.shape()),
            right: format!("state of {} elements", state.m.len()),
        });
    }
    let grad = param
        .grad
        .take()
        .ok_or_else(|| Error::MissingGrad(fmt_shape(&param.shape)))?;

    state.step += 1;
    let t = state.step as i32;
    let beta1 = T::of_f64(hyper.beta1);
    let beta2 = T::of_f64(hyper.beta2);
    let one = T::one();
    let bias1 = one - beta1.powi(t);
    let bias2 = one - beta2.powi(t);
    let lr = T::of_f64(hyper.lr);
    let eps = T::of_f64(hyper.eps);

    for i in 0..n {
        let g = grad[i];
        let m = beta1 * state.m[i] + (one - beta1) * g;
        let v = beta2 * state.v[i] + (one - beta2) * g * g;
        state.m[i] = m;
        state.v[i] = v;
        let m_hat = m / bias1;
        let v_hat = v / bias2;
        param.data[i] = param.data[i] - lr * m_hat / (v_hat.sqrt() + eps);
    }
    param.grad = Some(grad);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_checks_element_count() {
        let err = Tensor::<f32>::from_vec(&[2, 3], vec![0.0; 5]).unwrap_err();
        assert!(matches!(err, Error::DimensionMismatch { .. }));
    }

    #[test]
    fn reshape_preserves_data() {
        let t = Tensor::from_vec(&[2, 3], vec![1.0f32, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let r = t.clone().reshaped(&[3, 2]).unwrap();
        assert_eq!(r.shape(), &[3, 2]);
        assert_eq!(r.data(), t.data());
        assert!(t.clone().reshaped(&[4, 2]).is_err());
    }

    #[test]
    fn adam_zero_grad_leaves_param_unchanged() {
        let mut p = Tensor::from_vec(&[3], vec![1.0f32, -2.0, 0.5]).unwrap();
        p.ensure_grad();
        let mut st = AdamState::new(3);
        adam_step(&mut p, &mut st, AdamHyper::default()).unwrap();
        assert_eq!(p.data(), &[1.0, -2.0, 0.5]);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn adam_scalar_first_step_matches_hand_formula() {
        // p=1, g=1, lr=1e-3: bias correction makes m_hat = v_hat = 1,
        // so the update is lr / (1 + eps) ~= 1e-3.
        let mut p = Tensor::from_vec(&[1], vec![1.0f64]).unwrap();
        p.ensure_grad()[0] = 1.0;
        let mut st = AdamState::new(1);
        adam_step(&mut p, &mut st, AdamHyper::default()).unwrap();
        let expected = 1.0 - 1e-3 * (1.0 / (1.0 + 1e-8));
        assert!((p.data()[0] - expected).abs() < 1e-12);
        assert!((p.data()[0] - 0.999).abs() < 1e-8);
    }

    #[test]
    fn adam_is_deterministic_across_identical_params() {
        let mk = || {
            let mut p = Tensor::from_vec(&[4], vec![0.3f32, -1.0, 2.0, 0.0]).unwrap();
            p.ensure_grad().copy_from_slice(&[0.1, -0.2, 0.3, 0.0]);
            p
        };
        let (mut a, mut b) = (mk(), mk());
        let (mut sa, mut sb) = (AdamState::new(4), AdamState::new(4));
        let h = AdamHyper::default();
        for _ in 0..5 {
            a.ensure_grad().copy_from_slice(&[0.1, -0.2, 0.3, 0.0]);
            b.ensure_grad().copy_from_slice(&[0.1, -0.2, 0.3, 0.0]);
            adam_step(&mut a, &mut sa, h).unwrap();
            adam_step(&mut b, &mut sb, h).unwrap();
        }
        assert_eq!(a.data(), b.data());
        assert_eq!(sa.step, 5);
    }

    #[test]
    fn adam_missing_grad_is_a_state_error() {
        let mut p = Tensor::from_vec(&[1], vec![1.0f32]).unwrap();
        let mut st = AdamState::new(1);
        let err = adam_step(&mut p, &mut st, AdamHyper::default()).unwrap_err();
        assert!(matches!(err, Error::MissingGrad(_)));
    }
}
