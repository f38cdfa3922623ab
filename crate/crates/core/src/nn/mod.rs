//! Minimal f32 tensor layers with explicit backward passes.
//!
//! Every layer owns its parameters and forward cache. Backward passes
//! accumulate into `Param::grad`, so a step is: zero grads, one or more
//! forward/backward pairs, optimizer step. All shapes are batch-first.

pub mod act;
pub mod conv;
pub mod conv3d;
pub mod linear;
pub mod loss;
pub mod norm;
pub mod reference;

use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand_distr::{Distribution, Normal};

/// Weight init scale shared by all conv and linear layers.
pub const INIT_STD: f32 = 0.02;

/// A trainable tensor: value, gradient accumulator, and Adam moments.
#[derive(Debug, Clone)]
pub struct Param {
    pub value: ArrayD<f32>,
    pub grad: ArrayD<f32>,
    pub m: ArrayD<f32>,
    pub v: ArrayD<f32>,
}

impl Param {
    pub fn new(value: ArrayD<f32>) -> Self {
        let zero = ArrayD::zeros(value.raw_dim());
        Self {
            grad: zero.clone(),
            m: zero.clone(),
            v: zero,
            value,
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::new(ArrayD::zeros(IxDyn(shape)))
    }

    /// Gaussian init with mean 0 and the given standard deviation.
    pub fn normal(shape: &[usize], std: f32, rng: &mut impl Rng) -> Self {
        let dist = Normal::new(0.0f32, std).expect("std must be finite and positive");
        let value = ArrayD::from_shape_simple_fn(IxDyn(shape), || dist.sample(rng));
        Self::new(value)
    }

    pub fn filled(shape: &[usize], fill: f32) -> Self {
        Self::new(ArrayD::from_elem(IxDyn(shape), fill))
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }

    pub fn count(&self) -> usize {
        self.value.len()
    }
}

/// Adam with bias correction. One instance per model; `t` is shared across
/// that model's parameters and advances once per `step`.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub t: u64,
}

impl Adam {
    pub fn new(lr: f32, beta1: f32, beta2: f32) -> Self {
        Self {
            lr,
            beta1,
            beta2,
            eps: 1e-8,
            t: 0,
        }
    }

    pub fn step<'a>(&mut self, params: impl IntoIterator<Item = &'a mut Param>) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for p in params {
            azip_update(p, self.lr, self.beta1, self.beta2, self.eps, bc1, bc2);
        }
    }
}

fn azip_update(p: &mut Param, lr: f32, b1: f32, b2: f32, eps: f32, bc1: f32, bc2: f32) {
    let (value, grad, m, v) = (&mut p.value, &p.grad, &mut p.m, &mut p.v);
    ndarray::Zip::from(value)
        .and(grad)
        .and(m)
        .and(v)
        .for_each(|value, &g, m, v| {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *value -= lr * m_hat / (v_hat.sqrt() + eps);
        });
}
