//! Minimal layer library with explicit backward passes.
//!
//! Layers cache what they need during a [`Mode::Train`] forward pass and
//! accumulate parameter gradients into [`Param::grad`] on `backward`. All
//! arithmetic is `f64` so gradients can be checked against finite
//! differences.

mod batchnorm;
mod conv;
pub mod efficientnet;
mod layers;
pub mod tiny;

use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub use batchnorm::BatchNorm2d;
pub use conv::Conv2d;
pub use layers::{Activation, AvgPool2d, Dropout, GlobalPool, Linear, MaxPool2d, PoolKind};

/// Forward-pass mode. Training caches activations and enables dropout and
/// batch statistics.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

impl Mode {
    pub fn is_train(self) -> bool {
        self == Mode::Train
    }
}

/// A named tensor with its gradient accumulator. Buffers (such as batch-norm
/// running statistics) are saved in checkpoints but never optimized.
#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub value: ArrayD<f64>,
    pub grad: ArrayD<f64>,
    pub trainable: bool,
}

impl Param {
    pub fn new(name: impl Into<String>, value: ArrayD<f64>) -> Self {
        let grad = ArrayD::zeros(value.raw_dim());
        Self {
            name: name.into(),
            value,
            grad,
            trainable: true,
        }
    }

    pub fn buffer(name: impl Into<String>, value: ArrayD<f64>) -> Self {
        Self {
            trainable: false,
            ..Self::new(name, value)
        }
    }

    pub fn zeros(name: impl Into<String>, shape: &[usize]) -> Self {
        Self::new(name, ArrayD::zeros(IxDyn(shape)))
    }

    /// Uniform initialization in `[-bound, bound]`.
    pub fn uniform(name: impl Into<String>, shape: &[usize], bound: f64, rng: &mut ChaCha8Rng) -> Self {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| rng.random_range(-bound..=bound)).collect();
        Self::new(name, ArrayD::from_shape_vec(IxDyn(shape), data).expect("shape matches data"))
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    pub(crate) fn data(&self) -> &[f64] {
        self.value.as_slice().expect("parameters are contiguous")
    }

    pub(crate) fn grad_mut(&mut self) -> &mut [f64] {
        self.grad.as_slice_mut().expect("parameters are contiguous")
    }
}

/// Anything owning parameters.
pub trait Module {
    fn visit_params(&self, f: &mut dyn FnMut(&Param));
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param));

    fn zero_grad(&mut self) {
        self.visit_params_mut(&mut |p| p.grad.fill(0.0));
    }

    fn num_params(&self) -> usize {
        let mut n = 0;
        self.visit_params(&mut |p| {
            if p.trainable {
                n += p.len()
            }
        });
        n
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}
