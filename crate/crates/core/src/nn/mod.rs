//! The fixed classifier: `Flatten(784) -> Dense(128, relu) -> Dropout -> Dense(10, softmax)`.
//!
//! Weights are stored input-major (`w1` is `[784, 128]`, `w2` is `[128, 10]`)
//! so the forward pass is a sequence of contiguous axpy updates, and zero
//! input pixels (most of an MNIST digit) are skipped outright.

mod ops;
mod pass;
mod train;

pub use ops::{argmax, cross_entropy_loss, relu, softmax, PROB_FLOOR};
pub use pass::{backward, forward, sgd_step, DropoutMask, ForwardCache, Gradients, Mode};
pub use train::{evaluate, train_epochs, EvalResult, EvalTally, EVAL_CHUNK};

use alloc::vec::Vec;
use rand::Rng;

use crate::error::{ensure, ContractViolation};
use crate::rng::seeded;
use crate::tensor::Tensor;

pub const INPUT: usize = 784;
pub const HIDDEN: usize = 128;
pub const CLASSES: usize = 10;
/// `784*128 + 128 + 128*10 + 10`.
pub const PARAM_COUNT: usize = INPUT * HIDDEN + HIDDEN + HIDDEN * CLASSES + CLASSES;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Softmax,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Layer {
    Flatten {
        outputs: usize,
    },
    Dense {
        inputs: usize,
        outputs: usize,
        activation: Activation,
    },
    Dropout {
        units: usize,
        rate: f32,
    },
}

/// Layer sequence of the model. Only the dropout rate is configurable.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelArch {
    dropout_rate: f32,
}

impl ModelArch {
    pub fn new(dropout_rate: f32) -> Result<Self, ContractViolation> {
        ensure!(
            (0.0..1.0).contains(&dropout_rate),
            "dropout rate {} outside [0, 1)",
            dropout_rate
        );
        Ok(Self { dropout_rate })
    }

    pub fn dropout_rate(&self) -> f32 {
        self.dropout_rate
    }

    pub fn layers(&self) -> [Layer; 4] {
        [
            Layer::Flatten { outputs: INPUT },
            Layer::Dense {
                inputs: INPUT,
                outputs: HIDDEN,
                activation: Activation::Relu,
            },
            Layer::Dropout {
                units: HIDDEN,
                rate: self.dropout_rate,
            },
            Layer::Dense {
                inputs: HIDDEN,
                outputs: CLASSES,
                activation: Activation::Softmax,
            },
        ]
    }
}

/// Weights and biases of the two dense layers, in wire order.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

impl ModelParams {
    pub const SHAPES: [&'static [usize]; 4] =
        [&[INPUT, HIDDEN], &[HIDDEN], &[HIDDEN, CLASSES], &[CLASSES]];

    pub fn zeros() -> Self {
        Self {
            w1: Tensor::zeros(Self::SHAPES[0]),
            b1: Tensor::zeros(Self::SHAPES[1]),
            w2: Tensor::zeros(Self::SHAPES[2]),
            b2: Tensor::zeros(Self::SHAPES[3]),
        }
    }

    /// Builds params from four tensors, checking each against the fixed shapes.
    pub fn from_tensors(tensors: [Tensor; 4]) -> Result<Self, ContractViolation> {
        for (i, (t, shape)) in tensors.iter().zip(Self::SHAPES).enumerate() {
            ensure!(
                t.dims() == shape,
                "tensor {} has dims {:?}, expected {:?}",
                i,
                t.dims(),
                shape
            );
        }
        let [w1, b1, w2, b2] = tensors;
        Ok(Self { w1, b1, w2, b2 })
    }

    pub fn tensors(&self) -> [&Tensor; 4] {
        [&self.w1, &self.b1, &self.w2, &self.b2]
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor; 4] {
        [&mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2]
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    /// All parameters concatenated in wire order.
    pub fn flatten(&self) -> Vec<f32> {
        let mut out = Vec::with_capacity(self.param_count());
        for t in self.tensors() {
            out.extend_from_slice(t.data());
        }
        out
    }

    pub fn all_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.all_finite())
    }

    /// Bitwise equality, distinguishing `0.0` from `-0.0` and comparing NaN payloads.
    pub fn bit_eq(&self, other: &Self) -> bool {
        self.tensors().iter().zip(other.tensors()).all(|(a, b)| {
            a.dims() == b.dims()
                && a.data()
                    .iter()
                    .zip(b.data())
                    .all(|(x, y)| x.to_bits() == y.to_bits())
        })
    }
}

/// Uniform fan-based initialization (`limit = sqrt(6 / (fan_in + fan_out))`)
/// for both weight matrices; biases start at zero.
pub fn init_model(seed: u64) -> ModelParams {
    let mut rng = seeded(seed);
    let mut params = ModelParams::zeros();
    for (w, fan_in, fan_out) in [
        (&mut params.w1, INPUT, HIDDEN),
        (&mut params.w2, HIDDEN, CLASSES),
    ] {
        let limit = libm::sqrtf(6.0 / (fan_in + fan_out) as f32);
        for v in w.data_mut() {
            *v = rng.random_range(-limit..=limit);
        }
    }
    params
}
