//! Dense `f64` tensors with a reverse-mode tape.
//!
//! Values are row-major. Most ops treat operands as matrices: a rank-1 tensor
//! of length `n` is read as an `n × 1` column, a scalar as `1 × 1`.

mod kernels;
mod optim;
mod tape;

pub use optim::{adam_step, AdamConfig, AdamState};
pub use tape::{segment_reduce, Gradients, ReduceMode, Segments, Tape, Var};

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use rand::distr::Uniform;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::math;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::Shape {
                op: "tensor",
                detail: format!("shape {:?} needs {} values, got {}", shape, expected, data.len()),
            });
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let len = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; len],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    /// Builds a `rows × cols` matrix.
    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(&[rows, cols], data)
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Matrix view of the shape: `(rows, cols)`.
    pub fn dims2(&self) -> (usize, usize) {
        dims2(&self.shape)
    }

    pub fn rows(&self) -> usize {
        self.dims2().0
    }

    pub fn cols(&self) -> usize {
        self.dims2().1
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.cols() + col]
    }

    pub fn row(&self, row: usize) -> &[f64] {
        let c = self.cols();
        &self.data[row * c..(row + 1) * c]
    }

    /// Returns the scalar value of a one-element tensor.
    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

pub(crate) fn dims2(shape: &[usize]) -> (usize, usize) {
    match shape.len() {
        0 => (1, 1),
        1 => (shape[0], 1),
        2 => (shape[0], shape[1]),
        _ => {
            let cols = *shape.last().unwrap();
            (shape[..shape.len() - 1].iter().product(), cols)
        }
    }
}

/// Elementwise nonlinearities, in the canonical search-space order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Activation {
    Sigmoid,
    Tanh,
    Relu,
    Linear,
    Softplus,
    LeakyRelu,
    Relu6,
    Elu,
}

pub const LEAKY_SLOPE: f64 = 0.2;

impl Activation {
    pub const ALL: [Activation; 8] = [
        Activation::Sigmoid,
        Activation::Tanh,
        Activation::Relu,
        Activation::Linear,
        Activation::Softplus,
        Activation::LeakyRelu,
        Activation::Relu6,
        Activation::Elu,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Activation::Sigmoid => "sigmoid",
            Activation::Tanh => "tanh",
            Activation::Relu => "relu",
            Activation::Linear => "linear",
            Activation::Softplus => "softplus",
            Activation::LeakyRelu => "leaky_relu",
            Activation::Relu6 => "relu6",
            Activation::Elu => "elu",
        }
    }

    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Sigmoid => math::sigmoid(x),
            Activation::Tanh => math::tanh(x),
            Activation::Relu => x.max(0.0),
            Activation::Linear => x,
            Activation::Softplus => math::softplus(x),
            Activation::LeakyRelu => {
                if x > 0.0 {
                    x
                } else {
                    LEAKY_SLOPE * x
                }
            }
            Activation::Relu6 => x.clamp(0.0, 6.0),
            Activation::Elu => {
                if x > 0.0 {
                    x
                } else {
                    math::expm1(x)
                }
            }
        }
    }

    /// Derivative at `x`, given the forward output `y`.
    #[inline]
    pub fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Activation::Sigmoid => y * (1.0 - y),
            Activation::Tanh => 1.0 - y * y,
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Linear => 1.0,
            Activation::Softplus => math::sigmoid(x),
            Activation::LeakyRelu => {
                if x > 0.0 {
                    1.0
                } else {
                    LEAKY_SLOPE
                }
            }
            Activation::Relu6 => {
                if x > 0.0 && x < 6.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Elu => {
                if x > 0.0 {
                    1.0
                } else {
                    y + 1.0
                }
            }
        }
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let lower = s.to_ascii_lowercase();
        Activation::ALL
            .iter()
            .copied()
            .find(|a| a.name() == lower || (lower == "leakyrelu" && *a == Activation::LeakyRelu))
            .ok_or_else(|| Error::InvalidArgument(format!("unknown activation `{}`", s)))
    }
}

/// Glorot (Xavier) uniform initialization, deterministic in `seed`.
///
/// Rank-1 shapes are treated as a column (`fan_in = n`, `fan_out = 1`).
pub fn glorot_init(shape: &[usize], seed: u64) -> Result<Tensor> {
    let (fan_in, fan_out) = match shape.len() {
        1 => (shape[0], 1),
        2 => (shape[0], shape[1]),
        r => {
            return Err(Error::InvalidArgument(format!(
                "glorot_init supports rank 1 or 2, got rank {}",
                r
            )))
        }
    };
    let bound = math::sqrt(6.0 / (fan_in + fan_out) as f64);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(uniform_init(shape, bound, &mut rng))
}

/// Uniform values in `[-bound, bound]`.
pub fn uniform_init<R: Rng + ?Sized>(shape: &[usize], bound: f64, rng: &mut R) -> Tensor {
    let len: usize = shape.iter().product();
    let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
    let data = rng.sample_iter(dist).take(len).collect();
    Tensor {
        shape: shape.to_vec(),
        data,
    }
}
