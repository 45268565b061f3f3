//! Minimal dense/conv/recurrent layers with hand-written backward passes.
//!
//! Every model keeps its parameters in one flat `f64` buffer described by a
//! list of named [`Segment`]s. Layers only store offsets into that buffer, so
//! gradients, weight decay, per-sample clipping and checkpointing all operate
//! on plain slices.

mod conv;
mod gru;
mod linear;
mod loss;

pub use conv::{Conv2d, ConvEncoder, EncoderCache};
pub use gru::{GruCache, GruCell};
pub use linear::Linear;
pub use loss::{log_sigmoid, sigmoid, softmax_cross_entropy};

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::seed::Rng;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl Segment {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Flat parameter storage plus its layout.
#[derive(Debug, Clone, PartialEq)]
pub struct Params {
    pub values: Vec<f64>,
    pub segments: Vec<Segment>,
}

impl Params {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// Rounds every value to the nearest `f32`, so that a float32 checkpoint
    /// reproduces the in-memory model exactly.
    pub fn snap_to_f32(&mut self) {
        for v in &mut self.values {
            *v = f64::from(*v as f32);
        }
    }

    pub fn zeros_like(&self) -> Vec<f64> {
        vec![0.0; self.values.len()]
    }
}

#[derive(Debug, Clone, Copy)]
pub enum Init {
    Zeros,
    /// Uniform in `[-bound, bound]`.
    Uniform(f64),
}

impl Init {
    /// He-uniform bound for a ReLU layer with the given fan-in.
    pub fn he(fan_in: usize) -> Self {
        Init::Uniform((6.0 / fan_in as f64).sqrt())
    }

    /// Glorot-style bound for saturating or linear layers.
    pub fn lecun(fan_in: usize) -> Self {
        Init::Uniform((3.0 / fan_in as f64).sqrt())
    }
}

pub struct ParamsBuilder<'r> {
    params: Params,
    rng: &'r mut Rng,
}

impl<'r> ParamsBuilder<'r> {
    pub fn new(rng: &'r mut Rng) -> Self {
        ParamsBuilder {
            params: Params {
                values: Vec::new(),
                segments: Vec::new(),
            },
            rng,
        }
    }

    /// Appends a segment and returns its offset.
    pub fn alloc(&mut self, name: &str, shape: &[usize], init: Init) -> usize {
        let offset = self.params.values.len();
        let len: usize = shape.iter().product();
        match init {
            Init::Zeros => self.params.values.extend(std::iter::repeat_n(0.0, len)),
            Init::Uniform(bound) => {
                for _ in 0..len {
                    let v = self.rng.random_range(-bound..=bound);
                    self.params.values.push(v);
                }
            }
        }
        self.params.segments.push(Segment {
            name: name.to_owned(),
            shape: shape.to_vec(),
            offset,
        });
        offset
    }

    pub fn finish(self) -> Params {
        self.params
    }
}

pub fn relu_inplace(x: &mut [f64]) {
    for v in x {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
}

/// Zeroes `grad` wherever the post-activation value was clamped.
pub fn relu_backward(activated: &[f64], grad: &mut [f64]) {
    for (g, &a) in grad.iter_mut().zip(activated) {
        if a <= 0.0 {
            *g = 0.0;
        }
    }
}
