//! Reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Tape`] records ops in topological order; [`Tape::backward`] produces
//! gradients for every `requires_grad` leaf. Values are stored and
//! accumulated in `f64` throughout. One tape has one owner; data
//! parallelism runs one tape per batch element and reduces gradients in a
//! fixed order outside.

mod checkpoint;
mod optim;
mod tape;
mod tensor;

pub use checkpoint::{
    load_checkpoint, load_checkpoint_with_meta, save_checkpoint, save_checkpoint_with_meta,
    NamedParams,
};
pub use optim::{AdamConfig, AdamState};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

use rand::Rng;

/// Deterministic parameter initialization: uniform in `+-1/sqrt(fan_in)`.
pub fn init_uniform<R: Rng>(shape: Vec<usize>, fan_in: usize, rng: &mut R) -> Tensor {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    let numel: usize = shape.iter().product();
    let data = (0..numel).map(|_| rng.gen_range(-bound..bound)).collect();
    Tensor::new(shape, data).expect("sized from shape")
}
