//! Minimal reverse-mode automatic differentiation over dense f64 tensors.
//!
//! The tape is rebuilt for every forward pass (one episode, one attack step).
//! That keeps lifetimes trivial and makes gradient state impossible to leak
//! between steps.

mod ops;
mod tape;
mod tensor;

pub use tape::{BackwardArgs, Gradients, Tape, Var};
pub use tensor::Tensor;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Kernel-plus-bias parameters of one convolution layer.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvLayer {
    pub kernel: Tensor,
    pub bias: Tensor,
}

impl ConvLayer {
    /// He-normal kernel init (std = sqrt(2 / fan_in)), zero bias.
    pub fn he_init(out_ch: usize, in_ch: usize, k: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let fan_in = (in_ch * k * k) as f64;
        ConvLayer {
            kernel: Tensor::randn(&[out_ch, in_ch, k, k], (2.0 / fan_in).sqrt(), &mut rng),
            bias: Tensor::zeros(&[out_ch]),
        }
    }

    /// All-zero layer; a conv stack ending in one of these computes zero.
    pub fn zeros(out_ch: usize, in_ch: usize, k: usize) -> Self {
        ConvLayer {
            kernel: Tensor::zeros(&[out_ch, in_ch, k, k]),
            bias: Tensor::zeros(&[out_ch]),
        }
    }

    /// Registers kernel and bias as leaves, returning their vars.
    pub fn attach(&self, tape: &mut Tape) -> (Var, Var) {
        (tape.leaf(self.kernel.clone()), tape.leaf(self.bias.clone()))
    }
}
