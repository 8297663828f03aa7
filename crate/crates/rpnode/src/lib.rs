//! Few-shot medical-style image segmentation with prototype matching on top of a
//! neural-ODE feature block, trained episodically with Gaussian-perturbation
//! regularization, plus an adversarial attack/defense evaluation harness.
//!
//! The crate is organized bottom-up:
//!
//! * [`autodiff`] - reverse-mode tape over dense f64 tensors (all gradients,
//!   including the input gradients the attacks need, come from here)
//! * [`ode`] - fixed-step RK4 and adaptive Dormand-Prince integration of a
//!   learnable dynamics field, differentiated by backprop through the solver
//! * [`encoder`] - small strided CNN encoder
//! * [`protoseg`] - masked average pooling, prototypes, cosine-softmax prediction
//! * [`perturb`] - Gaussian companion images for the regularization losses
//! * [`losses`] - cross-entropy, cluster and consistency losses
//! * [`episodes`] - synthetic dataset generation, on-disk format, episode sampling
//! * [`model`] - model variants and the shared episode forward graph
//! * [`attacks`] - FGSM / BIM / PGD on query or support images
//! * [`train`] - episodic training, SAT baseline, evaluation, experiment driver

pub mod autodiff;
pub mod error;
pub mod gradcheck;
pub mod rng;

pub mod ode;

pub mod encoder;

pub mod perturb;
pub mod protoseg;

pub mod losses;

pub mod episodes;

pub mod attacks;
pub mod model;

pub mod checkpoint;
pub mod config;
pub mod metrics;
pub mod train;

pub use error::{Error, Result};
