//! Diverse skeleton-motion prediction at desk scale.
//!
//! The pipeline: a CVAE over DCT-encoded pose sequences is pretrained as the
//! generator; a second stage learns an auxiliary space whose basis vectors,
//! mixed by Gumbel-Softmax coefficient rows, are mapped to a bank of latent
//! Gaussians. Sampling from the bank through the frozen CVAE decoder yields
//! many diverse futures for one observed sequence. Baselines (plain random
//! CVAE sampling, a direct Gaussian-bank head), the diversity/accuracy
//! metric suite, and a synthetic multimodal motion dataset round out the
//! workspace.

pub mod checkpoint;
pub mod config;
pub mod cvae;
pub mod commands;
pub mod dct;
pub mod error;
pub mod gradcheck;
pub mod metrics;
pub mod nn;
pub mod objectives;
pub mod optim;
pub mod params;
pub mod rng;
pub mod sampler;
pub mod synth;
pub mod tape;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
