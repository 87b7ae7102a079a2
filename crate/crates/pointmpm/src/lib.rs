//! Self-supervised point-cloud transformer pretraining, end to end and
//! CPU-only: a procedural shape corpus, a discrete patch tokenizer trained as
//! a small VAE, masked-token pretraining with momentum contrast, and
//! classification / part-segmentation / few-shot heads. Built on an in-crate
//! f64 autodiff engine so every gradient is finite-difference checkable.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod downstream;
pub mod dvae;
pub mod error;
pub mod geometry;
pub mod gradcheck;
pub mod nn;
pub mod optim;
pub mod pretrain;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
