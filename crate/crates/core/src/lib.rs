//! Bayes label transition estimation under bounded instance-dependent label
//! noise, on synthetic Gaussian mixtures with exact oracles.
//!
//! The pipeline: generate clean data, inject noise, warm up a noisy-posterior
//! estimator, collect distilled examples, fit the instance-dependent
//! transition network, train a forward-corrected classifier and evaluate it
//! against the Bayes labels.

pub mod classifier;
pub mod data;
pub mod distill;
pub mod error;
pub mod io;
pub mod matrix;
pub mod metrics;
pub mod nn;
pub mod pipeline;
pub mod rng;
pub mod transition;

pub use error::{Error, Result};
pub use matrix::Matrix;
pub use nn::NetworkParams;
pub use pipeline::ExperimentConfig;
pub use transition::TransitionMatrix;
