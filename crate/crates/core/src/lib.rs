//! Probabilistic sequence regression with calibrated aleatoric uncertainty.
//!
//! The crate trains recurrent attention models that map variable-length
//! sequences of utterance embeddings to a predictive distribution over a
//! scalar score, and evaluates how well the predicted uncertainty is
//! calibrated. Everything runs on a small built-in reverse-mode
//! autodiff engine in 64-bit floats.

pub mod autodiff;
pub mod calibration;
pub mod cli;
pub mod data;
pub mod error;
pub mod layers;
pub mod losses;
pub mod model;
pub mod report;
pub mod stats;
pub mod training;

pub use error::{Error, Result};
