//! Training an OCR preprocessor through a differentiable approximator of a
//! black-box engine, with per-minibatch query budgets, CER-driven sample
//! selection and mean-CER document pruning.

pub mod engines;
pub mod error;
pub mod imaging;
pub mod metrics;
pub mod neural;
pub mod pruning;
pub mod selection;
pub mod synthdoc;
pub mod trainer;

pub use error::{Error, Result};
