//! Kalman filtering attention: closed-form MAP fusion kernels, a
//! session-restricted encoder/decoder behavior model built on them, and a
//! synthetic click-through harness for comparing attention kernels.

pub mod attention;
pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod datagen;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod model;
pub mod numerics;
pub mod oracle;

pub use error::{Error, Result};
pub use numerics::{Rng, Tensor};
