//! Core algorithms for the AEAE adversarial-example detector.
//!
//! A shallow convolutional autoencoder trained on benign images supplies a
//! reconstruction-error feature; comparing the classifier's predictions on an
//! image and on its reconstruction supplies a prediction-distance feature.
//! An isolation forest fitted on benign `(MSE, PD)` pairs flags outliers as
//! adversarial. The crate also implements the five gradient-based attacks the
//! detector is evaluated against.
//!
//! Everything here is pure computation over `f64` buffers: no files, no
//! clocks, no ambient randomness. All stochastic steps take explicit seeds.
//! The crate is `no_std` (with `alloc`); IO, file formats and the CLI live in
//! the companion `aeae` crate.

#![no_std]
#![forbid(unsafe_code)]

extern crate alloc;

#[cfg(any(test, feature = "std"))]
extern crate std;

#[cfg(feature = "attacks")]
pub mod attacks;
pub mod data;
pub mod detector;
mod error;
pub mod hash;
pub mod iforest;
mod math;
pub mod models;
pub mod rng;
pub mod tensor;

pub use error::CoreError;

/// Result alias used throughout the crate.
pub type Result<T> = core::result::Result<T, CoreError>;
