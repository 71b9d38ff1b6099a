//! Numerical core for contrastive EEG-to-speech decoding.
//!
//! Everything in this crate is pure computation over owned buffers and
//! needs only `alloc`. File formats and the command-line front end live in
//! the `neurodecode` crate.
#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod autodiff;
pub mod data;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod linalg;
pub mod model;
pub mod optim;
pub mod preprocess;
pub mod rng;
pub mod synthetic;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::Tensor;
