//! Numerical core for comparing CNN layer representations against brain
//! responses.
//!
//! Everything in this crate works on in-memory [`Tensor`]s and needs only
//! `alloc`: layer forward/backward passes, the ResNet-20/18 builders, the
//! SGD training loop, synthetic data generators and the representational
//! similarity analysis (RSA) scoring maths. File formats, image decoding and
//! the command-line front end live in the `rsaforge` crate.
#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

mod error;
#[cfg(any(test, feature = "gradcheck"))]
pub mod gradcheck;
pub mod image;
pub mod model;
pub mod nn;
pub mod optim;
pub mod rng;
pub mod rsa;
pub mod synthetic;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use model::{ArchConfig, Model, TAPS};
pub use tensor::Tensor;
