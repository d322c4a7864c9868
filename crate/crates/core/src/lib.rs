//! Physics-informed dynamical VAE: a differentiable Gaussian filter over
//! discretized SDEs, paired with a neural encoder/decoder and trained by
//! maximizing a variational lower bound.
//!
//! The crate is `no_std` (with `alloc`); file formats and the command line
//! live in the `pidvae` crate.

#![no_std]

extern crate alloc;
#[cfg(any(test, feature = "std"))]
extern crate std;

pub mod error;
pub mod experiment;
pub mod codec;
pub mod datagen;
pub mod dynamics;
pub mod elbo;
pub mod fem;
pub mod filter;
pub mod linalg;
pub mod optim;
pub mod train;

pub use error::{Error, Result};
pub use linalg::{gradient, Matrix, ParamSet, Tape, Var};
