//! File formats, IO and the command line of the physics-informed dynamical
//! VAE. The numerics live in [`pidvae_core`], re-exported as [`core`].

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod episode;
pub mod error;
pub mod metrics;

pub use error::{Error, Result};
pub use pidvae_core as core;
