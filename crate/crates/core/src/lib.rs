//! Sparse-view CT reconstruction toolkit.
//!
//! The reconstruction chain is: guided DDIM generation of the full sinogram
//! from the kept views, a least-squares intensity alignment against the
//! measurements, Langevin refinement of the stationary-wavelet bands under
//! data consistency, and fan-beam filtered backprojection.

pub mod corrector;
pub mod denoiser;
pub mod diffusion;
pub mod error;
pub mod evalkit;
pub mod fbp;
pub mod geometry;
pub mod pipeline;
pub mod projector;
pub mod registry;
pub mod rng;
pub mod wavelet;

pub use error::{Error, Result};
