//! Unsupervised mixed-noise removal for hyperspectral cubes.
//!
//! A separable-3D-convolution encoder-decoder is fitted to a single noisy
//! cube from a fixed random input, under a data-fidelity MSE plus a hybrid
//! spatial / spatial-spectral total-variation penalty, and stopped
//! automatically once consecutive outputs stop changing.

pub mod adam;
pub mod autodiff;
pub mod cli;
pub mod conv;
pub mod config;
pub mod cube;
pub mod error;
pub mod io;
pub mod loss;
pub mod net;
pub mod noise;
pub mod pipeline;
pub mod quality;
pub mod tensor;

pub use cube::Cube;
pub use error::{Error, Result};
pub use tensor::{Rng, Tensor};
