//! Uncertainty-guided diffusion super-resolution at desk scale.
//!
//! A small network predicts a per-pixel generalized Gaussian over the HR
//! image; its variance becomes a mask that is refined into a positive
//! factor `B` and used to modulate the noise of a residual diffusion model.

pub mod config;
pub mod data;
pub mod diffusion;
pub mod error;
pub mod gg;
pub mod grid;
pub mod io;
pub mod metrics;
pub mod nn;
pub mod pipeline;
pub mod refine;
pub mod selfcheck;
pub mod uncertainty;

pub use error::{BuffError, Result};
pub use grid::ImageGrid;
