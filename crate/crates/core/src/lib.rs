//! Eddy-current distortion and head-motion correction for diffusion MRI.

pub mod cli;
pub mod dataset;
pub mod error;
pub mod evaluation;
pub mod gradcheck;
pub mod io;
pub mod pipeline;
pub mod registration;
pub mod simulator;
pub mod transform;
pub mod translator;
pub mod volume;

pub use error::{Error, Result};
