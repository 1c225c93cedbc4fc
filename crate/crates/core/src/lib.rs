//! Engine for generating quality-improving counterfactual images of a
//! synthetic "standard plane" phantom task with classifier-guided diffusion.
//!
//! The crate is self-contained: it procedurally generates labelled phantom
//! data, trains a small denoising diffusion model plus the guiding and
//! scoring networks on a CPU, runs iterative guided reverse diffusion to turn
//! low-quality inputs into higher-quality counterfactuals, and evaluates the
//! results with validity/realism metric suites.

pub mod error;
pub mod checkpoint;
pub mod config;
pub mod diffusion;
pub mod guidance;
pub mod metrics;
pub mod models;
pub mod nn;
pub mod pipeline;
pub mod rng;
pub mod synth;
pub mod schedule;
pub mod tensor;

pub use error::{Error, Result};
