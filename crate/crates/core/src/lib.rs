//! Multimodal-depth 3D human pose lifting.
//!
//! The pipeline lifts 2D joints to 3D using two extra depth channels: an
//! explicit per-joint depth (the coarse pose) and an implicit ordinal one
//! (forward/backward/parallel bone labels, "FBI"). A two-headed generator
//! predicts both from 2D evidence, an adversarial discriminator fine-tunes
//! the coarse head, and a residual regressor trained with a hard-sample
//! weighted loss produces the final pose.

pub mod adversarial;
pub mod error;
pub mod fbi;
pub mod generator;
pub mod io;
pub mod loss;
pub mod net;
pub mod refiner;
pub mod skeleton;
pub mod standardize;
pub mod synth;
pub mod train;

pub use error::{Error, Result};
