//! Black-box adversarial benchmark generation.
//!
//! An image is split into square patches. A reinforcement-learning agent
//! repeatedly adds distortion-filter applications to the patches the victim
//! classifier is most sensitive to, and removes applications whose removal
//! helps, until the victim misclassifies. The resulting minimal perturbation
//! is then scaled into several severity levels and written out as a
//! benchmark split.

pub mod agent;
pub mod classifier;
pub mod error;
pub mod filters;
pub mod generator;
pub mod metrics;
pub mod sensitivity;
pub mod tensor;
pub mod toy;

pub use error::{Error, Result};
