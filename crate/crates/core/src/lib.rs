//! Uncertainty estimation from the disagreement of two decoders that share
//! their tail: one reconstructs the input from the penultimate feature map of
//! a classifier, the other from the final one. Also ships the baselines it is
//! compared against (reconstruction error, softmax entropy, MC dropout), an
//! OOD evaluation harness over a synthetic corruption ladder, and numerical
//! Taylor checks of the score.

pub mod backbone;
pub mod checkpoint;
pub mod config;
pub mod datasets;
pub mod decoders;
pub mod error;
pub mod evaluation;
pub mod nn;
pub mod pipeline;
pub mod plots;
pub mod theory;
pub mod training;
pub mod uncertainty;

pub use error::{DrueError, Result};
