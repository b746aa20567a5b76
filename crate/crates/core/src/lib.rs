pub mod baselines;
pub mod combiner;
pub mod error;
pub mod moments;
pub mod rng;
pub mod simgauss;
pub mod simsprint;
pub mod stats;

pub use combiner::{CombinedEstimate, EstimatorDraw, MomentEstimates, Rule, ShapeParams};
pub use error::{Error, Result};
