//! CrossScaleNet: a multi-scale forecaster whose cross-patch attention maps
//! double as temporal saliency, together with a synthetic benchmark with
//! known ground-truth saliency and a perturbation-based explainability suite.

pub mod attention;
pub mod data;
mod error;
pub mod explain;
pub mod model;
pub mod optim;
pub mod pipeline;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
