//! The recurrent blind super-resolution network.

mod checkpoint;
mod config;
mod network;
mod params;

pub use checkpoint::{Checkpoint, OptimizerState};
pub use config::DssrConfig;
pub use network::{BoundParams, Dssr, Forward, SmuParts, StepOutput};
pub(crate) use params::ParamSpec;
pub use params::{init_params, DssrParams, LRELU_SLOPE};
