//! Latent kinematics-aware SDE model for vehicle trajectory prediction and generation.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod generation;
pub mod gradcheck;
pub mod graph;
pub mod kinematics;
pub mod metrics;
pub mod networks;
pub mod nn;
pub mod params;
pub mod scenario;
pub mod sde;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use graph::{Graph, Var};
pub use kinematics::{BicycleParams, ControlInput, LatentState};
pub use networks::{LkSdeModel, ModelConfig};
pub use params::{Checkpoint, ParamStore};
pub use scenario::{Scenario, ScenarioFamily};
pub use tensor::Tensor;
pub use training::{LossReport, TrainConfig};
