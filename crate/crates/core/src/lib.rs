//! Patch-level mixture of experts with two-layer CNN experts.
//!
//! The crate is organised bottom-up: [`data`] builds and stores datasets,
//! [`model`] evaluates networks, [`training`] runs SGD, [`diagnostics`]
//! inspects trained models and [`experiments`] drives sweeps, flop accounting
//! and plots.

pub mod data;
pub mod diagnostics;
pub mod error;
pub mod experiments;
pub mod linalg;
pub mod model;
pub mod rng;
pub mod training;
pub mod util;

pub use data::{Dataset, Provenance, Sample};
pub use error::{Error, Result};
pub use model::{Arch, Mode, ModelParams, RoutingDecision};
pub use rng::Rng;
pub use training::{RunReport, TrainConfig};
