//! Dual-sampling attention network for classifying 3D chest CT volumes as
//! COVID-19 or community-acquired pneumonia (CAP).
//!
//! The crate covers preprocessing, a 3D ResNet with an online attention head,
//! uniform and size-balanced samplers, the two training objectives, and the
//! fusion and group-wise evaluation of the two trained models. A synthetic
//! phantom generator makes every stage runnable without clinical data.

pub mod autograd;
pub mod checkpoint;
pub mod data_model;
pub mod error;
pub mod explain;
pub mod harness;
pub mod interp;
pub mod metrics;
pub mod net;
pub mod objectives;
pub mod optim;
pub mod registry;
pub mod samplers;
pub mod synth;
pub mod volume;
pub mod volume_prep;

pub use error::{Error, Result};
