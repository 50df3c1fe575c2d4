//! Salient object detection for overhead imagery with a dense attention fluid.
//!
//! The crate is organized around a small reverse-mode autodiff tape
//! ([`tape`], [`nn`]) on top of which the network is assembled:
//!
//! * [`gca`] — global context-aware attention unit (global feature
//!   aggregation, channel recalibration, cascaded pyramid attention)
//! * [`encoder`] — five-stage backbone plus the attention fluid wiring
//! * [`decoder`] — progressive top-down decoding with mask/edge heads
//! * [`loss`] — class-balanced BCE, edge label generation, hierarchical
//!   loss and the hard-example batch filter
//! * [`data`] — dataset scanning, flip/rotation augmentation, sample prep
//! * [`metrics`] — P-R curve, F-measure, MAE and S-measure
//! * [`train`] — optimizer, schedule, checkpointing and the train /
//!   predict / evaluate entry points used by the CLI
//!
//! Everything is generic over [`scalar::Scalar`] (`f32` or `f64`); training
//! and checkpoints use `f32`, gradient verification uses `f64`.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod gca;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod params;
pub mod rng;
pub mod scalar;
pub mod synth;
pub mod tape;
pub mod train;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tape::{Tape, Var};
