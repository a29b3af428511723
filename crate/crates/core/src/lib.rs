//! Cycle-level simulation of IR-drop behaviour in bit-serial SRAM
//! processing-in-memory chips, together with the software and hardware
//! mitigation stack built on top of it:
//!
//! * [`metrics`]: toggle rate (`R_tog`), Hamming rate (HR) and the affine
//!   IR-drop estimate.
//! * [`lhr`]: differentiable HR, the HR regulariser and a toy fine-tuner.
//! * [`wds`]: weight distribution shift and its shift compensator.
//! * [`booster`]: V-f level selection, the per-Group level controller and
//!   failure-driven recomputing.
//! * [`mapping`]: HR-aware task mapping by simulated annealing.
//! * [`engine`]: the lockstep cycle engine producing a [`engine::SimTrace`].
//! * [`report`]: run comparison and plot-data emission.

pub mod booster;
pub mod engine;
pub mod error;
pub mod lhr;
pub mod mapping;
pub mod metrics;
pub mod model;
pub mod report;
pub mod wds;

pub use error::{Error, Result};
