//! Fluid-model simulator and analytic toolkit for delay-based congestion
//! avoidance (FAST/Vegas-style) on a dumbbell topology.
//!
//! The crate is split along the natural seams of the problem:
//!
//! - [`model`] — domain types, units and scenario validation.
//! - [`protocols`] — pure congestion-controller laws (FAST window update,
//!   flow-level derivative, Reno AIMD, Vegas band) and their closed-form
//!   equilibria.
//! - [`engine`] — deterministic fixed-step integration of the two bottleneck
//!   queues with delayed feedback, RTT sampling, loss and RED marking.
//! - [`remedies`] — per-flow strategies that correct the propagation-delay
//!   and RTT bookkeeping: reverse-path compensation, persistent-congestion
//!   pause and error-estimation, and slow-timescale alpha adaptation.
//! - [`analysis`] — closed-form decay/share curves, fairness metrics and
//!   trace post-processing.
//!
//! All rates are in packets/second, delays in seconds, windows and backlogs
//! in packets. Fractional packets are allowed everywhere: this is a fluid
//! model, which is what makes equation-level validation of the simulated
//! equilibria exact.
//!
//! The crate is `no_std` + `alloc`; everything that touches the filesystem
//! or a terminal lives in the companion `fastsim-cli` crate.

#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod analysis;
pub mod engine;
pub mod model;
pub mod protocols;
pub mod remedies;

pub use engine::{run, EngineError, RunOutput};
pub use model::{validate_scenario, ScenarioSpec, ValidationError};
