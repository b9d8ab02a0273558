//! Feeder-head-only Volt-VAr control for unbalanced distribution feeders.
//!
//! The pipeline: per-phase power flow ([`powerflow`]) over a radial feeder
//! ([`feeder`]) driven by synthetic load/PV scenarios ([`scenario`]); a neural
//! state estimator ([`dsse`]) that maps the 12 feeder-head phasor components
//! to every node-phase voltage; and a DDPG agent ([`ddpg`]) that sets smart
//! inverter reactive power through the control environment ([`env`](mod@env)).
//! [`runtime`] holds online execution, evaluation and the command pipeline.

#![allow(clippy::needless_range_loop, clippy::neg_cmp_op_on_partial_ord)]

pub mod ddpg;
pub mod dsse;
pub mod env;
pub mod error;
pub mod feeder;
pub mod nn;
pub mod powerflow;
pub mod runtime;
pub mod scenario;

pub use error::{Error, Result};
