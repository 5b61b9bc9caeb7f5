//! Decentralized flocking controllers built from graph filters and graph
//! neural networks, trained by imitating a centralized expert.
//!
//! * [`gsp`]: graph signals, shift operators, static and unit-delay filters.
//! * [`arch`]: GF, GCNN and GRNN architectures and their parameters.
//! * [`train`]: imitation loss, gradients and ADAM training.
//! * [`sim`]: the flocking simulator, expert controller and cost.
//! * [`harness`]: datasets, sweeps, transfer studies and reports.

pub mod arch;
pub mod config;
pub mod error;
pub mod gsp;
pub mod harness;
pub mod invariants;
pub mod io;
pub mod sim;
pub mod train;

pub use arch::{init_params, param_count, Activation, ArchHyper, ArchKind, GnnPolicy, ModelParams};
pub use error::{Error, Result};
pub use gsp::{FilterTaps, GraphHistory, GraphSignal, Permutation, ShiftOperator};
pub use sim::{rollout, FlockingConfig, Policy, SwarmState, Trajectory};
pub use train::{train_imitation, Dataset, TrainConfig, TrainOutcome};
