//! Federated optimization with Peaceman-Rachford splitting and inexact local training.
//!
//! The crate covers the problem model (`problem`, `io`), the proximal
//! building blocks (`splitting`), local solvers (`solvers`), the round engine
//! (`engine`), contraction certificates (`rates`), privacy accounting
//! (`privacy`) and the experiment harness (`harness`).

// `!(x > 0.0)` also rejects NaN
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod engine;
pub mod harness;
pub mod io;
pub mod privacy;
pub mod problem;
pub mod rates;
pub mod rng;
pub mod solvers;
pub mod splitting;
pub mod vector;

pub use error::{FedError, Result};
pub use engine::{run, AgentState, CoordinatorState, InitMode, MetricKind, ParticipationModel, RoundRecord, RunConfig};
pub use harness::CostModel;
pub use problem::{ConvexityBounds, DataPoint, LocalCost, LocalDataset, NonsmoothSpec, ProblemInstance, RegularizerSpec};
pub use rates::ContractionReport;
pub use solvers::{LocalSolveConfig, SolverKind, StepRule};
pub use vector::ModelVector;
