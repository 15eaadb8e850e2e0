//! Data-driven control of a simulated flexible tower with Koopman lifted
//! linear predictors.
//!
//! The pipeline: simulate the nonlinear link-chain plant ([`plant`]), lift
//! input/output history with delay embeddings ([`lifting`]), identify
//! `z+ = A z + B u, y = C z` by least squares ([`edmd`]), then close the loop
//! with an LQR ([`lqr`]) or a dense delta-input MPC ([`kmpc`]) solved by an
//! ADMM QP solver ([`qp`]). [`harness`] reproduces the experiment scenarios.

pub mod edmd;
pub mod error;
pub mod format;
pub mod harness;
pub mod kmpc;
pub mod lifting;
pub mod linalg;
pub mod lqr;
pub mod plant;
pub mod qp;

pub use edmd::{LiftedPredictor, SnapshotDataset, Trajectory};
pub use error::{Error, Result};
pub use harness::{ExperimentResult, RunConfig};
pub use kmpc::{CondensedQp, KmpcConfig, KmpcController, TrackingReference};
pub use lifting::{HistoryBuffer, LiftingSpec};
pub use lqr::LqrDesign;
pub use plant::{Measurement, PlantParams, TowerState};
pub use qp::{QpProblem, QpSettings, QpSolution, QpStatus};
