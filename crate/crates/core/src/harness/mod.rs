//! Experiment orchestration: configuration, excitation and reference
//! signals, closed-loop simulation, metrics and the collect/identify/run
//! pipeline.

pub mod closed_loop;
pub mod config;
pub mod metrics;
pub mod pipeline;
pub mod signals;

pub use closed_loop::{run_loop, Controller, KmpcLoop, LoopSetup, LoopTrace, LqrLoop, MeasurementNoise, Passive};
pub use config::{ControllerKind, RunConfig, ScenarioKind};
pub use metrics::{compute_metrics, settling_time, MetricWindows, Metrics};
pub use pipeline::{collect, identify, run_pipeline, run_scenario, CollectedData, ExperimentResult, ScenarioOutcome};
pub use signals::{Pulse, Signal};
