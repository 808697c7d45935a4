//! Config-driven experiment runs.

pub mod config;
pub mod run;
pub mod sweep;
pub mod trace;
pub mod verify;

pub use config::{ExperimentConfig, Metric, ObjectiveSpec, OptimizerConfig};
pub use run::{run, run_seed};
pub use sweep::{coarse_fine_sweep, robustness_curve, transfer_step_size, SweepResult};
pub use trace::{Trace, TraceRecord, TraceSummary};
pub use verify::{verify_bounds, verify_moments, BoundsConfig, MomentsConfig};
