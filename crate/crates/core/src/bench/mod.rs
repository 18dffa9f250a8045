//! Deterministic benchmark harness: seeded workloads run against a store
//! configured by a compliance profile.

pub mod profile;
pub mod report;
pub mod runner;
pub mod workload;

pub use profile::{Compaction, ComplianceProfile, BUILTIN_PROFILES};
pub use report::{read_results, render_table, write_result};
pub use runner::{execute, load_phase, run_benchmark, BenchOptions, LatencyHistogram, RunMetrics, RunOutcome};
pub use workload::{builtin_workload, generate, OpClass, TimedOp, WorkloadConfig, WorkloadSpec, BUILTIN_WORKLOADS};
