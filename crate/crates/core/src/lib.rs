//! A trace-driven, cycle-level GPGPU timing simulator whose per-SM phase can
//! run on a pool of workers with bit-identical results to sequential
//! execution.
//!
//! The machine model is a pool of SMs (each four sub-cores over a shared L1
//! data cache) talking through a fixed-latency interconnect to memory
//! partitions whose sub-partitions own slices of the L2, each partition with
//! one DRAM channel. Statistics are kept strictly per SM and reduced after
//! each kernel, so the parallel phase shares no mutable state at all.

pub mod bench;
pub mod cache;
pub mod config;
pub mod engine;
pub mod icnt;
pub mod memsys;
pub mod pool;
pub mod smcore;
pub mod stats;
pub mod trace;

pub use config::{CacheGeometry, ConfigError, GpuConfig};
pub use engine::{
    run, run_observed, EngineError, PhaseProfile, PolicyKind, RunOutput, SchedulePolicy,
};
pub use stats::{diff_reports, render_report, DiffOutcome, GpuStats};
pub use trace::gen::{generate_workload, Preset, ALL_PRESETS};
pub use trace::{parse_trace, render_trace, trace_stats, TraceError, TraceProgram};
