//! Multi-precision LLM serving on shared GPUs: precision-aware KV sizing,
//! a slab allocator for mixed block sizes, greedy model placement, SLO-aware
//! batching and a discrete-event simulator tying them together.

pub mod batching;
pub mod config;
pub mod error;
pub mod oracle;
pub mod placement;
pub mod precision;
pub mod scenarios;
pub mod selftest;
pub mod sim;
pub mod slab;
pub mod workload;

#[cfg(test)]
mod properties;
#[cfg(test)]
mod sim_checks;

pub use batching::{
    moore_hodgson, predict_ttft, predict_ttft_tokens, schedule_batch, schedule_fcfs, BatchDecision,
    BatchLimits, CostModel, LocalScheduler, Request,
};
pub use config::ScenarioConfig;
pub use error::{ConfigError, PlacementError, ProfileError, SimError, SlabError};
pub use placement::{exact_score, place_models, proxy_score, GpuGroup, PlacementPlan, Resident};
pub use precision::{
    BatchingConfig, Footprint, MmeEstimate, MmeEstimator, ModelProfile, OperatingPoint, PrecisionSpec,
    ReplicaPlan,
};
pub use sim::{
    measure_mme, mme_slope, run_simulation, BlockSizing, MemoryMode, MetricsReport, Policy, SimOptions,
    SlabSizing,
};
pub use slab::{BlockHandle, FragmentationStats, SlabPoolConfig, SlabState, SlabTable};
pub use workload::{generate_workload, LengthDist, TraceRecord, WorkloadSpec};
