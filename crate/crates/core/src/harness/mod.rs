//! Experiment orchestration: end-to-end generation with drift-triggered
//! re-pruning, single-layer ablation sweeps, detector benchmarks on
//! synthetic vector streams, JSONL traces and static SVG plots.

mod config;
mod detect;
mod generate;
mod plot;
mod sweep;
mod trace;
mod workload;

use thiserror::Error;

use crate::allocator::AllocError;
use crate::model::ModelError;
use crate::pruner::PrunerError;
use crate::tracer::TracerError;

pub use config::{
    DetectParams, ModelSource, ModelSpec, OutputPaths, RunConfig, SweepParams, SEED_ENV,
};
pub use detect::{
    metrics_from_trajectory, run_detector_bench, DetectorReport, DetectorRun, Phase, WindowPoint,
};
pub use generate::{collect_oracle_masks, load_model, mask_overlap, run_generate, GenerateOutput};
pub use plot::{heatmap_svg, plot_file, plot_text, PlotKind};
pub use sweep::{kl_divergence, run_layer_sweep, SweepReport, SweepRow};
pub use trace::{
    parse_trace, RebuildReason, RebuildRecord, Summary, TokenRecord, TraceHeader, TraceLine,
};
pub use workload::{Workload, WorkloadConfig};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum HarnessError {
    #[error("config error: {0}")]
    Config(String),
    #[error("infeasible budget: {0}")]
    Infeasible(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tracer(#[from] TracerError),
    #[error(transparent)]
    Pruner(#[from] PrunerError),
    #[error("allocator: {0}")]
    Alloc(AllocError),
    #[error("line {line}: {msg}")]
    Trace { line: usize, msg: String },
    #[error("io: {0}")]
    Io(String),
}

impl From<AllocError> for HarnessError {
    fn from(e: AllocError) -> Self {
        match e {
            AllocError::Infeasible { .. } => HarnessError::Infeasible(e.to_string()),
            AllocError::InvalidParams(s) => HarnessError::Config(s),
            other => HarnessError::Alloc(other),
        }
    }
}

impl From<std::io::Error> for HarnessError {
    fn from(e: std::io::Error) -> Self {
        HarnessError::Io(e.to_string())
    }
}

impl HarnessError {
    /// Process exit code: 2 for configuration errors, 3 for an infeasible
    /// budget, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Config(_) => 2,
            HarnessError::Infeasible(_) => 3,
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, HarnessError>;

/// Independent sub-stream seed (SplitMix64 finalizer over seed and tag).
pub fn derive_seed(seed: u64, tag: u64) -> u64 {
    let mut z = seed ^ tag.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub(crate) mod streams {
    pub const MODEL: u64 = 1;
    pub const SAMPLING: u64 = 2;
    pub const WORKLOAD_BASIS: u64 = 3;
    pub const WORKLOAD_NOISE: u64 = 4;
    pub const DETECT: u64 = 5;
}
