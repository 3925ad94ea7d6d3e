//! Context-aware dynamic FFN pruning for a toy GQA transformer.
//!
//! Modules, bottom-up:
//!
//! - [`linalg`]: f32 kernels with f64 accumulation and optional FLOP tally.
//! - [`model`]: GQA + gated-FFN forward pass with KV cache and per-token traces.
//! - [`pruner`]: windowed neuron importance and top-k masks.
//! - [`allocator`]: layer sensitivity, depth weighting, and clamped budget
//!   redistribution into per-layer pruning ratios.
//! - [`tracer`]: attention-centroid drift detector that requests re-pruning.
//! - [`costmodel`]: analytic FLOP and memory-traffic accounting.
//! - [`harness`]: generation, layer sweeps, detector benchmarks, traces, plots.

pub mod allocator;
pub mod costmodel;
pub mod exec;
pub mod harness;
pub mod linalg;
pub mod model;
pub mod pruner;
pub mod tracer;

pub use exec::Exec;
