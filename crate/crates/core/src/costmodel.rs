//! Analytic FLOP and memory-traffic accounting for attention and the gated
//! FFN under dense and pruned execution.
//!
//! Conventions:
//! - a multiply-add is 2 FLOPs; SiLU and the gate product are 1 FLOP per
//!   kept hidden unit each; norms, softmax and residual adds are not counted;
//! - weights are read once per measurement at `weight_bytes` per parameter,
//!   activations move at `activation_bytes` per value for every token;
//! - the measurement decodes `tokens` tokens after `context` cached ones;
//! - human-readable tables use binary units (GiB = 2^30 B, TFLOP = 2^40).
//!
//! The FLOP counts match what the model's kernels execute exactly, which the
//! tests check against a dynamic tally of the real forward pass.

use std::fmt::Write as _;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::ModelConfig;
use crate::pruner::kept_count;

pub const GIB: f64 = (1u64 << 30) as f64;
pub const TFLOP: f64 = (1u64 << 40) as f64;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CostError {
    #[error("byte width {0} not in {{1, 2, 4}}")]
    ByteWidth(u8),
    #[error("keep fraction {0} outside (0, 1]")]
    Keep(f64),
    #[error("{got} keep fractions for {layers} layers")]
    PlanLength { layers: usize, got: usize },
    #[error("unknown preset {0:?} (expected llama70b, llama8b or toy)")]
    Preset(String),
    #[error("anchor {0} GiB is below the weight traffic alone")]
    Anchor(f64),
}

/// Dimensions the cost model needs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostDims {
    pub num_layers: usize,
    pub hidden_dim: usize,
    pub ffn_dim: usize,
    pub num_heads: usize,
    pub num_kv_groups: usize,
    pub head_dim: usize,
}

impl CostDims {
    pub fn llama70b() -> Self {
        Self {
            num_layers: 80,
            hidden_dim: 8192,
            ffn_dim: 28672,
            num_heads: 64,
            num_kv_groups: 8,
            head_dim: 128,
        }
    }

    pub fn llama8b() -> Self {
        Self {
            num_layers: 32,
            hidden_dim: 4096,
            ffn_dim: 14336,
            num_heads: 32,
            num_kv_groups: 8,
            head_dim: 128,
        }
    }

    pub fn toy() -> Self {
        Self::from(&ModelConfig::toy())
    }
}

impl From<&ModelConfig> for CostDims {
    fn from(c: &ModelConfig) -> Self {
        Self {
            num_layers: c.num_layers,
            hidden_dim: c.hidden_dim,
            ffn_dim: c.ffn_dim,
            num_heads: c.num_heads,
            num_kv_groups: c.num_kv_groups,
            head_dim: c.head_dim,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    Llama70b,
    Llama8b,
    Toy,
}

impl Preset {
    pub fn dims(self) -> CostDims {
        match self {
            Preset::Llama70b => CostDims::llama70b(),
            Preset::Llama8b => CostDims::llama8b(),
            Preset::Toy => CostDims::toy(),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Preset::Llama70b => "llama70b",
            Preset::Llama8b => "llama8b",
            Preset::Toy => "toy",
        }
    }
}

impl FromStr for Preset {
    type Err = CostError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "llama70b" => Ok(Preset::Llama70b),
            "llama8b" => Ok(Preset::Llama8b),
            "toy" => Ok(Preset::Toy),
            _ => Err(CostError::Preset(s.to_string())),
        }
    }
}

/// Compute and communication precision in bytes per value.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Precision {
    pub weight_bytes: u8,
    pub activation_bytes: u8,
}

impl Default for Precision {
    /// FP8 weights, FP16 activations.
    fn default() -> Self {
        Self {
            weight_bytes: 1,
            activation_bytes: 2,
        }
    }
}

impl Precision {
    pub fn validate(&self) -> Result<(), CostError> {
        for w in [self.weight_bytes, self.activation_bytes] {
            if !matches!(w, 1 | 2 | 4) {
                return Err(CostError::ByteWidth(w));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Cost {
    pub flops: u64,
    pub bytes: u64,
}

impl std::ops::Add for Cost {
    type Output = Cost;

    fn add(self, o: Cost) -> Cost {
        Cost {
            flops: self.flops + o.flops,
            bytes: self.bytes + o.bytes,
        }
    }
}

/// Measurement setup shared by every layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Workload {
    pub tokens: u64,
    pub context: u64,
    pub precision: Precision,
}

/// One layer's gated FFN keeping `kept` of its neurons.
pub fn mlp_cost(dims: &CostDims, kept: usize, w: &Workload) -> Cost {
    let (d, k) = (dims.hidden_dim as u64, kept as u64);
    let per_token_flops = 3 * 2 * d * k + 2 * k;
    let weight_bytes = 3 * d * k * w.precision.weight_bytes as u64;
    let act_per_token = (d + 2 * k + d) * w.precision.activation_bytes as u64;
    Cost {
        flops: w.tokens * per_token_flops,
        bytes: weight_bytes + w.tokens * act_per_token,
    }
}

/// One layer's grouped-query attention. Independent of FFN sparsity.
pub fn attention_cost(dims: &CostDims, w: &Workload) -> Cost {
    let d = dims.hidden_dim as u64;
    let (nh, ng, dh) = (
        dims.num_heads as u64,
        dims.num_kv_groups as u64,
        dims.head_dim as u64,
    );
    let proj_params = nh * d * dh + 2 * ng * d * dh + nh * dh * d;
    // Σ over measured tokens of the keys each one attends to (itself included).
    let t = w.tokens;
    let attended = t * w.context + t * (t + 1) / 2;
    let flops = t * 2 * proj_params + 2 * 2 * nh * dh * attended;
    let ab = w.precision.activation_bytes as u64;
    let act = t * (d + 2 * ng * dh + d) + 2 * ng * dh * attended;
    Cost {
        flops,
        bytes: proj_params * w.precision.weight_bytes as u64 + act * ab,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerCost {
    pub kept: usize,
    pub attention: Cost,
    pub mlp: Cost,
}

/// Costs per layer and summed over the model.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostReport {
    pub attention: Cost,
    pub mlp: Cost,
    pub layers: Vec<LayerCost>,
}

/// Full parameter set for one evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostParams {
    pub dims: CostDims,
    pub workload: Workload,
    /// Keep fraction per layer.
    pub keep: Vec<f64>,
}

impl CostParams {
    pub fn uniform(dims: CostDims, workload: Workload, keep: f64) -> Self {
        Self {
            dims,
            workload,
            keep: vec![keep; dims.num_layers],
        }
    }

    pub fn validate(&self) -> Result<(), CostError> {
        self.workload.precision.validate()?;
        if self.keep.len() != self.dims.num_layers {
            return Err(CostError::PlanLength {
                layers: self.dims.num_layers,
                got: self.keep.len(),
            });
        }
        if let Some(&k) = self.keep.iter().find(|k| !(**k > 0.0 && **k <= 1.0)) {
            return Err(CostError::Keep(k));
        }
        Ok(())
    }
}

pub fn evaluate(params: &CostParams) -> Result<CostReport, CostError> {
    params.validate()?;
    let attn = attention_cost(&params.dims, &params.workload);
    let layers: Vec<LayerCost> = params
        .keep
        .iter()
        .map(|&keep| {
            let kept = kept_count(keep, params.dims.ffn_dim);
            LayerCost {
                kept,
                attention: attn,
                mlp: mlp_cost(&params.dims, kept, &params.workload),
            }
        })
        .collect();
    Ok(CostReport {
        attention: layers.iter().fold(Cost::default(), |a, l| a + l.attention),
        mlp: layers.iter().fold(Cost::default(), |a, l| a + l.mlp),
        layers,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Ratios {
    pub attention_flops: f64,
    pub attention_bytes: f64,
    pub mlp_flops: f64,
    pub mlp_bytes: f64,
    pub total_flops: f64,
    pub total_bytes: f64,
}

/// Dense vs pruned costs for one sparsity plan.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub label: String,
    pub dims: CostDims,
    pub workload: Workload,
    pub mean_sparsity: f64,
    pub dense: CostReport,
    pub sparse: CostReport,
    pub ratios: Ratios,
}

fn ratio(a: u64, b: u64) -> f64 {
    if b == 0 {
        return 1.0;
    }
    a as f64 / b as f64
}

/// Compares dense execution with the plan's per-layer pruning ratios.
pub fn report(
    label: &str,
    dims: CostDims,
    workload: Workload,
    prune_ratios: &[f64],
) -> Result<Comparison, CostError> {
    let dense = evaluate(&CostParams::uniform(dims, workload, 1.0))?;
    let keep: Vec<f64> = prune_ratios.iter().map(|p| 1.0 - p).collect();
    let sparse = evaluate(&CostParams {
        dims,
        workload,
        keep,
    })?;
    let total = |r: &CostReport| r.attention + r.mlp;
    let ratios = Ratios {
        attention_flops: ratio(sparse.attention.flops, dense.attention.flops),
        attention_bytes: ratio(sparse.attention.bytes, dense.attention.bytes),
        mlp_flops: ratio(sparse.mlp.flops, dense.mlp.flops),
        mlp_bytes: ratio(sparse.mlp.bytes, dense.mlp.bytes),
        total_flops: ratio(total(&sparse).flops, total(&dense).flops),
        total_bytes: ratio(total(&sparse).bytes, total(&dense).bytes),
    };
    let mean_sparsity = if prune_ratios.is_empty() {
        0.0
    } else {
        prune_ratios.iter().sum::<f64>() / prune_ratios.len() as f64
    };
    Ok(Comparison {
        label: label.to_string(),
        dims,
        workload,
        mean_sparsity,
        dense,
        sparse,
        ratios,
    })
}

impl Comparison {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("comparison serializes")
    }

    /// Aligned text table: component × metric against dense and sparse.
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let sparse_hdr = format!("Sparse ({:.0}%)", self.mean_sparsity * 100.0);
        let _ = writeln!(
            s,
            "{} ({} tokens, context {})",
            self.label, self.workload.tokens, self.workload.context
        );
        let _ = writeln!(
            s,
            "{:<10} {:<20} {:>12} {:>14} {:>8}",
            "Component", "Metric", "Dense", sparse_hdr, "Ratio"
        );
        let rows = [
            (
                "Attention",
                "Memory Access (GiB)",
                self.dense.attention.bytes as f64 / GIB,
                self.sparse.attention.bytes as f64 / GIB,
                self.ratios.attention_bytes,
            ),
            (
                "",
                "Compute (TFLOP)",
                self.dense.attention.flops as f64 / TFLOP,
                self.sparse.attention.flops as f64 / TFLOP,
                self.ratios.attention_flops,
            ),
            (
                "MLP",
                "Memory Access (GiB)",
                self.dense.mlp.bytes as f64 / GIB,
                self.sparse.mlp.bytes as f64 / GIB,
                self.ratios.mlp_bytes,
            ),
            (
                "",
                "Compute (TFLOP)",
                self.dense.mlp.flops as f64 / TFLOP,
                self.sparse.mlp.flops as f64 / TFLOP,
                self.ratios.mlp_flops,
            ),
        ];
        for (c, m, d, sp, r) in rows {
            let _ = writeln!(s, "{c:<10} {m:<20} {d:>12.4} {sp:>14.4} {r:>8.4}");
        }
        s
    }
}

/// Token count that makes whole-model dense MLP traffic equal `anchor_gib`.
pub fn calibrate_tokens(
    dims: &CostDims,
    precision: Precision,
    anchor_gib: f64,
) -> Result<f64, CostError> {
    let probe = |tokens| {
        let w = Workload {
            tokens,
            context: 0,
            precision,
        };
        mlp_cost(dims, dims.ffn_dim, &w).bytes as f64 * dims.num_layers as f64
    };
    let fixed = probe(0);
    let per_token = probe(1) - fixed;
    let target = anchor_gib * GIB;
    if target < fixed {
        return Err(CostError::Anchor(anchor_gib));
    }
    Ok((target - fixed) / per_token)
}

/// Dense forward FLOPs per decoded token (attention + FFN, all layers) at
/// the given context length.
pub fn forward_flops_per_token(dims: &CostDims, context: u64) -> u64 {
    let w = Workload {
        tokens: 1,
        context,
        precision: Precision::default(),
    };
    dims.num_layers as u64
        * (attention_cost(dims, &w).flops + mlp_cost(dims, dims.ffn_dim, &w).flops)
}

/// Per-token FLOPs of importance tracing, sensitivity scoring, drift tracking,
/// and amortized mask rebuilds (allocation plus top-k selection once per
/// `reference_len` tokens).
pub fn tracing_overhead_flops_per_token(
    dims: &CostDims,
    window: usize,
    reference_len: usize,
) -> f64 {
    let (l, d, m) = (
        dims.num_layers as f64,
        dims.hidden_dim as f64,
        dims.ffn_dim as f64,
    );
    // s_i += u_i²: 2 per neuron.
    let importance = 2.0 * m * l;
    // Three dot products for the cosine plus difference norm.
    let sensitivity = (3.0 * 2.0 * d + 3.0 * d) * l;
    // Centroid accumulation each token; divide and cosine once per window.
    let drift = d + (d + 3.0 * 2.0 * d) / window.max(1) as f64;
    // Redistribution rounds (≤ L + 2, a few ops per layer) and a sort per layer.
    let rebuild = (l + 2.0) * 4.0 * l + l * m * m.log2().max(1.0);
    importance + sensitivity + drift + rebuild / reference_len.max(1) as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    fn decode(tokens: u64) -> Workload {
        Workload {
            tokens,
            context: 0,
            precision: Precision::default(),
        }
    }

    #[test]
    fn mlp_flops_linear_in_keep() {
        let dims = CostDims::llama8b();
        let c = report("8b", dims, decode(128), &vec![0.7; dims.num_layers]).unwrap();
        let kept = kept_count(0.3, dims.ffn_dim) as f64;
        assert_eq!(c.ratios.mlp_flops, kept / dims.ffn_dim as f64);
        let toy = CostDims {
            ffn_dim: 10,
            ..CostDims::toy()
        };
        let c = report("toy", toy, decode(3), &vec![0.7; toy.num_layers]).unwrap();
        assert_eq!(c.ratios.mlp_flops, 0.3);
    }

    #[test]
    fn attention_ignores_sparsity() {
        let dims = CostDims::llama70b();
        let a = report("a", dims, decode(128), &vec![0.7; 80]).unwrap();
        assert_eq!(a.dense.attention, a.sparse.attention);
        assert_eq!(a.ratios.attention_flops, 1.0);
    }

    #[test]
    fn zero_tokens_keep_weight_traffic() {
        let dims = CostDims::toy();
        let c = attention_cost(&dims, &decode(0));
        assert_eq!(c.flops, 0);
        let d = 64u64;
        assert_eq!(c.bytes, 4 * d * 16 + 2 * 2 * d * 16 + 4 * 16 * d);
    }

    #[test]
    fn zero_sparsity_identical() {
        let dims = CostDims::llama70b();
        let c = report("dense", dims, decode(128), &vec![0.0; 80]).unwrap();
        assert_eq!(c.dense, c.sparse);
    }

    #[test]
    fn dense_anchor_calibrates_to_whole_tokens() {
        // 53.91 GiB of dense 70B MLP traffic corresponds to ~128 decoded tokens.
        let t = calibrate_tokens(&CostDims::llama70b(), Precision::default(), 53.91).unwrap();
        assert!((t - 128.0).abs() < 1.0, "{t}");
        let t = calibrate_tokens(&CostDims::llama8b(), Precision::default(), 5.53).unwrap();
        assert!((t - 128.0).abs() < 1.0, "{t}");
    }

    #[test]
    fn rejects_bad_params() {
        let p = Precision {
            weight_bytes: 3,
            activation_bytes: 2,
        };
        assert_eq!(p.validate(), Err(CostError::ByteWidth(3)));
        let params = CostParams::uniform(CostDims::toy(), decode(1), 0.0);
        assert_eq!(evaluate(&params), Err(CostError::Keep(0.0)));
        assert!("gpt5".parse::<Preset>().is_err());
        assert_eq!("LLaMA70B".parse::<Preset>().unwrap(), Preset::Llama70b);
    }
}
