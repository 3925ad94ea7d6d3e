//! Per-layer pruning ratios from measured layer sensitivity.
//!
//! Pipeline: per-token sensitivity of each FFN block, averaged over the mask
//! window, normalized into relative importance, weighted by a depth factor
//! that protects the first and last layers, then turned into ratios by
//! clamped proportional redistribution of the global budget `ρ·L`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{self, Flagged};

/// Residual budget below which redistribution stops.
pub const BUDGET_TOL: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AllocError {
    #[error("invalid allocator parameters: {0}")]
    InvalidParams(String),
    #[error("infeasible budget: {residual:.3e} left with no adjustable layer")]
    Infeasible { residual: f64 },
    #[error("redistribution did not converge in {0} iterations")]
    NoConvergence(usize),
    #[error("empty input")]
    Empty,
    #[error("length mismatch: {0} vs {1}")]
    Length(usize, usize),
    #[error("sensitivity values must be finite and nonnegative")]
    BadSensitivity,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AllocatorParams {
    /// Global target sparsity ρ.
    pub rho: f64,
    pub p_min: f64,
    pub p_max: f64,
    pub alpha_early: f64,
    pub alpha_late: f64,
    pub beta_early: f64,
    pub beta_late: f64,
    /// Iteration cap; `None` means L + 2.
    pub max_iters: Option<usize>,
}

impl Default for AllocatorParams {
    fn default() -> Self {
        Self {
            rho: 0.5,
            p_min: 0.0,
            p_max: 0.95,
            alpha_early: 0.25,
            alpha_late: 0.35,
            beta_early: 0.3,
            beta_late: 0.15,
            max_iters: None,
        }
    }
}

impl AllocatorParams {
    pub fn validate(&self) -> Result<(), AllocError> {
        let bad = |s: String| Err(AllocError::InvalidParams(s));
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        if !unit(self.rho) {
            return bad(format!("rho = {} outside [0, 1]", self.rho));
        }
        if !(0.0 <= self.p_min && self.p_min < self.p_max && self.p_max <= 1.0) {
            return bad(format!(
                "need 0 <= p_min < p_max <= 1, got p_min = {}, p_max = {}",
                self.p_min, self.p_max
            ));
        }
        for (name, v) in [
            ("alpha_early", self.alpha_early),
            ("alpha_late", self.alpha_late),
        ] {
            if !unit(v) {
                return bad(format!("{name} = {v} outside [0, 1]"));
            }
        }
        if !(self.beta_early > 0.0 && self.beta_late > 0.0) {
            return bad("beta_early and beta_late must be positive".into());
        }
        if self.beta_early + self.beta_late > 1.0 + 1e-12 {
            return bad(format!(
                "beta_early + beta_late = {} exceeds 1",
                self.beta_early + self.beta_late
            ));
        }
        Ok(())
    }
}

/// Sensitivity statistics and the resulting ratio for one layer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LayerBudget {
    pub mean_sensitivity: f64,
    pub importance: f64,
    pub depth: f64,
    pub ratio: f64,
}

/// How much an FFN block rotates and displaces the residual stream:
/// `(1 − cos(y, z)) · ‖z − y‖ / ‖y‖`. Zero-norm `y` gives 0, flagged.
pub fn sensitivity(y: &[f32], z: &[f32]) -> Result<Flagged<f64>, AllocError> {
    if y.len() != z.len() {
        return Err(AllocError::Length(y.len(), z.len()));
    }
    let ny = linalg::norm(y);
    if ny == 0.0 {
        return Ok(Flagged::degenerate(0.0));
    }
    let cos = linalg::cosine(y, z).expect("lengths checked").value;
    let disp = y
        .iter()
        .zip(z)
        .map(|(&a, &b)| {
            let d = b as f64 - a as f64;
            d * d
        })
        .sum::<f64>()
        .sqrt();
    Ok(Flagged::ok(((1.0 - cos) * disp / ny).max(0.0)))
}

pub fn mean_sensitivity(scores: &[f64]) -> Result<f64, AllocError> {
    if scores.is_empty() {
        return Err(AllocError::Empty);
    }
    Ok(scores.iter().sum::<f64>() / scores.len() as f64)
}

/// `I = 1 − S̄ / ΣS̄`. All-zero input falls back to uniform `1 − 1/L`, flagged.
pub fn relative_importance(mean_sens: &[f64]) -> Result<Flagged<Vec<f64>>, AllocError> {
    if mean_sens.is_empty() {
        return Err(AllocError::Empty);
    }
    if mean_sens.iter().any(|s| !s.is_finite() || *s < 0.0) {
        return Err(AllocError::BadSensitivity);
    }
    let total: f64 = mean_sens.iter().sum();
    let l = mean_sens.len() as f64;
    if total == 0.0 {
        return Ok(Flagged::degenerate(vec![1.0 - 1.0 / l; mean_sens.len()]));
    }
    Ok(Flagged::ok(
        mean_sens.iter().map(|s| 1.0 - s / total).collect(),
    ))
}

/// Depth attenuation, lowest at the first and last layers.
pub fn depth_factor(layer: usize, num_layers: usize, params: &AllocatorParams) -> f64 {
    if num_layers < 2 {
        return 1.0;
    }
    depth_factor_at(layer as f64 / (num_layers - 1) as f64, params)
}

/// Depth factor at normalized depth `x ∈ [0, 1]`.
pub fn depth_factor_at(x: f64, p: &AllocatorParams) -> f64 {
    let early = p.alpha_early + (1.0 - p.alpha_early) * x / p.beta_early;
    let late = p.alpha_late + (1.0 - p.alpha_late) * (1.0 - x) / p.beta_late;
    1.0f64.min(early).min(late)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Allocation {
    pub ratios: Vec<f64>,
    pub iterations: usize,
    /// Set when the active set emptied with budget left and layers with
    /// remaining headroom were re-admitted with uniform shares.
    pub readmitted: bool,
    /// The round-based result left a layer pinned at a bound the final
    /// water level had moved past; the exact fixed point was used instead.
    pub rebalanced: bool,
}

/// Exact fixed point `p_l = clip(λ·w_l, lo, hi)` with `Σp = target`, from the
/// breakpoints of the piecewise-linear total. `None` when no λ reaches the
/// target (zero-weight layers cannot rise above `lo`).
pub fn water_level(weights: &[f64], lo: f64, hi: f64, target: f64) -> Option<Vec<f64>> {
    let fill = |lam: f64| -> Vec<f64> {
        weights
            .iter()
            .map(|&w| (lam * w.max(0.0)).clamp(lo, hi))
            .collect()
    };
    let total = |lam: f64| fill(lam).iter().sum::<f64>();
    let mut breaks: Vec<f64> = weights
        .iter()
        .filter(|w| **w > 0.0)
        .flat_map(|&w| [lo / w, hi / w])
        .collect();
    breaks.push(0.0);
    breaks.sort_by(f64::total_cmp);
    breaks.dedup();
    let mut prev = 0.0;
    let mut g_prev = total(0.0);
    if g_prev >= target {
        return Some(fill(0.0));
    }
    for &b in &breaks[1..] {
        let g = total(b);
        if g >= target {
            let lam = prev + (target - g_prev) * (b - prev) / (g - g_prev);
            return Some(fill(lam));
        }
        prev = b;
        g_prev = g;
    }
    None
}

/// Clamped proportional redistribution of the budget `ρ·L`.
///
/// Each round hands the residual budget to the active layers in proportion to
/// `I·D`, clips to `[p_min, p_max]`, drops layers that reached a bound, and
/// carries the clipped-off amount into the next round.
pub fn allocate(
    importance: &[f64],
    depth: &[f64],
    params: &AllocatorParams,
) -> Result<Allocation, AllocError> {
    params.validate()?;
    if importance.is_empty() {
        return Err(AllocError::Empty);
    }
    if importance.len() != depth.len() {
        return Err(AllocError::Length(importance.len(), depth.len()));
    }
    let n = importance.len();
    let weights: Vec<f64> = importance
        .iter()
        .zip(depth)
        .map(|(i, d)| (i * d).max(0.0))
        .collect();
    let (lo, hi) = (params.p_min, params.p_max);
    let cap = params.max_iters.unwrap_or(n + 2);

    let mut p = vec![0.0f64; n];
    let mut active: Vec<usize> = (0..n).collect();
    let mut residual = params.rho * n as f64;
    let mut iterations = 0;
    let mut readmitted = false;

    while residual.abs() > BUDGET_TOL {
        if active.is_empty() {
            // Layers with headroom in the direction the residual needs.
            active = (0..n)
                .filter(|&l| if residual > 0.0 { p[l] < hi } else { p[l] > lo })
                .collect();
            if active.is_empty() {
                return Err(AllocError::Infeasible { residual });
            }
            readmitted = true;
        }
        if iterations >= cap {
            return Err(AllocError::NoConvergence(cap));
        }
        let wsum: f64 = active.iter().map(|&l| weights[l]).sum();
        let uniform = wsum <= 0.0 || readmitted;
        let mut moved = 0.0;
        for &l in &active {
            let share = if uniform {
                1.0 / active.len() as f64
            } else {
                weights[l] / wsum
            };
            let next = (p[l] + residual * share).clamp(lo, hi);
            moved += next - p[l];
            p[l] = next;
        }
        residual -= moved;
        active.retain(|&l| p[l] > lo && p[l] < hi);
        iterations += 1;
    }
    let mut rebalanced = false;
    if !readmitted {
        if let Some(exact) = water_level(&weights, lo, hi, params.rho * n as f64) {
            if exact
                .iter()
                .zip(&p)
                .any(|(a, b)| (a - b).abs() > BUDGET_TOL)
            {
                p = exact;
                rebalanced = true;
            }
        }
    }
    Ok(Allocation {
        ratios: p,
        iterations,
        readmitted,
        rebalanced,
    })
}

/// Full budget pass from per-layer mean sensitivities.
pub fn plan_budgets(
    mean_sens: &[f64],
    params: &AllocatorParams,
) -> Result<(Vec<LayerBudget>, bool), AllocError> {
    let importance = relative_importance(mean_sens)?;
    let n = mean_sens.len();
    let depth: Vec<f64> = (0..n).map(|l| depth_factor(l, n, params)).collect();
    let alloc = allocate(&importance.value, &depth, params)?;
    let budgets = (0..n)
        .map(|l| LayerBudget {
            mean_sensitivity: mean_sens[l],
            importance: importance.value[l],
            depth: depth[l],
            ratio: alloc.ratios[l],
        })
        .collect();
    Ok((budgets, importance.degenerate || alloc.readmitted))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sensitivity_cases() {
        let y = [0.4f32, -1.0, 2.0];
        assert_eq!(sensitivity(&y, &y).unwrap().value, 0.0);
        let z2: Vec<f32> = y.iter().map(|v| 2.0 * v).collect();
        assert!(sensitivity(&y, &z2).unwrap().value.abs() < 1e-12);
        let s = sensitivity(&[1.0, 0.0], &[0.0, 1.0]).unwrap().value;
        assert!((s - std::f64::consts::SQRT_2).abs() < 1e-12);
        let d = sensitivity(&[0.0, 0.0], &[1.0, 0.0]).unwrap();
        assert!(d.degenerate && d.value == 0.0);
    }

    #[test]
    fn mean_cases() {
        assert_eq!(mean_sensitivity(&[0.3; 7]).unwrap(), 0.3);
        assert_eq!(mean_sensitivity(&[0.0, 2.0]).unwrap(), 1.0);
        assert_eq!(mean_sensitivity(&[]), Err(AllocError::Empty));
    }

    #[test]
    fn importance_cases() {
        assert_eq!(
            relative_importance(&[1.0, 1.0]).unwrap().value,
            vec![0.5, 0.5]
        );
        assert_eq!(
            relative_importance(&[3.0, 1.0]).unwrap().value,
            vec![0.25, 0.75]
        );
        let z = relative_importance(&[0.0, 0.0, 0.0, 0.0]).unwrap();
        assert!(z.degenerate);
        assert_eq!(z.value, vec![0.75; 4]);
        assert_eq!(
            relative_importance(&[-1.0, 2.0]),
            Err(AllocError::BadSensitivity)
        );
    }

    #[test]
    fn depth_endpoints() {
        let p = AllocatorParams::default();
        assert!((depth_factor_at(0.0, &p) - 0.25).abs() < 1e-12);
        assert!((depth_factor_at(1.0, &p) - 0.35).abs() < 1e-12);
        assert_eq!(depth_factor_at(0.5, &p), 1.0);
        assert_eq!(depth_factor(0, 1, &p), 1.0);
        assert!((depth_factor(4, 5, &p) - 0.35).abs() < 1e-12);
    }

    #[test]
    fn uniform_allocation() {
        let p = AllocatorParams {
            p_max: 1.0,
            ..AllocatorParams::default()
        };
        let a = allocate(&[0.7; 4], &[1.0; 4], &p).unwrap();
        for r in a.ratios {
            assert!((r - 0.5).abs() < 1e-12);
        }
    }

    #[test]
    fn clamped_layer_passes_residual_on() {
        let p = AllocatorParams {
            rho: 0.5,
            p_max: 0.6,
            ..AllocatorParams::default()
        };
        let a = allocate(&[0.9, 0.1], &[1.0, 1.0], &p).unwrap();
        assert!((a.ratios[0] - 0.6).abs() < 1e-12);
        assert!((a.ratios[1] - 0.4).abs() < 1e-12);
        assert_eq!(a.iterations, 2);
    }

    #[test]
    fn pinned_floor_layer_is_rebalanced() {
        let p = AllocatorParams {
            rho: 0.473,
            p_min: 0.2609,
            p_max: 0.6,
            ..AllocatorParams::default()
        };
        let imp = relative_importance(&[0.01, 1.046, 1.985]).unwrap().value;
        let depth: Vec<f64> = (0..3).map(|l| depth_factor(l, 3, &p)).collect();
        let a = allocate(&imp, &depth, &p).unwrap();
        assert!(a.rebalanced);
        let total: f64 = a.ratios.iter().sum();
        assert!((total - 0.473 * 3.0).abs() < 1e-9);
        // Both interior layers share one water level.
        let w: Vec<f64> = imp.iter().zip(&depth).map(|(i, d)| i * d).collect();
        assert_eq!(a.ratios[1], 0.6);
        assert!(a.ratios[2] > p.p_min && a.ratios[0] > a.ratios[2]);
        assert!((a.ratios[0] / w[0] - a.ratios[2] / w[2]).abs() < 1e-9);
    }

    #[test]
    fn water_level_cases() {
        assert_eq!(
            water_level(&[1.0, 1.0], 0.0, 1.0, 1.0).unwrap(),
            vec![0.5, 0.5]
        );
        let v = water_level(&[3.0, 1.0], 0.0, 0.6, 1.0).unwrap();
        assert!((v[0] - 0.6).abs() < 1e-12 && (v[1] - 0.4).abs() < 1e-12);
        assert!(water_level(&[0.0, 1.0], 0.0, 0.5, 0.8).is_none());
    }

    #[test]
    fn single_layer_gets_whole_budget() {
        let p = AllocatorParams {
            rho: 0.3,
            ..AllocatorParams::default()
        };
        let (b, degenerate) = plan_budgets(&[2.0], &p).unwrap();
        assert!((b[0].ratio - 0.3).abs() < 1e-12);
        assert_eq!(b[0].importance, 0.0);
        assert!(!degenerate);
    }

    #[test]
    fn zero_weight_layer_readmitted() {
        // Layer 0 has no weight; layer 1 alone cannot absorb 2·0.6.
        let p = AllocatorParams {
            rho: 0.6,
            p_max: 0.9,
            ..AllocatorParams::default()
        };
        let a = allocate(&[0.0, 1.0], &[1.0, 1.0], &p).unwrap();
        assert!(a.readmitted);
        assert!((a.ratios.iter().sum::<f64>() - 1.2).abs() < 1e-9);
        assert!((a.ratios[1] - 0.9).abs() < 1e-12);
    }

    #[test]
    fn infeasible_params_rejected() {
        let p = AllocatorParams {
            rho: 0.97,
            ..AllocatorParams::default()
        };
        assert!(matches!(
            allocate(&[1.0, 0.5], &[1.0, 1.0], &p),
            Err(AllocError::Infeasible { .. })
        ));
        let p = AllocatorParams {
            rho: 0.1,
            p_min: 0.2,
            ..AllocatorParams::default()
        };
        assert!(matches!(
            allocate(&[1.0, 0.5], &[1.0, 1.0], &p),
            Err(AllocError::Infeasible { .. })
        ));
        let p = AllocatorParams {
            beta_early: 0.9,
            beta_late: 0.2,
            ..AllocatorParams::default()
        };
        assert!(p.validate().is_err());
    }
}
