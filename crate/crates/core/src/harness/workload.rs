use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{derive_seed, streams, HarnessError, Result};

/// Regime-switching embedding bias. Each regime owns a fixed random
/// low-rank subspace; tokens in that regime get a bias inside it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorkloadConfig {
    pub regimes: usize,
    /// Subspace rank per regime.
    pub rank: usize,
    /// Bias norm.
    pub bias_scale: f64,
    /// Relative jitter of the bias coefficients and isotropic residual.
    pub noise: f64,
    /// Token indices at which the regime advances (cyclically).
    pub switch_points: Vec<usize>,
}

impl Default for WorkloadConfig {
    fn default() -> Self {
        Self {
            regimes: 1,
            rank: 4,
            bias_scale: 3.0,
            noise: 0.1,
            switch_points: Vec::new(),
        }
    }
}

impl WorkloadConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |s: &str| Err(HarnessError::Config(format!("workload: {s}")));
        if self.regimes == 0 {
            return bad("need at least one regime");
        }
        if self.rank == 0 {
            return bad("rank must be at least 1");
        }
        if !(self.bias_scale.is_finite() && self.bias_scale >= 0.0) {
            return bad("bias_scale must be finite and >= 0");
        }
        if !(self.noise.is_finite() && self.noise >= 0.0) {
            return bad("noise must be finite and >= 0");
        }
        if self.switch_points.windows(2).any(|w| w[0] >= w[1]) {
            return bad("switch_points must be strictly increasing");
        }
        Ok(())
    }

    pub fn validate_for(&self, hidden_dim: usize) -> Result<()> {
        if self.rank > hidden_dim {
            return Err(HarnessError::Config(format!(
                "workload: rank {} exceeds hidden_dim {hidden_dim}",
                self.rank
            )));
        }
        Ok(())
    }

    /// Regime active at token `t`.
    pub fn regime_at(&self, t: usize) -> usize {
        self.switch_points.iter().take_while(|&&s| s <= t).count() % self.regimes
    }
}

#[derive(Debug, Clone)]
pub struct Workload {
    config: WorkloadConfig,
    /// regimes × rank unit vectors.
    bases: Vec<Vec<Vec<f32>>>,
    seed: u64,
    dim: usize,
}

impl Workload {
    pub fn new(config: WorkloadConfig, dim: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        config.validate_for(dim)?;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, streams::WORKLOAD_BASIS));
        let bases = (0..config.regimes)
            .map(|_| {
                (0..config.rank)
                    .map(|_| unit_gaussian(&mut rng, dim))
                    .collect()
            })
            .collect();
        Ok(Self {
            config,
            bases,
            seed,
            dim,
        })
    }

    pub fn config(&self) -> &WorkloadConfig {
        &self.config
    }

    pub fn regime_at(&self, t: usize) -> usize {
        self.config.regime_at(t)
    }

    /// Bias added to the embedding at position `t` under `regime`. A pure
    /// function of (seed, t, regime).
    pub fn bias(&self, t: usize, regime: usize) -> Vec<f32> {
        let c = &self.config;
        let mut rng =
            ChaCha8Rng::seed_from_u64(derive_seed(self.seed ^ t as u64, streams::WORKLOAD_NOISE));
        let coef = c.bias_scale / (c.rank as f64).sqrt();
        let mut out = vec![0.0f64; self.dim];
        for u in &self.bases[regime % c.regimes] {
            let eps: f64 = StandardNormal.sample(&mut rng);
            let w = coef * (1.0 + c.noise * eps);
            for (o, &x) in out.iter_mut().zip(u) {
                *o += w * x as f64;
            }
        }
        let iso = c.noise * c.bias_scale / (self.dim as f64).sqrt();
        for o in out.iter_mut() {
            let eps: f64 = StandardNormal.sample(&mut rng);
            *o += iso * eps;
        }
        out.into_iter().map(|v| v as f32).collect()
    }
}

pub(crate) fn unit_gaussian(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f32> {
    let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
    let n = v
        .iter()
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt()
        .max(f64::MIN_POSITIVE);
    v.into_iter().map(|x| (x / n) as f32).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn regime_schedule_cycles() {
        let c = WorkloadConfig {
            regimes: 2,
            switch_points: vec![5, 9],
            ..Default::default()
        };
        let r: Vec<usize> = (0..11).map(|t| c.regime_at(t)).collect();
        assert_eq!(r, vec![0, 0, 0, 0, 0, 1, 1, 1, 1, 0, 0]);
    }

    #[test]
    fn bias_is_deterministic_per_position() {
        let c = WorkloadConfig {
            regimes: 2,
            ..Default::default()
        };
        let w = Workload::new(c, 16, 3).unwrap();
        assert_eq!(w.bias(4, 1), w.bias(4, 1));
        assert_ne!(w.bias(4, 0), w.bias(4, 1));
        assert_ne!(w.bias(4, 0), w.bias(5, 0));
    }

    #[test]
    fn noiseless_bias_has_scale_norm() {
        let c = WorkloadConfig {
            rank: 1,
            noise: 0.0,
            bias_scale: 2.0,
            ..Default::default()
        };
        let w = Workload::new(c, 32, 0).unwrap();
        let n: f64 = w
            .bias(0, 0)
            .iter()
            .map(|x| (*x as f64).powi(2))
            .sum::<f64>()
            .sqrt();
        assert!((n - 2.0).abs() < 1e-5);
    }

    #[test]
    fn rejects_bad_schedules() {
        let c = WorkloadConfig {
            switch_points: vec![5, 5],
            ..Default::default()
        };
        assert!(c.validate().is_err());
        let c = WorkloadConfig {
            regimes: 0,
            ..Default::default()
        };
        assert!(c.validate().is_err());
        assert!(WorkloadConfig {
            rank: 9,
            ..Default::default()
        }
        .validate_for(8)
        .is_err());
    }
}
