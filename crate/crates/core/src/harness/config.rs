use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::workload::WorkloadConfig;
use super::{HarnessError, Result};
use crate::allocator::AllocatorParams;
use crate::model::ModelConfig;
use crate::tracer::DriftParams;

pub const SEED_ENV: &str = "DART_SEED";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelSource {
    /// Random weights from the run seed and `dims`.
    #[default]
    Synth,
    /// Weight file at `path`.
    File,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSpec {
    pub source: ModelSource,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    pub dims: ModelConfig,
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self {
            source: ModelSource::Synth,
            path: None,
            dims: ModelConfig::toy(),
        }
    }
}

/// Output locations. Read from the config file but never written into the
/// trace header, so replaying a trace elsewhere reproduces it exactly.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputPaths {
    pub trace: Option<PathBuf>,
    pub summary: Option<PathBuf>,
    pub csv: Option<PathBuf>,
    pub heatmap: Option<PathBuf>,
    pub trajectory: Option<PathBuf>,
    pub json: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepParams {
    /// Pruning ratios applied to one layer at a time.
    pub ratios: Vec<f64>,
    /// Greedy continuation length compared against dense.
    pub continuation: usize,
}

impl Default for SweepParams {
    fn default() -> Self {
        Self {
            ratios: vec![0.7],
            continuation: 16,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectParams {
    pub dim: usize,
    pub runs: usize,
    /// Windows drawn from the reference regime after the reference span.
    pub windows_before: usize,
    /// Windows drawn from the orthogonal regime; 0 gives a stationary stream.
    pub windows_after: usize,
    /// Per-token noise norm relative to the regime centroid norm.
    pub noise: f64,
}

impl Default for DetectParams {
    fn default() -> Self {
        Self {
            dim: 64,
            runs: 20,
            windows_before: 50,
            windows_after: 10,
            noise: 0.1,
        }
    }
}

/// One experiment definition. Every random choice derives from `seed`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub model: ModelSpec,
    pub prompt: Vec<u32>,
    /// Tokens generated after the prompt.
    pub gen_len: usize,
    /// Sampling temperature; 0 decodes greedily.
    pub temperature: f64,
    /// Build masks at all. Off runs a dense baseline.
    pub prune: bool,
    /// Run the drift detector after the first mask build. Off keeps the
    /// first masks for the whole run.
    pub drift_tracing: bool,
    pub allocator: AllocatorParams,
    pub drift: DriftParams,
    pub workload: WorkloadConfig,
    pub sweep: SweepParams,
    pub detect: DetectParams,
    #[serde(skip_serializing)]
    pub output: OutputPaths,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            model: ModelSpec::default(),
            prompt: vec![1, 2, 3, 4],
            gen_len: 200,
            temperature: 1.0,
            prune: true,
            drift_tracing: true,
            allocator: AllocatorParams::default(),
            drift: DriftParams::default(),
            workload: WorkloadConfig::default(),
            sweep: SweepParams::default(),
            detect: DetectParams::default(),
            output: OutputPaths::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        toml::from_str(s).map_err(|e| HarnessError::Config(e.message().to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            HarnessError::Config(m) => HarnessError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// Applies `DART_SEED` if set.
    pub fn apply_env(&mut self) -> Result<()> {
        if let Ok(v) = std::env::var(SEED_ENV) {
            self.seed = v
                .trim()
                .parse()
                .map_err(|_| HarnessError::Config(format!("{SEED_ENV}={v:?} is not a u64")))?;
        }
        Ok(())
    }

    pub fn total_tokens(&self) -> usize {
        self.prompt.len() + self.gen_len
    }

    /// Checks every section. Budget infeasibility (ρ outside
    /// `[p_min, p_max]`) is reported separately from malformed input.
    pub fn validate(&self) -> Result<()> {
        let cfg = |s: String| Err(HarnessError::Config(s));
        match self.model.source {
            ModelSource::Synth => self
                .model
                .dims
                .validate()
                .map_err(|e| HarnessError::Config(e.to_string()))?,
            ModelSource::File => match &self.model.path {
                None => return cfg("model.source = \"file\" needs model.path".into()),
                Some(p) if !p.is_file() => {
                    return cfg(format!("model.path {} does not exist", p.display()))
                }
                Some(_) => {}
            },
        }
        self.allocator
            .validate()
            .map_err(|e| HarnessError::Config(e.to_string()))?;
        self.drift
            .validate()
            .map_err(|e| HarnessError::Config(e.to_string()))?;
        self.workload.validate()?;
        if self.prompt.is_empty() {
            return cfg("prompt must contain at least one token".into());
        }
        if !(self.temperature.is_finite() && self.temperature >= 0.0) {
            return cfg(format!(
                "temperature = {} must be finite and >= 0",
                self.temperature
            ));
        }
        if self.sweep.ratios.iter().any(|r| !(0.0..=1.0).contains(r)) {
            return cfg("sweep.ratios must lie in [0, 1]".into());
        }
        let d = &self.detect;
        if d.dim < 2 || d.runs == 0 || !(d.noise.is_finite() && d.noise >= 0.0) {
            return cfg("detect needs dim >= 2, runs >= 1 and finite noise >= 0".into());
        }
        let a = &self.allocator;
        if self.prune && !(a.p_min <= a.rho && a.rho <= a.p_max) {
            return Err(HarnessError::Infeasible(format!(
                "rho = {} outside [p_min, p_max] = [{}, {}]",
                a.rho, a.p_min, a.p_max
            )));
        }
        Ok(())
    }

    /// Checks that depend on the loaded model.
    pub fn validate_for(&self, model: &ModelConfig) -> Result<()> {
        if let Some(&t) = self
            .prompt
            .iter()
            .find(|&&t| t as usize >= model.vocab_size)
        {
            return Err(HarnessError::Config(format!(
                "prompt token {t} out of range for vocabulary of {}",
                model.vocab_size
            )));
        }
        if self.total_tokens() > model.max_seq {
            return Err(HarnessError::Config(format!(
                "prompt + gen_len = {} exceeds max_seq = {}",
                self.total_tokens(),
                model.max_seq
            )));
        }
        self.workload.validate_for(model.hidden_dim)
    }
}
