//! Knowledge-drift detection on the last layer's attention output.
//!
//! A reference span of `T = K·τ` tokens defines a centroid and the mean `μ`
//! and deviation `σ` (divisor K) of its K window alignments. Each later
//! window of τ tokens is compared to the reference centroid; a window whose
//! alignment `a` satisfies `a − μ ≤ −δσ` counts as drift. A counter rises on
//! drift and decays otherwise (once per window) and a re-prune is requested
//! when it reaches `c_0`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{self, Flagged};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TracerError {
    #[error("empty vector list")]
    Empty,
    #[error("vector dimension mismatch: {0} vs {1}")]
    Dim(usize, usize),
    #[error("reference length {len} is not a multiple of window {window}")]
    NotDivisible { len: usize, window: usize },
    #[error("reference needs at least 2 windows, got {0}")]
    TooFewWindows(usize),
    #[error("drift detector has no reference statistics")]
    Uninitialized,
    #[error("invalid drift parameters: {0}")]
    InvalidParams(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DriftParams {
    /// Detection window τ.
    pub window: usize,
    /// Reference windows K (reference length T = K·τ).
    pub ref_windows: usize,
    /// Threshold scale δ.
    pub delta: f64,
    /// Counter threshold c_0.
    pub c0: u32,
}

impl Default for DriftParams {
    fn default() -> Self {
        Self {
            window: 10,
            ref_windows: 8,
            delta: 0.5,
            c0: 3,
        }
    }
}

impl DriftParams {
    pub fn reference_len(&self) -> usize {
        self.window * self.ref_windows
    }

    pub fn validate(&self) -> Result<(), TracerError> {
        if self.window == 0 {
            return Err(TracerError::InvalidParams(
                "window must be at least 1".into(),
            ));
        }
        if self.ref_windows < 2 {
            return Err(TracerError::InvalidParams(
                "ref_windows must be at least 2".into(),
            ));
        }
        if self.c0 == 0 {
            return Err(TracerError::InvalidParams("c0 must be at least 1".into()));
        }
        if self.delta.is_nan() || self.delta < 0.0 {
            return Err(TracerError::InvalidParams(
                "delta must be nonnegative".into(),
            ));
        }
        Ok(())
    }
}

/// Arithmetic mean vector, accumulated in f64.
pub fn centroid<V: AsRef<[f32]>>(vectors: &[V]) -> Result<Vec<f32>, TracerError> {
    let first = vectors.first().ok_or(TracerError::Empty)?.as_ref();
    let mut acc = vec![0.0f64; first.len()];
    for v in vectors {
        let v = v.as_ref();
        if v.len() != acc.len() {
            return Err(TracerError::Dim(acc.len(), v.len()));
        }
        for (a, &x) in acc.iter_mut().zip(v) {
            *a += x as f64;
        }
    }
    let n = vectors.len() as f64;
    Ok(acc.into_iter().map(|a| (a / n) as f32).collect())
}

/// Cosine between a window centroid and the reference centroid.
pub fn alignment(window: &[f32], reference: &[f32]) -> Result<Flagged<f64>, TracerError> {
    linalg::cosine(window, reference).map_err(|_| TracerError::Dim(window.len(), reference.len()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceStats {
    pub centroid: Vec<f32>,
    pub mu: f64,
    pub sigma: f64,
    /// Alignment of each reference window.
    pub alignments: Vec<f64>,
}

/// Splits the reference span into consecutive windows of `window` tokens and
/// summarizes their alignment to the overall centroid.
pub fn reference_stats<V: AsRef<[f32]>>(
    vectors: &[V],
    window: usize,
) -> Result<ReferenceStats, TracerError> {
    if vectors.is_empty() {
        return Err(TracerError::Empty);
    }
    if window == 0 || !vectors.len().is_multiple_of(window) {
        return Err(TracerError::NotDivisible {
            len: vectors.len(),
            window,
        });
    }
    let k = vectors.len() / window;
    if k < 2 {
        return Err(TracerError::TooFewWindows(k));
    }
    let centroid = centroid(vectors)?;
    let alignments = vectors
        .chunks(window)
        .map(|w| Ok(alignment(&self::centroid(w)?, &centroid)?.value))
        .collect::<Result<Vec<_>, TracerError>>()?;
    let mu = alignments.iter().sum::<f64>() / k as f64;
    let var = alignments.iter().map(|a| (a - mu) * (a - mu)).sum::<f64>() / k as f64;
    Ok(ReferenceStats {
        centroid,
        mu,
        sigma: var.sqrt(),
        alignments,
    })
}

/// Drift test `a − μ ≤ −δσ`. With σ = 0 only a strict drop counts.
pub fn drift_check(a: f64, mu: f64, sigma: f64, delta: f64) -> bool {
    if sigma == 0.0 {
        return a < mu;
    }
    a - mu <= -delta * sigma
}

pub fn update_counter(c: u32, triggered: bool) -> u32 {
    if triggered {
        c + 1
    } else {
        c.saturating_sub(1)
    }
}

/// Outcome of a completed detection window.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WindowReport {
    pub alignment: f64,
    pub degenerate: bool,
    pub triggered: bool,
    /// Counter after this window (before any reset on an event).
    pub counter: u32,
    pub event: bool,
}

/// One generation stream's detector.
#[derive(Debug, Clone)]
pub struct DriftState {
    params: DriftParams,
    reference: Option<ReferenceStats>,
    buffer: Vec<Vec<f32>>,
    counter: u32,
}

impl DriftState {
    pub fn new(params: DriftParams) -> Result<Self, TracerError> {
        params.validate()?;
        Ok(Self {
            params,
            reference: None,
            buffer: Vec::new(),
            counter: 0,
        })
    }

    pub fn params(&self) -> &DriftParams {
        &self.params
    }

    pub fn reference(&self) -> Option<&ReferenceStats> {
        self.reference.as_ref()
    }

    pub fn counter(&self) -> u32 {
        self.counter
    }

    pub fn buffered(&self) -> usize {
        self.buffer.len()
    }

    /// Installs fresh reference statistics; clears the window and counter.
    pub fn set_reference<V: AsRef<[f32]>>(
        &mut self,
        vectors: &[V],
    ) -> Result<&ReferenceStats, TracerError> {
        let stats = reference_stats(vectors, self.params.window)?;
        self.buffer.clear();
        self.counter = 0;
        Ok(self.reference.insert(stats))
    }

    /// Buffers one attention output. Every τ-th call closes a window and
    /// returns its report.
    pub fn step(&mut self, y_attn: &[f32]) -> Result<Option<WindowReport>, TracerError> {
        let reference = self.reference.as_ref().ok_or(TracerError::Uninitialized)?;
        if y_attn.len() != reference.centroid.len() {
            return Err(TracerError::Dim(reference.centroid.len(), y_attn.len()));
        }
        self.buffer.push(y_attn.to_vec());
        if self.buffer.len() < self.params.window {
            return Ok(None);
        }
        let a = alignment(&centroid(&self.buffer)?, &reference.centroid)?;
        self.buffer.clear();
        let triggered = drift_check(a.value, reference.mu, reference.sigma, self.params.delta);
        self.counter = update_counter(self.counter, triggered);
        let counter = self.counter;
        let event = counter >= self.params.c0;
        if event {
            self.counter = 0;
        }
        Ok(Some(WindowReport {
            alignment: a.value,
            degenerate: a.degenerate,
            triggered,
            counter,
            event,
        }))
    }
}
