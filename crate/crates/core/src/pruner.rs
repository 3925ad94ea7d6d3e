//! Windowed neuron importance and top-k FFN masks.

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PrunerError {
    #[error("importance window of {0} tokens is already full")]
    WindowFull(usize),
    #[error("activation length {got} does not match FFN width {expected}")]
    Length { expected: usize, got: usize },
    #[error("no tokens accumulated")]
    Empty,
    #[error("bad packed mask: {0}")]
    Packed(String),
}

/// Binary keep-mask over one layer's FFN neurons.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NeuronMask {
    layer: usize,
    bits: Vec<bool>,
    k: usize,
}

impl NeuronMask {
    pub fn from_bits(layer: usize, bits: Vec<bool>) -> Self {
        let k = bits.iter().filter(|b| **b).count();
        Self { layer, bits, k }
    }

    pub fn dense(layer: usize, m: usize) -> Self {
        Self::from_bits(layer, vec![true; m])
    }

    pub fn layer(&self) -> usize {
        self.layer
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    /// Neurons kept.
    pub fn k(&self) -> usize {
        self.k
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn density(&self) -> f64 {
        if self.bits.is_empty() {
            return 0.0;
        }
        self.k as f64 / self.bits.len() as f64
    }

    pub fn kept_indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.bits
            .iter()
            .enumerate()
            .filter(|(_, b)| **b)
            .map(|(i, _)| i)
    }

    /// Neurons kept by both masks.
    pub fn intersection(&self, other: &NeuronMask) -> usize {
        self.bits
            .iter()
            .zip(&other.bits)
            .filter(|(a, b)| **a && **b)
            .count()
    }

    /// Neurons kept by either mask.
    pub fn union(&self, other: &NeuronMask) -> usize {
        self.bits
            .iter()
            .zip(&other.bits)
            .filter(|(a, b)| **a || **b)
            .count()
    }

    /// Bits packed LSB-first into bytes, hex encoded.
    pub fn to_hex(&self) -> String {
        let mut bytes = vec![0u8; self.bits.len().div_ceil(8)];
        for i in self.kept_indices() {
            bytes[i / 8] |= 1 << (i % 8);
        }
        hex::encode(bytes)
    }

    pub fn from_hex(layer: usize, m: usize, s: &str) -> Result<Self, PrunerError> {
        let bytes = hex::decode(s).map_err(|e| PrunerError::Packed(e.to_string()))?;
        if bytes.len() != m.div_ceil(8) {
            return Err(PrunerError::Packed(format!(
                "{} bytes for {m} neurons",
                bytes.len()
            )));
        }
        let bits = (0..m).map(|i| bytes[i / 8] & (1 << (i % 8)) != 0).collect();
        Ok(Self::from_bits(layer, bits))
    }
}

/// Cumulative squared activations `s_i = Σ_t u_{t,i}²` for one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct ImportanceAccumulator {
    layer: usize,
    scores: Vec<f64>,
    window: usize,
    tokens_seen: usize,
}

impl ImportanceAccumulator {
    pub fn new(layer: usize, ffn_dim: usize, window: usize) -> Self {
        Self {
            layer,
            scores: vec![0.0; ffn_dim],
            window,
            tokens_seen: 0,
        }
    }

    pub fn accumulate(&mut self, u: &[f32]) -> Result<(), PrunerError> {
        if self.tokens_seen >= self.window {
            return Err(PrunerError::WindowFull(self.window));
        }
        if u.len() != self.scores.len() {
            return Err(PrunerError::Length {
                expected: self.scores.len(),
                got: u.len(),
            });
        }
        for (s, &v) in self.scores.iter_mut().zip(u) {
            *s += v as f64 * v as f64;
        }
        self.tokens_seen += 1;
        Ok(())
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    pub fn tokens_seen(&self) -> usize {
        self.tokens_seen
    }

    pub fn window(&self) -> usize {
        self.window
    }

    pub fn is_full(&self) -> bool {
        self.tokens_seen >= self.window
    }

    /// Zeroes the scores for a fresh window.
    pub fn reset(&mut self) {
        self.scores.iter_mut().for_each(|s| *s = 0.0);
        self.tokens_seen = 0;
    }

    /// Mask keeping `1 − prune_ratio` of the neurons.
    pub fn mask_for_layer(&self, prune_ratio: f64) -> Result<NeuronMask, PrunerError> {
        if self.tokens_seen == 0 {
            return Err(PrunerError::Empty);
        }
        Ok(build_mask(self.layer, &self.scores, 1.0 - prune_ratio))
    }
}

/// Neurons kept for `keep_ratio` of `m`: round half up, at least one.
pub fn kept_count(keep_ratio: f64, m: usize) -> usize {
    if m == 0 {
        return 0;
    }
    let keep = if keep_ratio.is_nan() {
        1.0
    } else {
        keep_ratio.clamp(0.0, 1.0)
    };
    ((keep * m as f64 + 0.5).floor() as usize).clamp(1, m)
}

/// Keeps the k highest scores; equal scores prefer the lower index.
pub fn build_mask(layer: usize, scores: &[f64], keep_ratio: f64) -> NeuronMask {
    let m = scores.len();
    let k = kept_count(keep_ratio, m);
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut bits = vec![false; m];
    for &i in &order[..k] {
        bits[i] = true;
    }
    NeuronMask { layer, bits, k }
}
