//! Single-token forward pass with KV cache.
//!
//! Per layer, with `h` the residual stream entering the layer:
//!
//! ```text
//! y = h + Attn(rms(h))                     attention block output
//! u = (rms(y) W_up) ⊙ SiLU(rms(y) W_gate)  pre-down activation
//! z = y + (M ⊙ u) W_down                   FFN block output
//! ```
//!
//! Logits are `rms(h_L) W_unembed`. No positional encoding: position enters
//! only through the causal cache.

use super::{LayerWeights, ModelConfig, ModelError, ModelWeights};
use crate::exec::Exec;
use crate::linalg::opcount::{self, OpKind};
use crate::linalg::{self, Matrix};
use crate::pruner::NeuronMask;

#[derive(Debug, Clone, Default)]
struct KvGroup {
    keys: Vec<f32>,
    values: Vec<f32>,
}

/// Per-layer, per-group growable key/value storage.
#[derive(Debug, Clone)]
pub struct KvCache {
    head_dim: usize,
    layers: Vec<Vec<KvGroup>>,
}

impl KvCache {
    pub fn new(config: &ModelConfig) -> Self {
        Self {
            head_dim: config.head_dim,
            layers: vec![vec![KvGroup::default(); config.num_kv_groups]; config.num_layers],
        }
    }

    /// Tokens cached for `layer`.
    pub fn len(&self, layer: usize) -> usize {
        self.layers[layer][0].keys.len() / self.head_dim
    }

    pub fn is_empty(&self) -> bool {
        self.len(0) == 0
    }

    /// Cached keys of one group as a `t × d_h` matrix.
    pub fn keys(&self, layer: usize, group: usize) -> Matrix {
        let g = &self.layers[layer][group];
        Matrix::new(g.keys.len() / self.head_dim, self.head_dim, g.keys.clone())
            .expect("cache rows are always whole")
    }

    pub fn values(&self, layer: usize, group: usize) -> Matrix {
        let g = &self.layers[layer][group];
        Matrix::new(
            g.values.len() / self.head_dim,
            self.head_dim,
            g.values.clone(),
        )
        .expect("cache rows are always whole")
    }

    fn key(&self, layer: usize, group: usize, t: usize) -> &[f32] {
        &self.layers[layer][group].keys[t * self.head_dim..(t + 1) * self.head_dim]
    }

    fn value(&self, layer: usize, group: usize, t: usize) -> &[f32] {
        &self.layers[layer][group].values[t * self.head_dim..(t + 1) * self.head_dim]
    }
}

/// Intermediate tensors of one layer for one token.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerTrace {
    /// Attention output before the residual add.
    pub attn: Vec<f32>,
    /// Attention block output (FFN input).
    pub y: Vec<f32>,
    /// Pre-down activation, unmasked, length m.
    pub u: Vec<f32>,
    /// FFN block output.
    pub z: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepTrace {
    pub layers: Vec<LayerTrace>,
}

impl StepTrace {
    /// Attention block output of the last layer, the drift detector's input.
    pub fn last_attention(&self) -> &[f32] {
        &self.layers.last().expect("at least one layer").y
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FfnOutput {
    pub u: Vec<f32>,
    pub z: Vec<f32>,
}

/// FFN of one layer with pruned neurons physically removed.
#[derive(Debug, Clone)]
pub struct CompactFfn {
    kept: Vec<usize>,
    ffn_dim: usize,
    w_up: Matrix,
    w_gate: Matrix,
    w_down: Matrix,
}

impl CompactFfn {
    pub fn new(layer: &LayerWeights, mask: Option<&NeuronMask>) -> Result<Self, ModelError> {
        let m = layer.w_up.cols();
        let kept: Vec<usize> = match mask {
            Some(mask) if mask.len() != m => {
                return Err(ModelError::MaskLength {
                    expected: m,
                    got: mask.len(),
                })
            }
            Some(mask) => mask.kept_indices().collect(),
            None => (0..m).collect(),
        };
        Ok(Self {
            ffn_dim: m,
            w_up: layer.w_up.select_cols(&kept),
            w_gate: layer.w_gate.select_cols(&kept),
            w_down: layer.w_down.select_rows(&kept),
            kept,
        })
    }

    pub fn kept(&self) -> usize {
        self.kept.len()
    }

    /// Returns `u` scattered back to length m (pruned entries zero).
    pub fn step(&self, exec: Exec, y: &[f32]) -> Result<FfnOutput, ModelError> {
        let yn = linalg::rms_norm(y);
        let (u_small, delta) = opcount::scoped(OpKind::Mlp, || -> Result<_, ModelError> {
            let up = linalg::vecmat_exec(exec, &yn, &self.w_up)?;
            let gate = linalg::silu(&linalg::vecmat_exec(exec, &yn, &self.w_gate)?);
            let u = linalg::hadamard(&up, &gate)?;
            let delta = linalg::vecmat_exec(exec, &u, &self.w_down)?;
            Ok((u, delta))
        })?;
        let mut u = vec![0.0; self.ffn_dim];
        for (&i, v) in self.kept.iter().zip(u_small) {
            u[i] = v;
        }
        Ok(FfnOutput {
            u,
            z: linalg::add(y, &delta)?,
        })
    }
}

/// How each layer's FFN executes for a token.
#[derive(Debug, Clone, Copy)]
pub enum FfnPlan<'a> {
    Dense,
    /// Reference path: zero masked entries of `u`. One entry per layer;
    /// `None` runs that layer dense.
    Masked(&'a [Option<NeuronMask>]),
    /// Compacted path: pruned rows/columns deleted. One entry per layer.
    Compacted(&'a [CompactFfn]),
}

/// Immutable model, shareable across generation streams.
#[derive(Debug, Clone)]
pub struct Model {
    weights: ModelWeights,
    exec: Exec,
}

impl Model {
    pub fn new(weights: ModelWeights) -> Self {
        Self {
            weights,
            exec: Exec::default(),
        }
    }

    pub fn with_exec(mut self, exec: Exec) -> Self {
        self.exec = exec;
        self
    }

    pub fn exec(&self) -> Exec {
        self.exec
    }

    pub fn config(&self) -> &ModelConfig {
        &self.weights.config
    }

    pub fn weights(&self) -> &ModelWeights {
        &self.weights
    }

    pub fn new_cache(&self) -> KvCache {
        KvCache::new(self.config())
    }

    /// Builds compacted FFNs for every layer from optional masks.
    pub fn compact(&self, masks: &[Option<NeuronMask>]) -> Result<Vec<CompactFfn>, ModelError> {
        self.check_plan_len(masks.len())?;
        self.weights
            .layers
            .iter()
            .zip(masks)
            .map(|(lw, m)| CompactFfn::new(lw, m.as_ref()))
            .collect()
    }

    pub fn embed(&self, token: u32) -> Result<Vec<f32>, ModelError> {
        let vocab = self.config().vocab_size;
        if token as usize >= vocab {
            return Err(ModelError::TokenOutOfRange { token, vocab });
        }
        Ok(self.weights.embed.row(token as usize).to_vec())
    }

    /// Grouped-query attention for the current token. `x` is the normalized
    /// layer input; its key and value are appended to the cache first, so the
    /// current token attends to itself and every earlier token.
    pub fn attention_step(
        &self,
        layer: usize,
        x: &[f32],
        cache: &mut KvCache,
    ) -> Result<Vec<f32>, ModelError> {
        let c = self.config();
        if cache.layers.len() != c.num_layers
            || cache.layers[layer].len() != c.num_kv_groups
            || cache.head_dim != c.head_dim
        {
            return Err(ModelError::CacheMismatch);
        }
        if cache.len(layer) >= c.max_seq {
            return Err(ModelError::CacheFull(c.max_seq));
        }
        if x.len() != c.hidden_dim {
            return Err(ModelError::Shape(format!(
                "attention input has length {}, expected {}",
                x.len(),
                c.hidden_dim
            )));
        }
        let lw = &self.weights.layers[layer];
        let exec = self.exec;
        opcount::scoped(OpKind::Attention, || {
            for g in 0..c.num_kv_groups {
                let k = linalg::vecmat_exec(exec, x, &lw.w_k[g])?;
                let v = linalg::vecmat_exec(exec, x, &lw.w_v[g])?;
                let group = &mut cache.layers[layer][g];
                group.keys.extend_from_slice(&k);
                group.values.extend_from_slice(&v);
            }
            let t = cache.len(layer);
            let scale = 1.0 / (c.head_dim as f32).sqrt();
            let mut heads = Vec::with_capacity(c.num_heads * c.head_dim);
            for h in 0..c.num_heads {
                let g = c.group_of(h);
                let q = linalg::vecmat_exec(exec, x, &lw.w_q[h])?;
                let scores = (0..t)
                    .map(|i| Ok(linalg::dot_f32(&q, cache.key(layer, g, i))? * scale))
                    .collect::<Result<Vec<_>, ModelError>>()?;
                let weights = linalg::softmax(&scores)?;
                let mut out = vec![0.0f32; c.head_dim];
                for (i, &w) in weights.iter().enumerate() {
                    linalg::axpy(w, cache.value(layer, g, i), &mut out)?;
                }
                heads.extend(out);
            }
            Ok(linalg::vecmat_exec(exec, &heads, &lw.w_o)?)
        })
    }

    /// Gated FFN with residual. `y` is the raw (un-normalized) block input.
    pub fn ffn_step(
        &self,
        layer: usize,
        y: &[f32],
        mask: Option<&NeuronMask>,
    ) -> Result<FfnOutput, ModelError> {
        let c = self.config();
        if let Some(mask) = mask {
            if mask.len() != c.ffn_dim {
                return Err(ModelError::MaskLength {
                    expected: c.ffn_dim,
                    got: mask.len(),
                });
            }
        }
        if y.len() != c.hidden_dim {
            return Err(ModelError::Shape(format!(
                "FFN input has length {}, expected {}",
                y.len(),
                c.hidden_dim
            )));
        }
        let lw = &self.weights.layers[layer];
        let exec = self.exec;
        let yn = linalg::rms_norm(y);
        let (u, delta) = opcount::scoped(OpKind::Mlp, || -> Result<_, ModelError> {
            let up = linalg::vecmat_exec(exec, &yn, &lw.w_up)?;
            let gate = linalg::silu(&linalg::vecmat_exec(exec, &yn, &lw.w_gate)?);
            let u = linalg::hadamard(&up, &gate)?;
            let delta = match mask {
                None => linalg::vecmat_exec(exec, &u, &lw.w_down)?,
                Some(mask) => {
                    let masked: Vec<f32> = u
                        .iter()
                        .zip(mask.bits())
                        .map(|(&v, &keep)| if keep { v } else { 0.0 })
                        .collect();
                    linalg::vecmat_exec(exec, &masked, &lw.w_down)?
                }
            };
            Ok((u, delta))
        })?;
        Ok(FfnOutput {
            u,
            z: linalg::add(y, &delta)?,
        })
    }

    pub fn forward_token(
        &self,
        token: u32,
        cache: &mut KvCache,
        plan: FfnPlan<'_>,
    ) -> Result<(Vec<f32>, StepTrace), ModelError> {
        let x = self.embed(token)?;
        self.forward_embedded(x, cache, plan)
    }

    /// Forward pass from an already-embedded input vector.
    pub fn forward_embedded(
        &self,
        x: Vec<f32>,
        cache: &mut KvCache,
        plan: FfnPlan<'_>,
    ) -> Result<(Vec<f32>, StepTrace), ModelError> {
        let c = self.config();
        match plan {
            FfnPlan::Dense => {}
            FfnPlan::Masked(m) => self.check_plan_len(m.len())?,
            FfnPlan::Compacted(m) => self.check_plan_len(m.len())?,
        }
        let mut h = x;
        let mut layers = Vec::with_capacity(c.num_layers);
        for l in 0..c.num_layers {
            let attn = self.attention_step(l, &linalg::rms_norm(&h), cache)?;
            let y = linalg::add(&h, &attn)?;
            let ffn = match plan {
                FfnPlan::Dense => self.ffn_step(l, &y, None)?,
                FfnPlan::Masked(masks) => self.ffn_step(l, &y, masks[l].as_ref())?,
                FfnPlan::Compacted(ffns) => ffns[l].step(self.exec, &y)?,
            };
            h = ffn.z.clone();
            layers.push(LayerTrace {
                attn,
                y,
                u: ffn.u,
                z: ffn.z,
            });
        }
        let logits = linalg::vecmat_exec(self.exec, &linalg::rms_norm(&h), &self.weights.unembed)?;
        Ok((logits, StepTrace { layers }))
    }

    /// Greedy continuation of `prompt` by `n` tokens with a fixed FFN plan.
    pub fn greedy_decode(
        &self,
        prompt: &[u32],
        n: usize,
        plan: FfnPlan<'_>,
    ) -> Result<Vec<u32>, ModelError> {
        if prompt.is_empty() {
            return Err(ModelError::EmptyPrompt);
        }
        let mut cache = self.new_cache();
        let mut logits = Vec::new();
        for &tok in prompt {
            logits = self.forward_token(tok, &mut cache, plan)?.0;
        }
        let mut out = Vec::with_capacity(n);
        for i in 0..n {
            let next = argmax(&logits);
            out.push(next);
            if i + 1 < n {
                logits = self.forward_token(next, &mut cache, plan)?.0;
            }
        }
        Ok(out)
    }

    fn check_plan_len(&self, n: usize) -> Result<(), ModelError> {
        if n != self.config().num_layers {
            return Err(ModelError::Shape(format!(
                "{n} FFN plan entries for {} layers",
                self.config().num_layers
            )));
        }
        Ok(())
    }
}

/// Index of the largest logit; ties go to the lower index.
pub fn argmax(v: &[f32]) -> u32 {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best as u32
}
