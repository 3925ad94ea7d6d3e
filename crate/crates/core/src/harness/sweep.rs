use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use super::generate::run_generate;
use super::workload::Workload;
use super::Result;
use crate::allocator::{mean_sensitivity, sensitivity};
use crate::exec::map_indices;
use crate::linalg;
use crate::model::{argmax, FfnPlan, KvCache, Model};
use crate::pruner::{ImportanceAccumulator, NeuronMask};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub layer: usize,
    pub ratio: f64,
    pub mean_sensitivity: f64,
    /// Mean KL(dense ‖ pruned) over the continuation positions.
    pub kl: f64,
    /// Leading greedy tokens shared with the dense continuation.
    pub match_len: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub continuation: usize,
    pub rows: Vec<SweepRow>,
}

impl SweepReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("layer,ratio,mean_sensitivity,kl,match_len\n");
        for r in &self.rows {
            s.push_str(&format!(
                "{},{},{},{},{}\n",
                r.layer, r.ratio, r.mean_sensitivity, r.kl, r.match_len
            ));
        }
        s
    }
}

fn log_softmax(logits: &[f32]) -> Vec<f64> {
    let max = logits.iter().fold(f32::NEG_INFINITY, |a, &b| a.max(b)) as f64;
    let lse = logits
        .iter()
        .map(|&l| (l as f64 - max).exp())
        .sum::<f64>()
        .ln()
        + max;
    logits.iter().map(|&l| l as f64 - lse).collect()
}

/// KL(p ‖ q) between the softmax distributions of two logit vectors.
pub fn kl_divergence(p_logits: &[f32], q_logits: &[f32]) -> f64 {
    let lp = log_softmax(p_logits);
    let lq = log_softmax(q_logits);
    lp.iter()
        .zip(&lq)
        .map(|(a, b)| a.exp() * (a - b))
        .sum::<f64>()
        .max(0.0)
}

struct Inputs<'a> {
    model: &'a Model,
    workload: Workload,
}

impl Inputs<'_> {
    fn at(&self, t: usize, token: u32) -> Result<Vec<f32>> {
        let bias = self.workload.bias(t, self.workload.regime_at(t));
        Ok(linalg::add(&self.model.embed(token)?, &bias).expect("bias matches hidden size"))
    }
}

/// Prunes one layer at a time to each configured ratio and measures the
/// output divergence from dense decoding.
///
/// The context is a dense run of `T` positions (prompt plus sampled tokens);
/// masks come from importance over that context, and both the dense and the
/// pruned model then continue greedily.
pub fn run_layer_sweep(model: &Model, cfg: &RunConfig) -> Result<SweepReport> {
    let c = *model.config();
    let n_ctx = cfg.drift.reference_len().max(cfg.prompt.len());
    let cont = cfg.sweep.continuation.max(1);
    let mut base = cfg.clone();
    base.prune = false;
    base.gen_len = n_ctx - cfg.prompt.len();
    base.validate()?;
    let mut probe = base.clone();
    probe.gen_len += cont;
    probe.validate_for(&c)?;

    let ctx: Vec<u32> = run_generate(model, &base)?
        .records
        .iter()
        .map(|r| r.token)
        .collect();
    let inputs = Inputs {
        model,
        workload: Workload::new(cfg.workload.clone(), c.hidden_dim, cfg.seed)?,
    };

    // Dense pass over the context: importance and sensitivity statistics.
    let mut accs: Vec<ImportanceAccumulator> = (0..c.num_layers)
        .map(|l| ImportanceAccumulator::new(l, c.ffn_dim, n_ctx))
        .collect();
    let mut sens = vec![Vec::with_capacity(n_ctx); c.num_layers];
    let mut cache = model.new_cache();
    let mut last = Vec::new();
    for (t, &tok) in ctx.iter().enumerate() {
        let (logits, trace) =
            model.forward_embedded(inputs.at(t, tok)?, &mut cache, FfnPlan::Dense)?;
        for (l, lt) in trace.layers.iter().enumerate() {
            accs[l].accumulate(&lt.u)?;
            sens[l].push(sensitivity(&lt.y, &lt.z)?.value);
        }
        last = logits;
    }
    let mean_sens = sens
        .iter()
        .map(|s| mean_sensitivity(s))
        .collect::<std::result::Result<Vec<_>, _>>()?;

    let continue_greedy = |plan: FfnPlan<'_>,
                           mut cache: KvCache,
                           mut logits: Vec<f32>,
                           forced: Option<&[u32]>|
     -> Result<(Vec<u32>, Vec<Vec<f32>>)> {
        let mut toks = Vec::with_capacity(cont);
        let mut seen = Vec::with_capacity(cont);
        for i in 0..cont {
            seen.push(logits.clone());
            let next = forced.map_or_else(|| argmax(&logits), |f| f[i]);
            toks.push(next);
            if i + 1 < cont {
                logits = model
                    .forward_embedded(inputs.at(n_ctx + i, next)?, &mut cache, plan)?
                    .0;
            }
        }
        Ok((toks, seen))
    };
    let (dense_toks, dense_logits) = continue_greedy(FfnPlan::Dense, cache, last, None)?;

    let ratios = &cfg.sweep.ratios;
    let jobs = c.num_layers * ratios.len();
    let rows = map_indices(model.exec(), jobs, |j| -> Result<SweepRow> {
        let (layer, ratio) = (j / ratios.len(), ratios[j % ratios.len()]);
        let masks: Vec<Option<NeuronMask>> = (0..c.num_layers)
            .map(|l| {
                (l == layer)
                    .then(|| accs[l].mask_for_layer(ratio))
                    .transpose()
            })
            .collect::<std::result::Result<_, _>>()?;
        let ffns = model.compact(&masks)?;
        let plan = FfnPlan::Compacted(&ffns);
        let mut cache = model.new_cache();
        let mut logits = Vec::new();
        for (t, &tok) in ctx.iter().enumerate() {
            logits = model
                .forward_embedded(inputs.at(t, tok)?, &mut cache, plan)?
                .0;
        }
        let (_, forced) = continue_greedy(plan, cache.clone(), logits.clone(), Some(&dense_toks))?;
        let (free, _) = continue_greedy(plan, cache, logits, None)?;
        let kl = dense_logits
            .iter()
            .zip(&forced)
            .map(|(p, q)| kl_divergence(p, q))
            .sum::<f64>()
            / cont as f64;
        let match_len = dense_toks
            .iter()
            .zip(&free)
            .take_while(|(a, b)| a == b)
            .count();
        Ok(SweepRow {
            layer,
            ratio,
            mean_sensitivity: mean_sens[layer],
            kl,
            match_len,
        })
    });
    Ok(SweepReport {
        continuation: cont,
        rows: rows.into_iter().collect::<Result<_>>()?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kl_basics() {
        assert_eq!(kl_divergence(&[0.3, -1.0, 2.0], &[0.3, -1.0, 2.0]), 0.0);
        assert!(kl_divergence(&[5.0, 0.0], &[0.0, 5.0]) > 1.0);
        // Softmax is shift invariant.
        assert!(kl_divergence(&[1.0, 2.0], &[11.0, 12.0]) < 1e-12);
    }
}
