//! Independent oracles shared by the property and acceptance suites.
#![allow(dead_code)]

use dart_core::linalg::Matrix;
use dart_core::model::{LayerWeights, ModelConfig, ModelWeights};
use dart_core::pruner::NeuronMask;
use dart_core::tracer::ReferenceStats;

/// Top-k by a stable descending sort: equal scores keep index order.
pub fn topk_oracle(scores: &[f64], k: usize) -> Vec<bool> {
    let mut idx: Vec<(f64, usize)> = scores.iter().copied().zip(0..).collect();
    idx.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
    let mut bits = vec![false; scores.len()];
    for &(_, i) in idx.iter().take(k) {
        bits[i] = true;
    }
    bits
}

/// Fixed point `p_l = clip(λ·w_l, lo, hi)` with `Σ p = target`, by bisection on λ.
pub fn water_fill(weights: &[f64], lo: f64, hi: f64, target: f64) -> Vec<f64> {
    let fill = |lam: f64| -> Vec<f64> { weights.iter().map(|w| (lam * w).clamp(lo, hi)).collect() };
    let (mut a, mut b) = (0.0f64, 1.0f64);
    while fill(b).iter().sum::<f64>() < target {
        b *= 2.0;
        if b > 1e12 {
            break;
        }
    }
    for _ in 0..200 {
        let mid = 0.5 * (a + b);
        if fill(mid).iter().sum::<f64>() < target {
            a = mid;
        } else {
            b = mid;
        }
    }
    fill(0.5 * (a + b))
}

fn cos64(a: &[f32], b: &[f32]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum();
    let na = a.iter().map(|&x| x as f64 * x as f64).sum::<f64>().sqrt();
    let nb = b.iter().map(|&x| x as f64 * x as f64).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    (dot / (na * nb)).clamp(-1.0, 1.0)
}

fn mean_f32(vs: &[Vec<f32>]) -> Vec<f32> {
    let d = vs[0].len();
    (0..d)
        .map(|j| (vs.iter().map(|v| v[j] as f64).sum::<f64>() / vs.len() as f64) as f32)
        .collect()
}

/// Reference statistics by explicit window slicing.
pub fn reference_stats_oracle(vs: &[Vec<f32>], tau: usize) -> ReferenceStats {
    let centroid = mean_f32(vs);
    let k = vs.len() / tau;
    let alignments: Vec<f64> = (0..k)
        .map(|i| cos64(&mean_f32(&vs[i * tau..(i + 1) * tau]), &centroid))
        .collect();
    let mu = alignments.iter().sum::<f64>() / k as f64;
    let sigma = (alignments.iter().map(|a| (a - mu) * (a - mu)).sum::<f64>() / k as f64).sqrt();
    ReferenceStats {
        centroid,
        mu,
        sigma,
        alignments,
    }
}

fn mv(x: &[f64], w: &Matrix) -> Vec<f64> {
    (0..w.cols())
        .map(|j| (0..w.rows()).map(|i| x[i] * w.get(i, j) as f64).sum())
        .collect()
}

fn rms(x: &[f64]) -> Vec<f64> {
    let ms = x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64;
    let s = 1.0 / (ms + 1e-6).sqrt();
    x.iter().map(|v| v * s).collect()
}

fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

/// Logits for every position of `tokens`, recomputing all keys and values
/// from scratch: no cache, no shared code with the engine.
pub fn reference_logits(
    w: &ModelWeights,
    tokens: &[u32],
    masks: Option<&[NeuronMask]>,
) -> Vec<Vec<f64>> {
    let c = w.config;
    let group = c.num_heads / c.num_kv_groups;
    let mut hs: Vec<Vec<f64>> = tokens
        .iter()
        .map(|&t| w.embed.row(t as usize).iter().map(|&v| v as f64).collect())
        .collect();
    for (l, lw) in w.layers.iter().enumerate() {
        let xn: Vec<Vec<f64>> = hs.iter().map(|h| rms(h)).collect();
        let mut next = Vec::with_capacity(hs.len());
        for t in 0..hs.len() {
            let mut heads = Vec::new();
            for h in 0..c.num_heads {
                let g = h / group;
                let q = mv(&xn[t], &lw.w_q[h]);
                let scores: Vec<f64> = (0..=t)
                    .map(|s| {
                        let k = mv(&xn[s], &lw.w_k[g]);
                        q.iter().zip(&k).map(|(a, b)| a * b).sum::<f64>()
                            / (c.head_dim as f64).sqrt()
                    })
                    .collect();
                let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
                let z: f64 = e.iter().sum();
                let mut out = vec![0.0; c.head_dim];
                for s in 0..=t {
                    let v = mv(&xn[s], &lw.w_v[g]);
                    for (o, vi) in out.iter_mut().zip(v) {
                        *o += e[s] / z * vi;
                    }
                }
                heads.extend(out);
            }
            let attn = mv(&heads, &lw.w_o);
            let y: Vec<f64> = hs[t].iter().zip(&attn).map(|(a, b)| a + b).collect();
            let yn = rms(&y);
            let up = mv(&yn, &lw.w_up);
            let gate = mv(&yn, &lw.w_gate);
            let mut u: Vec<f64> = up.iter().zip(&gate).map(|(a, b)| a * silu(*b)).collect();
            if let Some(ms) = masks {
                for (ui, &keep) in u.iter_mut().zip(ms[l].bits()) {
                    if !keep {
                        *ui = 0.0;
                    }
                }
            }
            let down = mv(&u, &lw.w_down);
            next.push(y.iter().zip(&down).map(|(a, b)| a + b).collect());
        }
        hs = next;
    }
    hs.iter().map(|h| mv(&rms(h), &w.unembed)).collect()
}

/// Weights with the FFN reduced to the kept neurons, as a smaller model.
pub fn delete_columns(w: &ModelWeights, masks: &[NeuronMask]) -> ModelWeights {
    let k = masks[0].k();
    let layers: Vec<LayerWeights> = w
        .layers
        .iter()
        .zip(masks)
        .map(|(lw, m)| {
            let kept: Vec<usize> = m.kept_indices().collect();
            LayerWeights {
                w_up: Matrix::from_fn(lw.w_up.rows(), k, |i, j| lw.w_up.get(i, kept[j])),
                w_gate: Matrix::from_fn(lw.w_gate.rows(), k, |i, j| lw.w_gate.get(i, kept[j])),
                w_down: Matrix::from_fn(k, lw.w_down.cols(), |i, j| lw.w_down.get(kept[i], j)),
                ..lw.clone()
            }
        })
        .collect();
    let config = ModelConfig {
        ffn_dim: k,
        ..w.config
    };
    ModelWeights::new(config, w.embed.clone(), layers, w.unembed.clone()).unwrap()
}
