use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::{ModelSource, RunConfig};
use super::trace::{
    to_jsonl, RebuildReason, RebuildRecord, Summary, TokenRecord, TraceHeader, TRACE_FORMAT,
};
use super::workload::Workload;
use super::{derive_seed, streams, HarnessError, Result};
use crate::allocator::{mean_sensitivity, plan_budgets, sensitivity};
use crate::linalg;
use crate::model::{argmax, CompactFfn, FfnPlan, Model, ModelWeights, StepTrace};
use crate::pruner::{ImportanceAccumulator, NeuronMask};
use crate::tracer::DriftState;

/// Builds (synthetic) or reads the configured model and checks the run
/// against it.
pub fn load_model(cfg: &RunConfig) -> Result<Model> {
    cfg.validate()?;
    let weights = match cfg.model.source {
        ModelSource::Synth => {
            ModelWeights::synth(derive_seed(cfg.seed, streams::MODEL), cfg.model.dims)?
        }
        ModelSource::File => {
            let path = cfg.model.path.as_ref().expect("validated");
            let file = std::fs::File::open(path)?;
            ModelWeights::read_from(std::io::BufReader::new(file))?
        }
    };
    cfg.validate_for(&weights.config)?;
    Ok(Model::new(weights))
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenerateOutput {
    pub header: TraceHeader,
    pub records: Vec<TokenRecord>,
    pub summary: Summary,
}

impl GenerateOutput {
    pub fn trace_jsonl(&self) -> String {
        to_jsonl(&self.header, &self.records)
    }

    /// Rebuilds in order with the position whose record carries them.
    pub fn rebuilds(&self) -> impl Iterator<Item = (usize, &RebuildRecord)> {
        self.records
            .iter()
            .filter_map(|r| r.rebuild.as_ref().map(|b| (r.t, b)))
    }
}

/// Statistics of one dense-or-masked position kept for a possible rebuild.
struct TokenStats {
    u: Vec<Vec<f32>>,
    sens: Vec<f64>,
    attn: Vec<f32>,
}

impl TokenStats {
    fn from_trace(trace: StepTrace) -> Result<Self> {
        let sens = trace
            .layers
            .iter()
            .map(|l| Ok(sensitivity(&l.y, &l.z)?.value))
            .collect::<Result<Vec<f64>>>()?;
        let attn = trace.last_attention().to_vec();
        let u = trace.layers.into_iter().map(|l| l.u).collect();
        Ok(Self { u, sens, attn })
    }
}

struct Rebuilt {
    masks: Vec<NeuronMask>,
    record: RebuildRecord,
}

/// Allocates budgets from collected statistics, builds masks, and installs
/// the drift reference when the span covers at least two windows.
fn rebuild(
    cfg: &RunConfig,
    model: &Model,
    stats: &[TokenStats],
    reason: RebuildReason,
    partial: bool,
    drift: &mut DriftState,
) -> Result<Rebuilt> {
    let c = model.config();
    let mean_sens = (0..c.num_layers)
        .map(|l| mean_sensitivity(&stats.iter().map(|s| s.sens[l]).collect::<Vec<_>>()))
        .collect::<std::result::Result<Vec<f64>, _>>()?;
    let (budgets, degenerate) = plan_budgets(&mean_sens, &cfg.allocator)?;
    let masks = (0..c.num_layers)
        .map(|l| {
            let mut acc = ImportanceAccumulator::new(l, c.ffn_dim, stats.len());
            for s in stats {
                acc.accumulate(&s.u[l])?;
            }
            Ok(acc.mask_for_layer(budgets[l].ratio)?)
        })
        .collect::<Result<Vec<_>>>()?;
    let tau = cfg.drift.window;
    let usable = stats.len() / tau * tau;
    let reference_set = usable / tau >= 2;
    if reference_set {
        let attn: Vec<&[f32]> = stats[stats.len() - usable..]
            .iter()
            .map(|s| &s.attn[..])
            .collect();
        drift.set_reference(&attn)?;
    }
    let record = RebuildRecord {
        reason,
        tokens: stats.len(),
        partial,
        degenerate,
        reference_set,
        mean_sensitivity: mean_sens,
        ratios: budgets.iter().map(|b| b.ratio).collect(),
        masks: masks.iter().map(NeuronMask::to_hex).collect(),
    };
    Ok(Rebuilt { masks, record })
}

fn sample(logits: &[f32], temperature: f64, rng: &mut ChaCha8Rng) -> u32 {
    if temperature <= 0.0 {
        return argmax(logits);
    }
    let max = logits.iter().fold(f32::NEG_INFINITY, |a, &b| a.max(b)) as f64;
    let w: Vec<f64> = logits
        .iter()
        .map(|&l| ((l as f64 - max) / temperature).exp())
        .collect();
    match WeightedIndex::new(&w) {
        Ok(dist) => dist.sample(rng) as u32,
        Err(_) => argmax(logits),
    }
}

struct Collection {
    reason: RebuildReason,
    stats: Vec<TokenStats>,
}

/// Runs the full pipeline: dense collection over the first `T` positions,
/// budget and mask build, masked decoding with drift tracking, and
/// re-collection plus rebuild after each drift event.
pub fn run_generate(model: &Model, cfg: &RunConfig) -> Result<GenerateOutput> {
    run_with_regime(model, cfg, None)
}

fn run_with_regime(
    model: &Model,
    cfg: &RunConfig,
    fixed_regime: Option<usize>,
) -> Result<GenerateOutput> {
    cfg.validate()?;
    cfg.validate_for(model.config())?;
    let c = *model.config();
    let workload = Workload::new(cfg.workload.clone(), c.hidden_dim, cfg.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, streams::SAMPLING));
    let mut drift = DriftState::new(cfg.drift)?;
    let big_t = cfg.drift.reference_len();
    let total = cfg.total_tokens();

    let mut cache = model.new_cache();
    let mut compact: Option<(Vec<CompactFfn>, Vec<f64>)> = None;
    let mut collecting = cfg.prune.then(|| Collection {
        reason: RebuildReason::Initial,
        stats: Vec::new(),
    });
    let mut window: Vec<TokenStats> = Vec::new();
    let mut records: Vec<TokenRecord> = Vec::with_capacity(total);
    let mut generated = Vec::new();
    let mut next_input = cfg.prompt[0];

    for t in 0..total {
        let token = if t < cfg.prompt.len() {
            cfg.prompt[t]
        } else {
            next_input
        };
        if t >= cfg.prompt.len() {
            generated.push(token);
        }
        let regime = fixed_regime.unwrap_or_else(|| workload.regime_at(t));
        let x = linalg::add(&model.embed(token)?, &workload.bias(t, regime))
            .expect("bias matches hidden size");
        let masked = compact.as_ref().filter(|_| collecting.is_none());
        let plan = match masked {
            Some((ffns, _)) => FfnPlan::Compacted(ffns),
            None => FfnPlan::Dense,
        };
        let density = match masked {
            Some((_, d)) => d.clone(),
            None => vec![1.0; c.num_layers],
        };
        let (logits, trace) = model.forward_embedded(x, &mut cache, plan)?;
        let stats = TokenStats::from_trace(trace)?;
        let mut rec = TokenRecord {
            t,
            token,
            regime,
            dense: masked.is_none(),
            sensitivity: stats.sens.clone(),
            density,
            alignment: None,
            mu: None,
            sigma: None,
            counter: None,
            triggered: false,
            event: false,
            next: None,
            rebuild: None,
        };

        if let Some(col) = collecting.as_mut() {
            col.stats.push(stats);
            if col.stats.len() == big_t {
                let col = collecting.take().expect("collecting");
                let built = rebuild(cfg, model, &col.stats, col.reason, false, &mut drift)?;
                let ffns =
                    model.compact(&built.masks.iter().cloned().map(Some).collect::<Vec<_>>())?;
                compact = Some((ffns, built.masks.iter().map(NeuronMask::density).collect()));
                rec.rebuild = Some(built.record);
                window.clear();
            }
        } else if compact.is_some() && cfg.drift_tracing && drift.reference().is_some() {
            let attn = stats.attn.clone();
            window.push(stats);
            if let Some(report) = drift.step(&attn)? {
                let reference = drift.reference().expect("checked");
                rec.alignment = Some(report.alignment);
                rec.mu = Some(reference.mu);
                rec.sigma = Some(reference.sigma);
                rec.counter = Some(report.counter);
                rec.triggered = report.triggered;
                rec.event = report.event;
                let spent = std::mem::take(&mut window);
                if report.event {
                    // The triggering window's statistics seed the new span.
                    collecting = Some(Collection {
                        reason: RebuildReason::Drift,
                        stats: spent,
                    });
                }
            }
        }

        if t + 1 < total && t + 1 >= cfg.prompt.len() {
            next_input = sample(&logits, cfg.temperature, &mut rng);
            rec.next = Some(next_input);
        }
        records.push(rec);
    }

    if let Some(col) = collecting.filter(|c| !c.stats.is_empty()) {
        let built = rebuild(cfg, model, &col.stats, col.reason, true, &mut drift)?;
        if let Some(last) = records.last_mut() {
            last.rebuild = Some(built.record);
        }
    }

    let summary = summarize(&records, generated);
    let header = TraceHeader {
        format: TRACE_FORMAT.into(),
        config: cfg.clone(),
    };
    Ok(GenerateOutput {
        header,
        records,
        summary,
    })
}

fn summarize(records: &[TokenRecord], generated: Vec<u32>) -> Summary {
    let masked: Vec<&TokenRecord> = records.iter().filter(|r| !r.dense).collect();
    let mean_density = if masked.is_empty() {
        1.0
    } else {
        masked
            .iter()
            .map(|r| r.density.iter().sum::<f64>() / r.density.len() as f64)
            .sum::<f64>()
            / masked.len() as f64
    };
    Summary {
        tokens: records.len(),
        generated,
        windows: records.iter().filter(|r| r.alignment.is_some()).count(),
        triggers: records.iter().filter(|r| r.triggered).count(),
        reprune_events: records.iter().filter(|r| r.event).count(),
        rebuilds: records.iter().filter(|r| r.rebuild.is_some()).count(),
        partial_rebuild: records
            .iter()
            .any(|r| r.rebuild.as_ref().is_some_and(|b| b.partial)),
        mean_density,
    }
}

/// Masks a fresh dense collection would build if the whole span ran under
/// `regime`: the ground truth a re-prune should move toward.
pub fn collect_oracle_masks(
    model: &Model,
    cfg: &RunConfig,
    regime: usize,
) -> Result<Vec<NeuronMask>> {
    let mut oracle = cfg.clone();
    oracle.prune = true;
    oracle.drift_tracing = false;
    let need = cfg.drift.reference_len();
    oracle.gen_len = need.saturating_sub(oracle.prompt.len());
    if oracle.prompt.len() > need {
        oracle.prompt.truncate(need);
    }
    let out = run_with_regime(model, &oracle, Some(regime))?;
    let (_, first) = out
        .rebuilds()
        .next()
        .ok_or_else(|| HarnessError::Config("oracle span produced no masks".into()))?;
    first.decode_masks(model.config().ffn_dim)
}

/// Jaccard overlap of kept neurons, pooled over layers.
pub fn mask_overlap(a: &[NeuronMask], b: &[NeuronMask]) -> f64 {
    let (mut inter, mut union) = (0usize, 0usize);
    for (x, y) in a.iter().zip(b) {
        inter += x.intersection(y);
        union += x.union(y);
    }
    if union == 0 {
        return 1.0;
    }
    inter as f64 / union as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn small() -> RunConfig {
        let mut cfg = RunConfig::default();
        cfg.model.dims = ModelConfig {
            num_layers: 2,
            hidden_dim: 16,
            ffn_dim: 32,
            num_heads: 2,
            num_kv_groups: 1,
            head_dim: 8,
            vocab_size: 32,
            max_seq: 512,
        };
        cfg.drift.window = 4;
        cfg.drift.ref_windows = 3;
        cfg.gen_len = 40;
        cfg
    }

    #[test]
    fn first_span_is_dense_then_masked() {
        let cfg = small();
        let model = load_model(&cfg).unwrap();
        let out = run_generate(&model, &cfg).unwrap();
        assert_eq!(out.records.len(), 44);
        assert!(out.records[..12].iter().all(|r| r.dense));
        assert!(!out.records[12].dense);
        let (t, first) = out.rebuilds().next().unwrap();
        assert_eq!(
            (t, first.reason, first.tokens),
            (11, RebuildReason::Initial, 12)
        );
        assert_eq!(out.summary.generated.len(), 40);
    }

    #[test]
    fn short_run_flags_partial_rebuild() {
        let mut cfg = small();
        cfg.gen_len = 3;
        let model = load_model(&cfg).unwrap();
        let out = run_generate(&model, &cfg).unwrap();
        let (t, b) = out.rebuilds().next().unwrap();
        assert_eq!(t, 6);
        assert!(b.partial && !b.reference_set);
        assert!(out.summary.partial_rebuild);
    }

    #[test]
    fn dense_baseline_has_no_masks() {
        let mut cfg = small();
        cfg.prune = false;
        let model = load_model(&cfg).unwrap();
        let out = run_generate(&model, &cfg).unwrap();
        assert!(out.records.iter().all(|r| r.dense && r.rebuild.is_none()));
    }

    #[test]
    fn overlap_bounds() {
        let a = vec![NeuronMask::from_bits(0, vec![true, true, false, false])];
        let b = vec![NeuronMask::from_bits(0, vec![false, true, true, false])];
        assert_eq!(mask_overlap(&a, &a), 1.0);
        assert!((mask_overlap(&a, &b) - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn greedy_sampling_is_argmax() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(sample(&[0.1, 2.0, 0.3], 0.0, &mut rng), 1);
    }
}
