//! End-to-end runs of the generation, sweep and plotting pipeline.

use dart_core::harness::{
    load_model, parse_trace, plot_text, run_generate, run_layer_sweep, HarnessError, RebuildReason,
    RunConfig,
};

fn two_regime(seed: u64) -> RunConfig {
    let mut cfg = RunConfig {
        seed,
        gen_len: 300,
        ..RunConfig::default()
    };
    cfg.allocator.rho = 0.5;
    cfg.workload.regimes = 2;
    cfg.workload.switch_points = vec![200];
    cfg
}

#[test]
fn zero_sparsity_matches_dense_tokens() {
    for seed in 0..3 {
        let mut cfg = RunConfig {
            seed,
            gen_len: 120,
            ..RunConfig::default()
        };
        cfg.allocator.rho = 0.0;
        let model = load_model(&cfg).unwrap();
        let pruned = run_generate(&model, &cfg).unwrap();
        cfg.prune = false;
        let dense = run_generate(&model, &cfg).unwrap();
        assert_eq!(
            pruned.summary.generated, dense.summary.generated,
            "seed {seed}"
        );
    }
}

#[test]
fn replay_from_trace_header_is_byte_identical() {
    let cfg = two_regime(7);
    let first = run_generate(&load_model(&cfg).unwrap(), &cfg)
        .unwrap()
        .trace_jsonl();
    let (header, _) = parse_trace(&first).unwrap();
    let again = run_generate(&load_model(&header.config).unwrap(), &header.config).unwrap();
    assert_eq!(again.trace_jsonl(), first);
}

#[test]
fn summary_counts_match_trace_flags() {
    let cfg = two_regime(3);
    let out = run_generate(&load_model(&cfg).unwrap(), &cfg).unwrap();
    let (_, records) = parse_trace(&out.trace_jsonl()).unwrap();
    let events = records.iter().filter(|r| r.event).count();
    let triggers = records.iter().filter(|r| r.triggered).count();
    let windows = records.iter().filter(|r| r.alignment.is_some()).count();
    assert_eq!(out.summary.reprune_events, events);
    assert_eq!(out.summary.triggers, triggers);
    assert_eq!(out.summary.windows, windows);
    assert_eq!(
        out.summary.rebuilds,
        records.iter().filter(|r| r.rebuild.is_some()).count()
    );
    let drift_rebuilds = out
        .rebuilds()
        .filter(|(_, b)| b.reason == RebuildReason::Drift)
        .count();
    assert!(drift_rebuilds == events || drift_rebuilds + 1 == events);
}

#[test]
fn regime_switch_reprunes_within_bound() {
    for seed in 0..5 {
        let cfg = two_regime(seed);
        let model = load_model(&cfg).unwrap();
        let out = run_generate(&model, &cfg).unwrap();
        let bound = 200 + (cfg.drift.c0 as usize + 1) * cfg.drift.window;
        let event = out
            .records
            .iter()
            .find(|r| r.event && (200..bound).contains(&r.t));
        let event = event.unwrap_or_else(|| panic!("seed {seed}: no event in 200..{bound}"));
        let ffn = model.config().ffn_dim;
        let before = out
            .rebuilds()
            .filter(|(t, _)| *t < event.t)
            .last()
            .unwrap()
            .1;
        let after = out.rebuilds().find(|(t, _)| *t > event.t).unwrap().1;
        let (b, a) = (
            before.decode_masks(ffn).unwrap(),
            after.decode_masks(ffn).unwrap(),
        );
        assert!(
            b.iter().zip(&a).any(|(x, y)| x != y),
            "seed {seed}: masks unchanged"
        );
    }
}

/// A single-regime workload at ρ = 0.5 produces no reprune
/// events over 500 generated tokens.
#[test]
fn stationary_workload_never_reprunes() {
    let mut cfg = RunConfig {
        seed: 0,
        gen_len: 500,
        ..RunConfig::default()
    };
    cfg.allocator.rho = 0.5;
    let out = run_generate(&load_model(&cfg).unwrap(), &cfg).unwrap();
    assert_eq!(
        out.summary.reprune_events,
        0,
        "events at {:?}",
        out.records
            .iter()
            .filter(|r| r.event)
            .map(|r| r.t)
            .collect::<Vec<_>>()
    );
}

/// First window closed after each rebuild sits within 2σ of the new
/// reference mean, in the median over rebuilds and seeds.
#[test]
fn first_window_after_rebuild_is_near_new_reference() {
    let mut z = Vec::new();
    for seed in 0..5 {
        let cfg = two_regime(seed);
        let out = run_generate(&load_model(&cfg).unwrap(), &cfg).unwrap();
        for (t, b) in out.rebuilds() {
            if !b.reference_set {
                continue;
            }
            if let Some(r) = out
                .records
                .iter()
                .find(|r| r.t > t && r.alignment.is_some())
            {
                let (a, mu, sigma) = (r.alignment.unwrap(), r.mu.unwrap(), r.sigma.unwrap());
                z.push(if sigma > 0.0 {
                    ((a - mu) / sigma).abs()
                } else {
                    0.0
                });
            }
        }
    }
    z.sort_by(f64::total_cmp);
    let median = z[z.len() / 2];
    assert!(
        median <= 2.0,
        "median |z| {median:.2} over {} rebuilds: {z:?}",
        z.len()
    );
}

#[test]
fn zero_ratio_sweep_has_no_divergence() {
    let mut cfg = RunConfig {
        seed: 1,
        ..RunConfig::default()
    };
    cfg.sweep.ratios = vec![0.0];
    let model = load_model(&cfg).unwrap();
    let rep = run_layer_sweep(&model, &cfg).unwrap();
    assert_eq!(rep.rows.len(), model.config().num_layers);
    for row in &rep.rows {
        assert_eq!(row.kl, 0.0);
        assert_eq!(row.match_len, cfg.sweep.continuation);
    }
    let csv = rep.to_csv();
    assert_eq!(csv.lines().count(), 1 + model.config().num_layers);
}

#[test]
fn most_sensitive_layer_diverges_at_least_as_much() {
    for seed in 0..4 {
        let cfg = RunConfig {
            seed,
            ..RunConfig::default()
        };
        let rep = run_layer_sweep(&load_model(&cfg).unwrap(), &cfg).unwrap();
        let by_s = |hi: bool| {
            rep.rows
                .iter()
                .max_by(|a, b| {
                    let o = a.mean_sensitivity.total_cmp(&b.mean_sensitivity);
                    if hi {
                        o
                    } else {
                        o.reverse()
                    }
                })
                .unwrap()
        };
        let (hi, lo) = (by_s(true), by_s(false));
        assert!(
            hi.kl >= lo.kl,
            "seed {seed}: layer {} kl {} < layer {} kl {}",
            hi.layer,
            hi.kl,
            lo.layer,
            lo.kl
        );
    }
}

#[test]
fn plot_reports_malformed_line_number() {
    let cfg = RunConfig {
        gen_len: 20,
        ..RunConfig::default()
    };
    let trace = run_generate(&load_model(&cfg).unwrap(), &cfg)
        .unwrap()
        .trace_jsonl();
    let mut lines: Vec<&str> = trace.lines().collect();
    lines[5] = "{\"type\": \"token\", \"t\": oops}";
    match plot_text(&lines.join("\n")) {
        Err(HarnessError::Trace { line, .. }) => assert_eq!(line, 6),
        other => panic!("expected a trace error, got {:?}", other.map(|(k, _)| k)),
    }
    assert!(plot_text(&trace).is_ok());
}
