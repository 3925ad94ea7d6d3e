use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::config::{DetectParams, RunConfig};
use super::workload::unit_gaussian;
use super::{derive_seed, streams, HarnessError, Result};
use crate::exec::{map_indices, Exec};
use crate::tracer::{DriftParams, DriftState};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Before,
    After,
}

/// One closed detection window.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowPoint {
    pub run: usize,
    pub window: usize,
    /// Stream position one past the window's last token.
    pub token_end: usize,
    pub phase: Phase,
    pub alignment: f64,
    pub mu: f64,
    pub sigma: f64,
    pub triggered: bool,
    pub counter: u32,
    pub event: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorRun {
    pub run: usize,
    pub false_triggers: usize,
    pub false_events: usize,
    /// Tokens from the switch until the first event closes, if any.
    pub delay: Option<usize>,
    pub windows: Vec<WindowPoint>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorReport {
    pub seed: u64,
    pub drift: DriftParams,
    pub detect: DetectParams,
    pub runs: Vec<DetectorRun>,
    pub runs_without_false_events: usize,
    /// Runs whose switch produced an event (0 for stationary streams).
    pub detected: usize,
    pub max_delay: Option<usize>,
    pub mean_delay: Option<f64>,
    /// Triggers per pre-switch window.
    pub false_trigger_rate: f64,
    /// Events per pre-switch window.
    pub false_event_rate: f64,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
enum TrajectoryLine {
    Detector {
        seed: u64,
        drift: DriftParams,
        detect: DetectParams,
    },
    Window(WindowPoint),
}

impl DetectorReport {
    /// Header plus one line per window across all runs.
    pub fn trajectory_jsonl(&self) -> String {
        let mut out = String::new();
        let mut push = |l: &TrajectoryLine| {
            out.push_str(&serde_json::to_string(l).expect("trajectory serializes"));
            out.push('\n');
        };
        push(&TrajectoryLine::Detector {
            seed: self.seed,
            drift: self.drift,
            detect: self.detect.clone(),
        });
        for r in &self.runs {
            for w in &r.windows {
                push(&TrajectoryLine::Window(w.clone()));
            }
        }
        out
    }
}

fn summarize_run(run: usize, windows: Vec<WindowPoint>, tau: usize) -> DetectorRun {
    let before = windows.iter().filter(|w| w.phase == Phase::Before);
    let false_triggers = before.clone().filter(|w| w.triggered).count();
    let false_events = before.filter(|w| w.event).count();
    let delay = windows
        .iter()
        .filter(|w| w.phase == Phase::After)
        .position(|w| w.event)
        .map(|i| (i + 1) * tau);
    DetectorRun {
        run,
        false_triggers,
        false_events,
        delay,
        windows,
    }
}

fn aggregate(
    seed: u64,
    drift: DriftParams,
    detect: DetectParams,
    runs: Vec<DetectorRun>,
) -> DetectorReport {
    let before_windows = (runs.len() * detect.windows_before).max(1) as f64;
    let delays: Vec<usize> = runs.iter().filter_map(|r| r.delay).collect();
    DetectorReport {
        seed,
        runs_without_false_events: runs.iter().filter(|r| r.false_events == 0).count(),
        detected: delays.len(),
        max_delay: delays.iter().copied().max(),
        mean_delay: (!delays.is_empty())
            .then(|| delays.iter().sum::<usize>() as f64 / delays.len() as f64),
        false_trigger_rate: runs.iter().map(|r| r.false_triggers).sum::<usize>() as f64
            / before_windows,
        false_event_rate: runs.iter().map(|r| r.false_events).sum::<usize>() as f64
            / before_windows,
        drift,
        detect,
        runs,
    }
}

/// One synthetic stream: a reference span and `windows_before` windows
/// around centroid A, then `windows_after` windows around a centroid
/// orthogonal to A. Token noise has norm ≈ `noise·‖A‖`.
fn run_stream(seed: u64, run: usize, drift: &DriftParams, p: &DetectParams) -> Result<DetectorRun> {
    let mut rng =
        ChaCha8Rng::seed_from_u64(derive_seed(derive_seed(seed, streams::DETECT), run as u64));
    let a = unit_gaussian(&mut rng, p.dim);
    let raw = unit_gaussian(&mut rng, p.dim);
    let proj: f32 = raw.iter().zip(&a).map(|(x, y)| x * y).sum();
    let b_dir: Vec<f32> = raw.iter().zip(&a).map(|(x, y)| x - proj * y).collect();
    let bn = b_dir.iter().map(|x| x * x).sum::<f32>().sqrt();
    let b: Vec<f32> = b_dir.iter().map(|x| x / bn).collect();
    let scale = p.noise / (p.dim as f64).sqrt();
    let draw = |c: &[f32], rng: &mut ChaCha8Rng| -> Vec<f32> {
        c.iter()
            .map(|&x| {
                let e: f64 = StandardNormal.sample(rng);
                (x as f64 + scale * e) as f32
            })
            .collect()
    };

    let mut state = DriftState::new(*drift)?;
    let t_ref = drift.reference_len();
    let reference: Vec<Vec<f32>> = (0..t_ref).map(|_| draw(&a, &mut rng)).collect();
    state.set_reference(&reference)?;
    let stats = state.reference().expect("just set").clone();
    let mut windows = Vec::new();
    let total = (p.windows_before + p.windows_after) * drift.window;
    for i in 0..total {
        let w_idx = i / drift.window;
        let phase = if w_idx < p.windows_before {
            Phase::Before
        } else {
            Phase::After
        };
        let centre = if phase == Phase::Before { &a } else { &b };
        let y = draw(centre, &mut rng);
        if let Some(rep) = state.step(&y)? {
            windows.push(WindowPoint {
                run,
                window: w_idx,
                token_end: t_ref + i + 1,
                phase,
                alignment: rep.alignment,
                mu: stats.mu,
                sigma: stats.sigma,
                triggered: rep.triggered,
                counter: rep.counter,
                event: rep.event,
            });
        }
    }
    Ok(summarize_run(run, windows, drift.window))
}

/// Detection delay and false-trigger statistics over `detect.runs` seeds.
pub fn run_detector_bench(cfg: &RunConfig, exec: Exec) -> Result<DetectorReport> {
    cfg.validate()?;
    let p = cfg.detect.clone();
    let runs = map_indices(exec, p.runs, |r| run_stream(cfg.seed, r, &cfg.drift, &p));
    let runs = runs.into_iter().collect::<Result<Vec<_>>>()?;
    Ok(aggregate(cfg.seed, cfg.drift, p, runs))
}

/// Recomputes the report from a trajectory file.
pub fn metrics_from_trajectory(text: &str) -> Result<DetectorReport> {
    let mut head = None;
    let mut windows: Vec<WindowPoint> = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parsed: TrajectoryLine =
            serde_json::from_str(line).map_err(|e| HarnessError::Trace {
                line: i + 1,
                msg: e.to_string(),
            })?;
        match parsed {
            TrajectoryLine::Detector {
                seed,
                drift,
                detect,
            } if head.is_none() => head = Some((seed, drift, detect)),
            TrajectoryLine::Window(w) if head.is_some() => windows.push(w),
            _ => {
                return Err(HarnessError::Trace {
                    line: i + 1,
                    msg: "unexpected line".into(),
                })
            }
        }
    }
    let (seed, drift, detect) = head.ok_or(HarnessError::Trace {
        line: 1,
        msg: "missing detector header".into(),
    })?;
    let runs = (0..detect.runs)
        .map(|r| {
            summarize_run(
                r,
                windows.iter().filter(|w| w.run == r).cloned().collect(),
                drift.window,
            )
        })
        .collect();
    Ok(aggregate(seed, drift, detect, runs))
}
