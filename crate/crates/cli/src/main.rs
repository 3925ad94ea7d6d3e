use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use dart_core::costmodel::{self, CostDims, CostError, Precision, Preset, Workload};
use dart_core::harness::{
    heatmap_svg, load_model, parse_trace, plot_file, run_detector_bench, run_generate,
    run_layer_sweep, HarnessError, ModelSource, RunConfig,
};
use dart_core::Exec;

#[derive(Parser)]
#[command(
    name = "dart",
    version,
    about = "Dynamic FFN pruning with drift-triggered re-pruning on a toy transformer"
)]
struct Cli {
    /// Run every kernel on the calling thread.
    #[arg(long, global = true)]
    sequential: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Decode with pruning and drift tracing; writes a JSONL trace.
    Generate(GenerateArgs),
    /// Prune one layer at a time and measure divergence from dense.
    Sweep(SweepArgs),
    /// Detection delay and false-trigger statistics on synthetic streams.
    Detect(DetectArgs),
    /// Analytic FLOP and memory-traffic comparison, dense vs pruned.
    Cost(CostArgs),
    /// Render SVG plots from a trace, detector trajectory or sweep CSV.
    Plot(PlotArgs),
    /// Write synthetic weights to a model file.
    SynthModel(SynthArgs),
}

#[derive(Args)]
struct Common {
    /// TOML run configuration; defaults apply to anything it omits.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Overrides the config seed and DART_SEED.
    #[arg(long)]
    seed: Option<u64>,
    /// Global target sparsity.
    #[arg(long)]
    rho: Option<f64>,
}

#[derive(Args)]
struct GenerateArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    gen_len: Option<usize>,
    #[arg(long)]
    temperature: Option<f64>,
    /// Dense baseline: never build masks.
    #[arg(long)]
    dense: bool,
    /// Keep the first masks for the whole run.
    #[arg(long)]
    no_drift: bool,
    /// Weight file instead of synthetic weights.
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    trace: Option<PathBuf>,
    #[arg(long)]
    summary: Option<PathBuf>,
    /// Rerun the configuration recorded in an existing trace; other
    /// config flags are ignored.
    #[arg(long, conflicts_with = "config")]
    replay: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    common: Common,
    /// Per-layer pruning ratios, comma separated.
    #[arg(long, value_delimiter = ',')]
    ratios: Option<Vec<f64>>,
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    csv: Option<PathBuf>,
    #[arg(long)]
    heatmap: Option<PathBuf>,
}

#[derive(Args)]
struct DetectArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    runs: Option<usize>,
    #[arg(long)]
    noise: Option<f64>,
    /// Windows after the switch; 0 gives stationary streams.
    #[arg(long)]
    windows_after: Option<usize>,
    #[arg(long)]
    trajectory: Option<PathBuf>,
    /// Metrics as JSON.
    #[arg(long)]
    json: Option<PathBuf>,
}

#[derive(Args)]
struct CostArgs {
    /// llama70b, llama8b or toy.
    #[arg(long, default_value = "llama70b")]
    preset: String,
    /// Uniform FFN pruning ratio.
    #[arg(long, default_value_t = 0.7)]
    rho: f64,
    #[arg(long, default_value_t = 1)]
    weight_bytes: u8,
    #[arg(long, default_value_t = 2)]
    activation_bytes: u8,
    /// Tokens per measurement; defaults to the preset's calibrated batch.
    #[arg(long)]
    tokens: Option<u64>,
    /// Cached tokens before the measurement.
    #[arg(long, default_value_t = 0)]
    context: u64,
    /// Writes the full comparison as JSON.
    #[arg(long)]
    json: Option<PathBuf>,
}

#[derive(Args)]
struct PlotArgs {
    input: PathBuf,
    #[arg(long, default_value = "plots")]
    out_dir: PathBuf,
}

#[derive(Args)]
struct SynthArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, short)]
    out: PathBuf,
}

#[derive(Debug)]
enum Failure {
    Harness(HarnessError),
    Cost(CostError),
    Io(String),
}

impl Failure {
    fn exit_code(&self) -> u8 {
        match self {
            Failure::Harness(e) => e.exit_code() as u8,
            Failure::Cost(CostError::Keep(_)) => 3,
            Failure::Cost(_) => 2,
            Failure::Io(_) => 1,
        }
    }
}

impl std::fmt::Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Failure::Harness(e) => write!(f, "{e}"),
            Failure::Cost(e) => write!(f, "{e}"),
            Failure::Io(e) => write!(f, "{e}"),
        }
    }
}

impl From<HarnessError> for Failure {
    fn from(e: HarnessError) -> Self {
        Failure::Harness(e)
    }
}

impl From<CostError> for Failure {
    fn from(e: CostError) -> Self {
        Failure::Cost(e)
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Io(e.to_string())
    }
}

type Result<T> = std::result::Result<T, Failure>;

/// File, then DART_SEED, then flags.
fn load_config(c: &Common) -> Result<RunConfig> {
    let mut cfg = match &c.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    cfg.apply_env()?;
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    if let Some(r) = c.rho {
        cfg.allocator.rho = r;
    }
    Ok(cfg)
}

fn use_model_file(cfg: &mut RunConfig, path: &Option<PathBuf>) {
    if let Some(p) = path {
        cfg.model.source = ModelSource::File;
        cfg.model.path = Some(p.clone());
    }
}

fn write_out(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, text).map_err(|e| Failure::Io(format!("{}: {e}", path.display())))
}

fn generate(a: GenerateArgs, exec: Exec) -> Result<()> {
    let cfg = match &a.replay {
        Some(p) => {
            let text =
                fs::read_to_string(p).map_err(|e| Failure::Io(format!("{}: {e}", p.display())))?;
            parse_trace(&text)?.0.config
        }
        None => {
            let mut cfg = load_config(&a.common)?;
            cfg.gen_len = a.gen_len.unwrap_or(cfg.gen_len);
            cfg.temperature = a.temperature.unwrap_or(cfg.temperature);
            cfg.prune &= !a.dense;
            cfg.drift_tracing &= !a.no_drift;
            use_model_file(&mut cfg, &a.model);
            cfg
        }
    };
    let model = load_model(&cfg)?.with_exec(exec);
    let out = run_generate(&model, &cfg)?;
    let summary = serde_json::to_string_pretty(&out.summary).expect("summary serializes");
    match a.trace.or(cfg.output.trace.clone()) {
        Some(p) => write_out(&p, &out.trace_jsonl())?,
        None => print!("{}", out.trace_jsonl()),
    }
    match a.summary.or(cfg.output.summary.clone()) {
        Some(p) => write_out(&p, &summary)?,
        None => eprintln!("{summary}"),
    }
    Ok(())
}

fn sweep(a: SweepArgs, exec: Exec) -> Result<()> {
    let mut cfg = load_config(&a.common)?;
    if let Some(r) = a.ratios {
        cfg.sweep.ratios = r;
    }
    use_model_file(&mut cfg, &a.model);
    let model = load_model(&cfg)?.with_exec(exec);
    let rep = run_layer_sweep(&model, &cfg)?;
    match a.csv.or(cfg.output.csv.clone()) {
        Some(p) => write_out(&p, &rep.to_csv())?,
        None => print!("{}", rep.to_csv()),
    }
    if let Some(p) = a.heatmap.or(cfg.output.heatmap.clone()) {
        write_out(&p, &heatmap_svg(&rep.rows))?;
    }
    Ok(())
}

fn detect(a: DetectArgs, exec: Exec) -> Result<()> {
    let mut cfg = load_config(&a.common)?;
    cfg.detect.runs = a.runs.unwrap_or(cfg.detect.runs);
    cfg.detect.noise = a.noise.unwrap_or(cfg.detect.noise);
    cfg.detect.windows_after = a.windows_after.unwrap_or(cfg.detect.windows_after);
    let rep = run_detector_bench(&cfg, exec)?;
    if let Some(p) = a.trajectory.or(cfg.output.trajectory.clone()) {
        write_out(&p, &rep.trajectory_jsonl())?;
    }
    let metrics = serde_json::json!({
        "runs": rep.runs.len(),
        "detected": rep.detected,
        "max_delay": rep.max_delay,
        "mean_delay": rep.mean_delay,
        "runs_without_false_events": rep.runs_without_false_events,
        "false_trigger_rate": rep.false_trigger_rate,
        "false_event_rate": rep.false_event_rate,
    });
    let text = serde_json::to_string_pretty(&metrics).expect("metrics serialize");
    match a.json.or(cfg.output.json.clone()) {
        Some(p) => write_out(&p, &text)?,
        None => println!("{text}"),
    }
    Ok(())
}

/// Dense MLP traffic per layer the batch is calibrated to, in GiB.
fn anchor_gib(preset: Preset) -> Option<f64> {
    match preset {
        Preset::Llama70b => Some(53.91),
        Preset::Llama8b => Some(5.53),
        Preset::Toy => None,
    }
}

fn cost(a: CostArgs) -> Result<()> {
    let preset: Preset = a.preset.parse()?;
    let dims: CostDims = preset.dims();
    let precision = Precision {
        weight_bytes: a.weight_bytes,
        activation_bytes: a.activation_bytes,
    };
    precision.validate()?;
    let tokens = match (a.tokens, anchor_gib(preset)) {
        (Some(t), _) => t,
        (None, Some(g)) => costmodel::calibrate_tokens(&dims, precision, g)?.round() as u64,
        (None, None) => 128,
    };
    let w = Workload {
        tokens,
        context: a.context,
        precision,
    };
    let c = costmodel::report(preset.name(), dims, w, &vec![a.rho; dims.num_layers])?;
    print!("{}", c.to_table());
    if let Some(p) = a.json {
        write_out(&p, &c.to_json())?;
    }
    Ok(())
}

fn synth_model(a: SynthArgs) -> Result<()> {
    let mut cfg = load_config(&a.common)?;
    cfg.model.source = ModelSource::Synth;
    let model = load_model(&cfg)?;
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let file =
        fs::File::create(&a.out).map_err(|e| Failure::Io(format!("{}: {e}", a.out.display())))?;
    model
        .weights()
        .write_to(BufWriter::new(file))
        .map_err(HarnessError::from)?;
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let exec = if cli.sequential {
        Exec::Sequential
    } else {
        Exec::Parallel
    };
    match cli.command {
        Command::Generate(a) => generate(a, exec),
        Command::Sweep(a) => sweep(a, exec),
        Command::Detect(a) => detect(a, exec),
        Command::Cost(a) => cost(a),
        Command::Plot(a) => {
            for p in plot_file(&a.input, &a.out_dir)? {
                println!("{}", p.display());
            }
            Ok(())
        }
        Command::SynthModel(a) => synth_model(a),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
