use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use temporal_rebalance::config::{
    base_config, parse_epsilon, parse_values, parse_window, parse_windows, ConfigFile, Window,
};
use temporal_rebalance::harness::{
    self, AnalyzeSpec, BlackFrameSpec, CaptureSpec, MaskStudySpec, ReplaySetting, ReplaySpec,
    SimulateSpec, StatsLayers,
};
use temporal_rebalance::toy::{self, Generator, ToySpec, DEFAULT_DELTA, DEFAULT_LOGIT_OFFSET};
use temporal_rebalance::{Error, Result};
use temporal_rebalance_core::dtr::Preset;

/// `println!` that tolerates a closed stdout (e.g. piped into `head`).
macro_rules! say {
    ($($t:tt)*) => {{
        use std::io::Write;
        let _ = writeln!(std::io::stdout(), $($t)*);
    }};
}

#[derive(Parser)]
#[command(name = "temporal-rebalance", version, about = "Temporal rebalancing lab for frame-structured decoder attention")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Sweep DTR settings over synthetic samples on the toy engine.
    Simulate(SimulateArgs),
    /// Anchor statistics of attention traces.
    Analyze(AnalyzeArgs),
    /// Non-propagated DTR replay on attention traces.
    Replay(ReplayArgs),
    /// Four-condition frame masking study.
    MaskStudy(MaskStudyArgs),
    /// Anchor positions before and after blanking the anchor frame.
    BlackFrame(BlackFrameArgs),
    /// Write toy-engine attention traces.
    Capture(CaptureArgs),
    /// Find the anchor boost that gives a target baseline dominance.
    Calibrate(CalibrateArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum GeneratorKind {
    Anchor,
    Random,
}

#[derive(Args)]
struct ToyArgs {
    #[arg(long, default_value_t = 4)]
    num_layers: usize,
    #[arg(long, default_value_t = 4)]
    num_heads: usize,
    #[arg(long, default_value_t = 32)]
    model_dim: usize,
    #[arg(long, default_value_t = 8)]
    frames: usize,
    #[arg(long, default_value_t = 4)]
    tokens_per_frame: usize,
    /// Text tokens before the visual block.
    #[arg(long, default_value_t = 2)]
    prefix: usize,
    /// Text tokens after the visual block.
    #[arg(long, default_value_t = 6)]
    suffix: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 10)]
    samples: usize,
    #[arg(long, value_enum, default_value_t = GeneratorKind::Anchor)]
    generator: GeneratorKind,
    /// Logit boost on the anchor frame's keys.
    #[arg(long, default_value_t = DEFAULT_DELTA)]
    delta: f64,
    #[arg(long, default_value_t = 0)]
    anchor_frame: usize,
    /// Added to every raw logit; sets the sign regime DTR acts in.
    #[arg(long, default_value_t = DEFAULT_LOGIT_OFFSET, allow_negative_numbers = true)]
    logit_offset: f64,
}

impl ToyArgs {
    fn spec(&self) -> Result<ToySpec> {
        if !self.delta.is_finite() {
            return Err(Error::Usage("delta must be finite".into()));
        }
        Ok(ToySpec {
            num_layers: self.num_layers,
            num_heads: self.num_heads,
            model_dim: self.model_dim,
            frames: self.frames,
            tokens_per_frame: self.tokens_per_frame,
            prefix: self.prefix,
            suffix: self.suffix,
            seed: self.seed,
            samples: self.samples,
            generator: match self.generator {
                GeneratorKind::Anchor => Generator::AnchorDominant {
                    delta: self.delta,
                    frame: self.anchor_frame,
                },
                GeneratorKind::Random => Generator::Random,
            },
            logit_offset: self.logit_offset,
        })
    }
}

#[derive(Args)]
struct OutArgs {
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Args)]
struct SimulateArgs {
    #[command(flatten)]
    toy: ToyArgs,
    /// Comma-separated α values.
    #[arg(long)]
    alpha: Option<String>,
    /// Comma-separated β values.
    #[arg(long)]
    beta: Option<String>,
    /// Layer windows, `A:B[,C:D]`.
    #[arg(long)]
    layers: Option<String>,
    #[arg(long)]
    epsilon: Option<String>,
    /// Use a named preset's (α, β) instead of --alpha/--beta.
    #[arg(long, conflicts_with_all = ["alpha", "beta"])]
    preset: Option<String>,
    /// Key-value config file (alpha, beta, epsilon, layer_start, layer_end).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    decode_steps: usize,
    /// Run the α, β and layer-range sweeps instead of a grid.
    #[arg(long, conflicts_with_all = ["alpha", "beta", "layers", "preset"])]
    ablation: bool,
    /// Restrict statistics to each grid point's DTR window.
    #[arg(long)]
    stats_window: bool,
    /// Also write baseline traces of every sample.
    #[arg(long)]
    emit_traces: bool,
    #[command(flatten)]
    out: OutArgs,
}

#[derive(Args)]
struct AnalyzeArgs {
    /// Trace files or directories of `.atrc` files.
    #[arg(required = true)]
    inputs: Vec<PathBuf>,
    /// Model layers feeding the statistic, comma-separated; default all.
    #[arg(long)]
    stats_layers: Option<String>,
    /// Exit 0 even when some inputs fail.
    #[arg(long)]
    lenient: bool,
    /// Not available for traces; reported as an error.
    #[arg(long)]
    black_frame: Option<usize>,
    #[command(flatten)]
    out: OutArgs,
}

#[derive(Args)]
struct ReplayArgs {
    #[arg(required = true)]
    inputs: Vec<PathBuf>,
    /// A preset name, or `all` for the four-row ladder.
    #[arg(long, conflicts_with_all = ["alpha", "beta"])]
    preset: Option<String>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
    /// One layer window `A:B`; default scales 18:31 of 32 to the trace depth.
    #[arg(long)]
    layers: Option<String>,
    #[arg(long)]
    epsilon: Option<String>,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    lenient: bool,
    #[command(flatten)]
    out: OutArgs,
}

#[derive(Args)]
struct MaskStudyArgs {
    #[command(flatten)]
    toy: ToyArgs,
    /// Masking window `A:B`; default every layer but the first.
    #[arg(long)]
    layers: Option<String>,
    #[arg(long, default_value_t = 3)]
    fixed_frame: usize,
    /// Score runs by target-row attention on this frame.
    #[arg(long)]
    task_frame: Option<usize>,
    #[command(flatten)]
    out: OutArgs,
}

#[derive(Args)]
struct BlackFrameArgs {
    #[command(flatten)]
    toy: ToyArgs,
    #[command(flatten)]
    out: OutArgs,
}

#[derive(Args)]
struct CaptureArgs {
    #[command(flatten)]
    toy: ToyArgs,
    #[arg(long, default_value_t = 0)]
    decode_steps: usize,
    #[command(flatten)]
    out: OutArgs,
}

#[derive(Args)]
struct CalibrateArgs {
    #[command(flatten)]
    toy: ToyArgs,
    #[arg(long, default_value_t = 0.746)]
    target: f64,
}

fn preset(name: &str) -> Result<Preset> {
    Preset::from_name(name).ok_or_else(|| {
        Error::Usage(format!(
            "unknown preset {name:?}; expected baseline, global, comp, dtr or all"
        ))
    })
}

fn simulate(a: &SimulateArgs) -> Result<PathBuf> {
    let toy = a.toy.spec()?;
    let file = match &a.config {
        Some(p) => ConfigFile::load(p)?,
        None => ConfigFile::default(),
    };
    let base = file.over(base_config(toy.num_layers));
    let mut spec = SimulateSpec::new(toy);
    spec.alphas = vec![base.alpha];
    spec.betas = vec![base.beta];
    spec.windows = vec![Window {
        start: base.layer_start,
        end: base.layer_end,
    }];
    spec.epsilon = base.epsilon;
    if let Some(p) = &a.preset {
        let (al, be) = preset(p)?.alpha_beta();
        spec.alphas = vec![al];
        spec.betas = vec![be];
    }
    if let Some(s) = &a.alpha {
        spec.alphas = parse_values(s)?;
    }
    if let Some(s) = &a.beta {
        spec.betas = parse_values(s)?;
    }
    if let Some(s) = &a.layers {
        spec.windows = parse_windows(s)?;
    }
    if let Some(s) = &a.epsilon {
        spec.epsilon = parse_epsilon(s)?;
    }
    spec.decode_steps = a.decode_steps;
    spec.ablation = a.ablation;
    spec.stats_layers = if a.stats_window {
        StatsLayers::Window
    } else {
        StatsLayers::All
    };
    spec.emit_traces = a.emit_traces;
    let out = harness::simulate(&spec, &a.out.out)?;
    for s in &out.summaries {
        say!(
            "alpha={} beta={} layers={} dominance {:.4} -> {:.4}, entropy {:.4} -> {:.4}",
            s.point.alpha,
            s.point.beta,
            s.point.window,
            s.before.dominance,
            s.after.dominance,
            s.before.entropy,
            s.after.entropy
        );
    }
    Ok(out.dir)
}

fn parse_layer_list(s: &str) -> Result<Vec<usize>> {
    s.split(',')
        .map(|x| {
            x.trim()
                .parse()
                .map_err(|_| Error::Usage(format!("bad layer index {x:?}")))
        })
        .collect()
}

fn analyze(a: &AnalyzeArgs) -> Result<()> {
    if a.black_frame.is_some() {
        return Err(temporal_rebalance_core::Error::UnsupportedInTraceMode.into());
    }
    let spec = AnalyzeSpec {
        inputs: a.inputs.clone(),
        layers: a.stats_layers.as_deref().map(parse_layer_list).transpose()?,
        lenient: a.lenient,
    };
    let out = harness::analyze(&spec, &a.out.out)?;
    for f in &out.failures {
        eprintln!("failed: {}: {}", f.path.display(), f.error);
    }
    if let Some(h) = &out.histogram {
        let cells: Vec<String> = h.iter().map(|f| format!("{f:.3}")).collect();
        say!(
            "{} of {} traces analyzed; anchor histogram [{}]",
            out.reports.len(),
            out.total,
            cells.join(", ")
        );
    }
    say!("output: {}", out.dir.display());
    out.status(a.lenient)
}

fn replay(a: &ReplayArgs) -> Result<()> {
    let file = match &a.config {
        Some(p) => ConfigFile::load(p)?,
        None => ConfigFile::default(),
    };
    let mut window = match (file.layer_start, file.layer_end) {
        (Some(s), Some(e)) => Some(Window { start: s, end: e }),
        (None, None) => None,
        _ => {
            return Err(Error::Config(
                "config file must set both layer_start and layer_end".into(),
            ))
        }
    };
    if let Some(s) = &a.layers {
        window = Some(parse_window(s)?);
    }
    let mut epsilon = file
        .epsilon
        .unwrap_or(temporal_rebalance_core::dtr::DEFAULT_EPSILON);
    if let Some(s) = &a.epsilon {
        epsilon = parse_epsilon(s)?;
    }
    let mut settings = match a.preset.as_deref() {
        Some("all") => Preset::ALL
            .iter()
            .map(|&p| ReplaySetting::preset(p, window))
            .collect(),
        Some(name) => vec![ReplaySetting::preset(preset(name)?, window)],
        None => {
            let alpha = a.alpha.or(file.alpha).unwrap_or(0.5);
            let beta = a.beta.or(file.beta).unwrap_or(0.4);
            vec![ReplaySetting {
                label: "custom".into(),
                alpha,
                beta,
                epsilon,
                window,
            }]
        }
    };
    for s in &mut settings {
        s.epsilon = epsilon;
    }
    let spec = ReplaySpec {
        inputs: a.inputs.clone(),
        settings,
        lenient: a.lenient,
    };
    let out = harness::replay(&spec, &a.out.out)?;
    for f in &out.failures {
        eprintln!("failed: {}: {}", f.path.display(), f.error);
    }
    for r in &out.rows {
        say!(
            "{}: dominance {:.4} -> {:.4}, entropy {:.4} -> {:.4} ({} traces, non-propagated)",
            r.setting.label,
            r.before.dominance,
            r.after.dominance,
            r.before.entropy,
            r.after.entropy,
            r.traces
        );
    }
    say!("output: {}", out.dir.display());
    out.status(a.lenient)
}

fn mask_study(a: &MaskStudyArgs) -> Result<PathBuf> {
    let spec = MaskStudySpec {
        toy: a.toy.spec()?,
        window: a.layers.as_deref().map(parse_window).transpose()?,
        fixed_frame: a.fixed_frame,
        task_frame: a.task_frame,
    };
    let (dir, study) = harness::mask_study(&spec, &a.out.out)?;
    for r in &study.rows {
        say!(
            "{:<22} dominance {:.4} entropy {:.4} non_anchor {:.4}",
            r.condition.name(),
            r.stats.dominance,
            r.stats.entropy,
            r.stats.non_anchor
        );
    }
    Ok(dir)
}

fn black_frame(a: &BlackFrameArgs) -> Result<PathBuf> {
    let out = harness::black_frame(&BlackFrameSpec { toy: a.toy.spec()? }, &a.out.out)?;
    let fmt = |h: &[f64]| h.iter().map(|f| format!("{f:.2}")).collect::<Vec<_>>().join(", ");
    say!("before [{}]", fmt(&out.histogram_before));
    say!("after  [{}]", fmt(&out.histogram_after));
    Ok(out.dir)
}

fn capture(a: &CaptureArgs) -> Result<PathBuf> {
    let spec = CaptureSpec {
        toy: a.toy.spec()?,
        decode_steps: a.decode_steps,
    };
    let (dir, paths) = harness::capture(&spec, &a.out.out)?;
    say!("{} traces", paths.len());
    Ok(dir)
}

fn calibrate(a: &CalibrateArgs) -> Result<()> {
    let spec = a.toy.spec()?;
    spec.check()?;
    let delta = toy::calibrate_delta(&spec, a.target)?;
    let reached = toy::baseline_dominance(&spec, delta)?;
    say!("delta {delta:.4} gives baseline dominance {reached:.4}");
    Ok(())
}

fn print_dir(dir: PathBuf) {
    say!("output: {}", dir.display());
}

fn run(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::Simulate(a) => simulate(a).map(print_dir),
        Command::Analyze(a) => analyze(a),
        Command::Replay(a) => replay(a),
        Command::MaskStudy(a) => mask_study(a).map(print_dir),
        Command::BlackFrame(a) => black_frame(a).map(print_dir),
        Command::Capture(a) => capture(a).map(print_dir),
        Command::Calibrate(a) => calibrate(a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
