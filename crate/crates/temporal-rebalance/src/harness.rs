//! Experiment commands. Each writes its files under `<out>/<run-id>/`,
//! where the run id is a hash of the resolved settings.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use temporal_rebalance_core::analysis::{anchor_histogram, mean_stats, MeanStats};
use temporal_rebalance_core::dtr::{make_dtr_hook, Preset, NON_PROPAGATED};
use temporal_rebalance_core::engine::seeded_decode_embedding;
use temporal_rebalance_core::interventions::{
    aggregate_study, black_frame_embeddings, study_sample, MaskingStudy, Sample, StudyConfig,
    TaskScorer,
};
use temporal_rebalance_core::{
    AnchorReport, DtrConfig, ForwardResult, FrameLayout, LogitHook, Model, StatsScope,
};

use crate::config::Window;
use crate::error::{Error, Result};
use crate::report::{self, num, opt_num, Provenance, Table};
use crate::toy::{report_for, ToySpec};
use crate::trace::{read_trace, write_trace, AttentionTrace};

pub const THREADS_ENV: &str = "TEMPORAL_REBALANCE_THREADS";

/// Worker pool capped by `TEMPORAL_REBALANCE_THREADS` when set.
pub fn pool() -> Result<rayon::ThreadPool> {
    let mut b = rayon::ThreadPoolBuilder::new();
    if let Some(n) = std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
    {
        b = b.num_threads(n);
    }
    b.build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))
}

fn run_dir<T: Serialize>(out: &Path, command: &str, settings: &T) -> Result<PathBuf> {
    let value = serde_json::to_value(settings)?;
    let digest = Sha256::digest(format!("{command}\n{}", serde_json::to_string(&value)?));
    let dir = out.join(format!("{command}-{}", &hex::encode(digest)[..12]));
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    Ok(dir)
}

/// Which layers feed per-sample statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StatsLayers {
    #[default]
    All,
    /// Only the DTR window of each grid point.
    Window,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GridPoint {
    /// Ablation panel, if any: `alpha`, `beta` or `layers`.
    pub panel: Option<&'static str>,
    pub alpha: f64,
    pub beta: f64,
    pub window: Window,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulateSpec {
    pub toy: ToySpec,
    pub alphas: Vec<f64>,
    pub betas: Vec<f64>,
    pub windows: Vec<Window>,
    pub epsilon: f64,
    pub decode_steps: usize,
    /// Replace the grid with the three ablation sweeps.
    pub ablation: bool,
    pub stats_layers: StatsLayers,
    pub emit_traces: bool,
}

impl SimulateSpec {
    pub fn new(toy: ToySpec) -> Self {
        let w = Window::default_for(toy.num_layers);
        Self {
            toy,
            alphas: vec![0.5],
            betas: vec![0.4],
            windows: vec![w],
            epsilon: temporal_rebalance_core::dtr::DEFAULT_EPSILON,
            decode_steps: 0,
            ablation: false,
            stats_layers: StatsLayers::All,
            emit_traces: false,
        }
    }

    pub fn grid(&self) -> Vec<GridPoint> {
        if self.ablation {
            return ablation_grid(self.toy.num_layers);
        }
        let mut g = Vec::new();
        for &alpha in &self.alphas {
            for &beta in &self.betas {
                for &window in &self.windows {
                    g.push(GridPoint {
                        panel: None,
                        alpha,
                        beta,
                        window,
                    });
                }
            }
        }
        g
    }

    fn config(&self, p: &GridPoint) -> DtrConfig {
        DtrConfig {
            alpha: p.alpha,
            beta: p.beta,
            epsilon: self.epsilon,
            layer_start: p.window.start,
            layer_end: p.window.end,
        }
    }

    pub fn command_line(&self) -> String {
        let t = &self.toy;
        let list = |v: &[f64]| v.iter().map(|x| num(*x)).collect::<Vec<_>>().join(",");
        let windows = self
            .windows
            .iter()
            .map(Window::to_string)
            .collect::<Vec<_>>()
            .join(",");
        let mut s = format!(
            "simulate --num-layers {} --num-heads {} --model-dim {} --frames {} --tokens-per-frame {} --prefix {} --suffix {} --seed {} --samples {} {}",
            t.num_layers, t.num_heads, t.model_dim, t.frames, t.tokens_per_frame, t.prefix, t.suffix, t.seed, t.samples,
            generator_flags(t),
        );
        if self.ablation {
            s.push_str(" --ablation");
        } else {
            s.push_str(&format!(
                " --alpha {} --beta {} --layers {windows}",
                list(&self.alphas),
                list(&self.betas)
            ));
        }
        s.push_str(&format!(" --epsilon {}", num(self.epsilon)));
        if self.decode_steps > 0 {
            s.push_str(&format!(" --decode-steps {}", self.decode_steps));
        }
        if self.stats_layers == StatsLayers::Window {
            s.push_str(" --stats-window");
        }
        if self.emit_traces {
            s.push_str(" --emit-traces");
        }
        s
    }
}

fn generator_flags(t: &ToySpec) -> String {
    let g = match t.generator {
        crate::toy::Generator::AnchorDominant { delta, frame } => {
            format!("--generator anchor --delta {} --anchor-frame {frame}", num(delta))
        }
        crate::toy::Generator::Random => "--generator random".into(),
    };
    format!("{g} --logit-offset {}", num(t.logit_offset))
}

fn toy_provenance(command: String, toy: &ToySpec) -> Provenance {
    let p = Provenance::new(command, Some(toy.seed)).note("logit_offset", num(toy.logit_offset));
    match toy.generator {
        crate::toy::Generator::AnchorDominant { delta, frame } => p
            .note("generator", format!("anchor-dominant frame {frame}"))
            .note("delta", num(delta)),
        crate::toy::Generator::Random => p.note("generator", "random"),
    }
}

/// The α, β and layer-range sweeps. Layer ranges are given on a 32-layer
/// scale and mapped onto the toy depth.
pub fn ablation_grid(num_layers: usize) -> Vec<GridPoint> {
    let default = Window::default_for(num_layers);
    let steps: Vec<f64> = (0..=7).map(|i| i as f64 / 10.0).collect();
    let mut g: Vec<GridPoint> = steps
        .iter()
        .map(|&alpha| GridPoint {
            panel: Some("alpha"),
            alpha,
            beta: 0.4,
            window: default,
        })
        .collect();
    g.extend(steps.iter().map(|&beta| GridPoint {
        panel: Some("beta"),
        alpha: 0.5,
        beta,
        window: default,
    }));
    let mut seen = BTreeSet::new();
    for (a, b) in [(0, 31), (0, 15), (8, 23), (18, 31), (24, 31)] {
        let w = Window::scaled(a, b, num_layers);
        if seen.insert((w.start, w.end)) {
            g.push(GridPoint {
                panel: Some("layers"),
                alpha: 0.5,
                beta: 0.4,
                window: w,
            });
        }
    }
    g
}

/// Per-sample result at one grid point.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleRun {
    pub sample: usize,
    pub before: AnchorReport,
    pub after: AnchorReport,
    /// `1 - p_after[anchor_before]`.
    pub non_anchor_ref: f64,
    pub decode_before: Option<MeanStats>,
    pub decode_after: Option<MeanStats>,
}

struct SampleInput {
    embeddings: Vec<Vec<f64>>,
    seed: u64,
}

fn decode_reports(
    model: &Model,
    layout: &FrameLayout,
    embeddings: &[Vec<f64>],
    seed: u64,
    steps: usize,
    hook: Option<&dyn LogitHook>,
    layers: Option<&[usize]>,
) -> Result<Option<MeanStats>> {
    if steps == 0 {
        return Ok(None);
    }
    let (_, mut state) = model.prefill_with_cache(embeddings, layout, hook)?;
    let mut reports = Vec::with_capacity(steps);
    for t in 0..steps {
        let e = seeded_decode_embedding(seed, t, model.config().model_dim);
        let (r, next) = model.decode_step(state, &e, layout, hook)?;
        state = next;
        reports.push(report_for(&r, layout, StatsScope::TargetRow, layers, None)?);
    }
    Ok(Some(mean_stats(&reports)?))
}

fn stats_layers_for(spec: &SimulateSpec, p: &GridPoint) -> Option<Vec<usize>> {
    match spec.stats_layers {
        StatsLayers::All => None,
        StatsLayers::Window => Some((p.window.start..=p.window.end).collect()),
    }
}

/// Runs one sample at every grid point.
fn simulate_sample(
    spec: &SimulateSpec,
    model: &Model,
    layout: &FrameLayout,
    grid: &[GridPoint],
    k: usize,
    input: &SampleInput,
) -> Result<Vec<SampleRun>> {
    let base = model.prefill(&input.embeddings, layout, None)?;
    let mut runs = Vec::with_capacity(grid.len());
    for p in grid {
        let cfg = spec.config(p);
        cfg.validate(model.config().num_layers)?;
        let layers = stats_layers_for(spec, p);
        let layers = layers.as_deref();
        let hook = make_dtr_hook(cfg, layout)?;
        let result = model.prefill(&input.embeddings, layout, Some(&hook))?;
        let before = report_for(&base, layout, StatsScope::TargetRow, layers, None)?;
        let after = report_for(&result, layout, StatsScope::TargetRow, layers, None)?;
        let non_anchor_ref = 1.0 - after.distribution[before.anchor];
        let steps = spec.decode_steps;
        let decode_before =
            decode_reports(model, layout, &input.embeddings, input.seed, steps, None, layers)?;
        let decode_after = decode_reports(
            model,
            layout,
            &input.embeddings,
            input.seed,
            steps,
            Some(&hook),
            layers,
        )?;
        runs.push(SampleRun {
            sample: k,
            before,
            after,
            non_anchor_ref,
            decode_before,
            decode_after,
        });
    }
    Ok(runs)
}

/// Aggregate over samples at one grid point.
#[derive(Debug, Clone, PartialEq)]
pub struct GridSummary {
    pub point: GridPoint,
    pub before: MeanStats,
    pub after: MeanStats,
    pub non_anchor_ref: f64,
    pub visual_ratio_before: f64,
    pub visual_ratio_after: f64,
    pub decode_before: Option<MeanStats>,
    pub decode_after: Option<MeanStats>,
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    s / n as f64
}

fn mean_visual_ratio(r: &AnchorReport) -> f64 {
    mean(r.visual_ratio().into_iter())
}

fn mean_of_means(xs: &[Option<MeanStats>]) -> Option<MeanStats> {
    let all: Option<Vec<MeanStats>> = xs.iter().copied().collect();
    let all = all?;
    Some(MeanStats {
        dominance: mean(all.iter().map(|m| m.dominance)),
        entropy: mean(all.iter().map(|m| m.entropy)),
        non_anchor: mean(all.iter().map(|m| m.non_anchor)),
        samples: all.len(),
    })
}

pub fn summarize(point: GridPoint, runs: &[SampleRun]) -> Result<GridSummary> {
    let before: Vec<AnchorReport> = runs.iter().map(|r| r.before.clone()).collect();
    let after: Vec<AnchorReport> = runs.iter().map(|r| r.after.clone()).collect();
    let db: Vec<_> = runs.iter().map(|r| r.decode_before).collect();
    let da: Vec<_> = runs.iter().map(|r| r.decode_after).collect();
    Ok(GridSummary {
        point,
        before: mean_stats(&before)?,
        after: mean_stats(&after)?,
        non_anchor_ref: mean(runs.iter().map(|r| r.non_anchor_ref)),
        visual_ratio_before: mean(before.iter().map(mean_visual_ratio)),
        visual_ratio_after: mean(after.iter().map(mean_visual_ratio)),
        decode_before: mean_of_means(&db),
        decode_after: mean_of_means(&da),
    })
}

pub struct SimulateOutput {
    pub dir: PathBuf,
    pub summaries: Vec<GridSummary>,
    /// `[grid point][sample]`.
    pub runs: Vec<Vec<SampleRun>>,
}

fn point_cells(p: &GridPoint) -> Vec<String> {
    vec![
        p.panel.unwrap_or("").to_string(),
        num(p.alpha),
        num(p.beta),
        p.window.start.to_string(),
        p.window.end.to_string(),
    ]
}

const POINT_COLUMNS: [&str; 5] = ["panel", "alpha", "beta", "layer_start", "layer_end"];

fn with_point_columns(rest: &[&str]) -> Vec<String> {
    POINT_COLUMNS
        .iter()
        .chain(rest)
        .map(|s| s.to_string())
        .collect()
}

pub fn simulate(spec: &SimulateSpec, out: &Path) -> Result<SimulateOutput> {
    spec.toy.check()?;
    if spec.epsilon.is_nan() || spec.epsilon <= 0.0 {
        return Err(Error::Usage("epsilon must be positive".into()));
    }
    let grid = spec.grid();
    if grid.is_empty() {
        return Err(Error::Usage("empty parameter grid".into()));
    }
    let layout = spec.toy.layout()?;
    let model = spec.toy.model(&layout)?;
    for p in &grid {
        spec.config(p).validate(model.config().num_layers)?;
    }
    let dir = run_dir(out, "simulate", spec)?;

    let inputs: Vec<SampleInput> = (0..spec.toy.samples)
        .map(|k| SampleInput {
            embeddings: spec.toy.embeddings(&layout, k),
            seed: spec.toy.sample_seed(k),
        })
        .collect();
    let per_sample: Vec<Vec<SampleRun>> = pool()?.install(|| {
        inputs
            .par_iter()
            .enumerate()
            .map(|(k, input)| simulate_sample(spec, &model, &layout, &grid, k, input))
            .collect::<Result<Vec<_>>>()
    })?;
    let runs: Vec<Vec<SampleRun>> = (0..grid.len())
        .map(|g| per_sample.iter().map(|s| s[g].clone()).collect())
        .collect();
    let summaries = grid
        .iter()
        .zip(&runs)
        .map(|(p, r)| summarize(*p, r))
        .collect::<Result<Vec<_>>>()?;

    let prov = toy_provenance(spec.command_line(), &spec.toy)
        .note("stats", "target row, modified logits");
    write_summary(&dir.join("summary.csv"), &prov, &summaries)?;
    write_samples(&dir.join("samples.csv"), &prov, &grid, &runs)?;
    if spec.ablation {
        for panel in ["alpha", "beta", "layers"] {
            write_panel(&dir.join(format!("ablation_{panel}.csv")), &prov, panel, &summaries)?;
        }
    }
    if spec.emit_traces {
        let traces = dir.join("traces");
        capture_into(&spec.toy, 0, &traces)?;
    }
    report::write_json(&dir.join("config.json"), &RunConfig::new("simulate", spec))?;
    Ok(SimulateOutput {
        dir,
        summaries,
        runs,
    })
}

/// `config.json`: the resolved settings plus the tool version.
#[derive(Serialize)]
struct RunConfig<'a, T: Serialize> {
    command: &'a str,
    version: &'a str,
    settings: &'a T,
}

impl<'a, T: Serialize> RunConfig<'a, T> {
    fn new(command: &'a str, settings: &'a T) -> Self {
        Self {
            command,
            version: report::VERSION,
            settings,
        }
    }
}

fn stats_cells(m: &Option<MeanStats>) -> [String; 2] {
    [
        opt_num(m.map(|m| m.dominance)),
        opt_num(m.map(|m| m.entropy)),
    ]
}

fn write_summary(path: &Path, prov: &Provenance, rows: &[GridSummary]) -> Result<()> {
    let mut t = Table::new(&with_point_columns(&[
        "samples",
        "dominance_before",
        "dominance",
        "delta_dominance",
        "entropy_before",
        "entropy",
        "delta_entropy",
        "non_anchor_before",
        "non_anchor",
        "non_anchor_ref",
        "visual_ratio_before",
        "visual_ratio",
        "decode_dominance_before",
        "decode_entropy_before",
        "decode_dominance",
        "decode_entropy",
    ]));
    for s in rows {
        let mut row = point_cells(&s.point);
        row.extend([
            s.after.samples.to_string(),
            num(s.before.dominance),
            num(s.after.dominance),
            num(s.after.dominance - s.before.dominance),
            num(s.before.entropy),
            num(s.after.entropy),
            num(s.after.entropy - s.before.entropy),
            num(s.before.non_anchor),
            num(s.after.non_anchor),
            num(s.non_anchor_ref),
            num(s.visual_ratio_before),
            num(s.visual_ratio_after),
        ]);
        row.extend(stats_cells(&s.decode_before));
        row.extend(stats_cells(&s.decode_after));
        t.push(row);
    }
    report::write_csv(path, prov, &t)
}

fn write_samples(
    path: &Path,
    prov: &Provenance,
    grid: &[GridPoint],
    runs: &[Vec<SampleRun>],
) -> Result<()> {
    let mut t = Table::new(&with_point_columns(&[
        "sample",
        "anchor_before",
        "anchor",
        "dominance_before",
        "dominance",
        "entropy_before",
        "entropy",
        "non_anchor",
        "non_anchor_ref",
        "visual_ratio_before",
        "visual_ratio",
        "decode_dominance",
        "decode_entropy",
    ]));
    for (p, rs) in grid.iter().zip(runs) {
        for r in rs {
            let mut row = point_cells(p);
            row.extend([
                r.sample.to_string(),
                r.before.anchor.to_string(),
                r.after.anchor.to_string(),
                num(r.before.dominance),
                num(r.after.dominance),
                num(r.before.entropy),
                num(r.after.entropy),
                num(r.after.non_anchor),
                num(r.non_anchor_ref),
                num(mean_visual_ratio(&r.before)),
                num(mean_visual_ratio(&r.after)),
            ]);
            row.extend(stats_cells(&r.decode_after));
            t.push(row);
        }
    }
    report::write_csv(path, prov, &t)
}

/// Long-format sweep data: one row per setting and metric, with the
/// no-intervention value and the difference to it.
fn write_panel(path: &Path, prov: &Provenance, panel: &str, rows: &[GridSummary]) -> Result<()> {
    let mut t = Table::new(&with_point_columns(&[
        "metric",
        "value",
        "baseline",
        "delta_vs_baseline",
    ]));
    for s in rows.iter().filter(|s| s.point.panel == Some(panel)) {
        let metrics = [
            ("dominance", s.after.dominance, s.before.dominance),
            ("entropy", s.after.entropy, s.before.entropy),
            ("non_anchor_ref", s.non_anchor_ref, s.before.non_anchor),
        ];
        for (name, value, base) in metrics {
            let mut row = point_cells(&s.point);
            row.extend([name.to_string(), num(value), num(base), num(value - base)]);
            t.push(row);
        }
    }
    report::write_csv(path, prov, &t)
}

/// Writes baseline traces of every sample: one prefill trace and one per
/// decode step.
fn capture_into(toy: &ToySpec, decode_steps: usize, dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let layout = toy.layout()?;
    let model = toy.model(&layout)?;
    let tag = toy.tag();
    let per_sample = pool()?.install(|| {
        (0..toy.samples)
            .into_par_iter()
            .map(|k| -> Result<Vec<(String, AttentionTrace)>> {
                let emb = toy.embeddings(&layout, k);
                let (r, mut state) = model.prefill_with_cache(&emb, &layout, None)?;
                let mut out = vec![(
                    format!("sample_{k:04}.atrc"),
                    AttentionTrace::from_forward(&r, &layout, tag.clone())?,
                )];
                for t in 0..decode_steps {
                    let e = seeded_decode_embedding(toy.sample_seed(k), t, toy.model_dim);
                    let (r, next) = model.decode_step(state, &e, &layout, None)?;
                    state = next;
                    out.push((
                        format!("sample_{k:04}_decode_{t:02}.atrc"),
                        AttentionTrace::from_forward(&r, &layout, tag.clone())?,
                    ));
                }
                Ok(out)
            })
            .collect::<Result<Vec<_>>>()
    })?;
    let mut paths = Vec::new();
    for (name, trace) in per_sample.into_iter().flatten() {
        let path = dir.join(name);
        let mut f = std::io::BufWriter::new(
            std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?,
        );
        write_trace(&trace, &mut f)?;
        paths.push(path);
    }
    Ok(paths)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaptureSpec {
    pub toy: ToySpec,
    pub decode_steps: usize,
}

pub fn capture(spec: &CaptureSpec, out: &Path) -> Result<(PathBuf, Vec<PathBuf>)> {
    spec.toy.check()?;
    let dir = run_dir(out, "capture", spec)?;
    let paths = capture_into(&spec.toy, spec.decode_steps, &dir)?;
    report::write_json(&dir.join("config.json"), &RunConfig::new("capture", spec))?;
    Ok((dir, paths))
}

/// Files named on the command line plus `*.atrc` files of named
/// directories, in a stable order.
pub fn expand_inputs(inputs: &[PathBuf]) -> Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    for p in inputs {
        if p.is_dir() {
            let mut found: Vec<PathBuf> = std::fs::read_dir(p)
                .map_err(|e| Error::io(p, e))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|f| f.is_file() && f.extension().is_some_and(|x| x == "atrc"))
                .collect();
            found.sort();
            files.extend(found);
        } else {
            files.push(p.clone());
        }
    }
    if files.is_empty() {
        return Err(Error::Usage("no trace files given".into()));
    }
    Ok(files)
}

fn load_trace(path: &Path) -> Result<AttentionTrace> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    Ok(read_trace(&mut std::io::BufReader::new(f))?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalyzeSpec {
    pub inputs: Vec<PathBuf>,
    /// Model layers feeding the statistic; `None` for all recorded layers.
    pub layers: Option<Vec<usize>>,
    pub lenient: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TraceReport {
    pub trace: String,
    pub model_tag: String,
    pub report: AnchorReport,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Failure {
    pub path: PathBuf,
    pub error: String,
}

pub struct AnalyzeOutput {
    pub dir: PathBuf,
    pub reports: Vec<TraceReport>,
    pub histogram: Option<Vec<f64>>,
    pub failures: Vec<Failure>,
    pub total: usize,
}

impl AnalyzeOutput {
    /// Strict mode fails on any bad input.
    pub fn status(&self, lenient: bool) -> Result<()> {
        if !self.failures.is_empty() && !lenient {
            return Err(Error::PartialFailure(self.failures.len(), self.total));
        }
        Ok(())
    }
}

fn display_name(p: &Path) -> String {
    p.to_string_lossy().into_owned()
}

fn write_failures(path: &Path, prov: &Provenance, failures: &[Failure]) -> Result<()> {
    let mut t = Table::new(&["trace", "error"]);
    for f in failures {
        t.push(vec![display_name(&f.path), f.error.clone()]);
    }
    report::write_csv(path, prov, &t)
}

pub fn analyze(spec: &AnalyzeSpec, out: &Path) -> Result<AnalyzeOutput> {
    let files = expand_inputs(&spec.inputs)?;
    let layers = spec.layers.as_deref();
    let results: Vec<Result<TraceReport>> = pool()?.install(|| {
        files
            .par_iter()
            .map(|p| {
                let t = load_trace(p)?;
                Ok(TraceReport {
                    trace: display_name(p),
                    model_tag: t.model_tag.clone(),
                    report: t.analyze(layers)?,
                })
            })
            .collect()
    });
    let mut reports = Vec::new();
    let mut failures = Vec::new();
    for (p, r) in files.iter().zip(results) {
        match r {
            Ok(r) => reports.push(r),
            Err(e) => failures.push(Failure {
                path: p.clone(),
                error: e.to_string(),
            }),
        }
    }

    let mut command = String::from("analyze");
    if let Some(ls) = layers {
        let ls: Vec<String> = ls.iter().map(usize::to_string).collect();
        command.push_str(&format!(" --stats-layers {}", ls.join(",")));
    }
    for p in &files {
        command.push(' ');
        command.push_str(&display_name(p));
    }
    let prov = Provenance::new(command, None);
    let dir = run_dir(out, "analyze", &(spec, &files))?;

    let layer_ids: BTreeSet<usize> = reports
        .iter()
        .flat_map(|r| r.report.per_layer.iter().map(|l| l.layer))
        .collect();
    let mut header: Vec<String> = ["trace", "anchor", "dominance", "entropy", "non_anchor"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    header.extend(layer_ids.iter().map(|l| format!("visual_ratio_l{l}")));
    let mut table = Table::new(&header);
    let mut vr = Table::new(&["trace", "layer", "visual_ratio"]);
    for r in &reports {
        let a = &r.report;
        let mut row = vec![
            r.trace.clone(),
            a.anchor.to_string(),
            num(a.dominance),
            num(a.entropy),
            num(a.non_anchor),
        ];
        for l in &layer_ids {
            row.push(opt_num(
                a.per_layer
                    .iter()
                    .find(|s| s.layer == *l)
                    .map(|s| s.visual_ratio),
            ));
        }
        table.push(row);
        for s in &a.per_layer {
            vr.push(vec![r.trace.clone(), s.layer.to_string(), num(s.visual_ratio)]);
        }
    }
    report::write_csv(&dir.join("reports.csv"), &prov, &table)?;
    report::write_jsonl(&dir.join("reports.jsonl"), &reports)?;
    report::write_csv(&dir.join("visual_ratio.csv"), &prov, &vr)?;

    let plain: Vec<AnchorReport> = reports.iter().map(|r| r.report.clone()).collect();
    let histogram = if plain.is_empty() {
        None
    } else {
        match anchor_histogram(&plain) {
            Ok(h) => Some(h),
            Err(e) => {
                failures.push(Failure {
                    path: PathBuf::from("<histogram>"),
                    error: e.to_string(),
                });
                None
            }
        }
    };
    let mut hist = Table::new(&["frame", "frequency", "count"]);
    if let Some(h) = &histogram {
        for (i, f) in h.iter().enumerate() {
            let count = plain.iter().filter(|r| r.anchor == i).count();
            hist.push(vec![i.to_string(), num(*f), count.to_string()]);
        }
    }
    report::write_csv(&dir.join("histogram.csv"), &prov, &hist)?;
    write_failures(&dir.join("failures.csv"), &prov, &failures)?;

    Ok(AnalyzeOutput {
        dir,
        reports,
        histogram,
        failures,
        total: files.len(),
    })
}

/// A named DTR setting. A missing window means the default window for
/// each trace's depth (deepest recorded layer + 1).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplaySetting {
    pub label: String,
    pub alpha: f64,
    pub beta: f64,
    pub epsilon: f64,
    pub window: Option<Window>,
}

impl ReplaySetting {
    pub fn preset(p: Preset, window: Option<Window>) -> Self {
        let (alpha, beta) = p.alpha_beta();
        Self {
            label: p.name().into(),
            alpha,
            beta,
            epsilon: temporal_rebalance_core::dtr::DEFAULT_EPSILON,
            window,
        }
    }

    pub fn config_for(&self, trace: &AttentionTrace) -> DtrConfig {
        let w = self.window.unwrap_or_else(|| {
            Window::default_for(trace.layer_ids.last().map_or(1, |l| l + 1))
        });
        DtrConfig {
            alpha: self.alpha,
            beta: self.beta,
            epsilon: self.epsilon,
            layer_start: w.start,
            layer_end: w.end,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplaySpec {
    pub inputs: Vec<PathBuf>,
    pub settings: Vec<ReplaySetting>,
    pub lenient: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReplayRow {
    pub setting: ReplaySetting,
    pub traces: usize,
    pub before: MeanStats,
    pub after: MeanStats,
    pub non_anchor_vs_before: f64,
}

pub struct ReplayOutput {
    pub dir: PathBuf,
    pub rows: Vec<ReplayRow>,
    pub failures: Vec<Failure>,
    pub total: usize,
}

impl ReplayOutput {
    pub fn status(&self, lenient: bool) -> Result<()> {
        if !self.failures.is_empty() && !lenient {
            return Err(Error::PartialFailure(self.failures.len(), self.total));
        }
        Ok(())
    }
}

pub fn replay(spec: &ReplaySpec, out: &Path) -> Result<ReplayOutput> {
    if spec.settings.is_empty() {
        return Err(Error::Usage("no DTR setting given".into()));
    }
    let files = expand_inputs(&spec.inputs)?;
    let loaded: Vec<Result<AttentionTrace>> =
        pool()?.install(|| files.par_iter().map(|p| load_trace(p)).collect());

    let mut failures = Vec::new();
    let mut traces = Vec::new();
    for (p, t) in files.iter().zip(loaded) {
        match t {
            Ok(t) => traces.push((p.clone(), t)),
            Err(e) => failures.push(Failure {
                path: p.clone(),
                error: e.to_string(),
            }),
        }
    }

    // outcome[setting][trace]
    let outcomes: Vec<Vec<Result<temporal_rebalance_core::dtr::ReplayOutcome>>> =
        pool()?.install(|| {
            spec.settings
                .iter()
                .map(|s| {
                    traces
                        .par_iter()
                        .map(|(_, t)| Ok(crate::trace::replay_dtr(t, &s.config_for(t))?))
                        .collect()
                })
                .collect()
        });

    let mut per_trace = Table::new(&[
        "setting",
        "trace",
        "alpha",
        "beta",
        "layer_start",
        "layer_end",
        "anchor_before",
        "anchor_after",
        "dominance_before",
        "dominance_after",
        "entropy_before",
        "entropy_after",
        "non_anchor_after",
        "non_anchor_vs_before",
        "mode",
    ]);
    let mut bad: BTreeSet<usize> = BTreeSet::new();
    for row in &outcomes {
        for (i, o) in row.iter().enumerate() {
            if let Err(e) = o {
                if bad.insert(i) {
                    failures.push(Failure {
                        path: traces[i].0.clone(),
                        error: e.to_string(),
                    });
                }
            }
        }
    }
    let mut rows = Vec::new();
    for (s, row) in spec.settings.iter().zip(&outcomes) {
        let mut before = Vec::new();
        let mut after = Vec::new();
        let mut vs_before = Vec::new();
        for (i, o) in row.iter().enumerate() {
            if bad.contains(&i) {
                continue;
            }
            let Ok(o) = o else { continue };
            let (path, t) = &traces[i];
            let cfg = s.config_for(t);
            per_trace.push(vec![
                s.label.clone(),
                display_name(path),
                num(cfg.alpha),
                num(cfg.beta),
                cfg.layer_start.to_string(),
                cfg.layer_end.to_string(),
                o.before.anchor.to_string(),
                o.after.anchor.to_string(),
                num(o.before.dominance),
                num(o.after.dominance),
                num(o.before.entropy),
                num(o.after.entropy),
                num(o.after.non_anchor),
                num(o.non_anchor_vs_before),
                NON_PROPAGATED.into(),
            ]);
            before.push(o.before.clone());
            after.push(o.after.clone());
            vs_before.push(o.non_anchor_vs_before);
        }
        if before.is_empty() {
            continue;
        }
        rows.push(ReplayRow {
            setting: s.clone(),
            traces: before.len(),
            before: mean_stats(&before)?,
            after: mean_stats(&after)?,
            non_anchor_vs_before: mean(vs_before.into_iter()),
        });
    }

    let mut command = String::from("replay");
    for s in &spec.settings {
        command.push_str(&format!(
            " --setting {}:{}:{}:{}:{}",
            s.label,
            num(s.alpha),
            num(s.beta),
            num(s.epsilon),
            s.window.map_or_else(|| "default".into(), |w| w.to_string())
        ));
    }
    for p in &files {
        command.push(' ');
        command.push_str(&display_name(p));
    }
    let prov = Provenance::new(command, None).note("mode", NON_PROPAGATED);
    let dir = run_dir(out, "replay", &(spec, &files))?;
    let mut summary = Table::new(&[
        "setting",
        "alpha",
        "beta",
        "window",
        "traces",
        "dominance_before",
        "dominance_after",
        "delta_dominance",
        "entropy_before",
        "entropy_after",
        "delta_entropy",
        "non_anchor_after",
        "non_anchor_vs_before",
        "mode",
    ]);
    for r in &rows {
        summary.push(vec![
            r.setting.label.clone(),
            num(r.setting.alpha),
            num(r.setting.beta),
            r.setting
                .window
                .map_or_else(|| "default".into(), |w| w.to_string()),
            r.traces.to_string(),
            num(r.before.dominance),
            num(r.after.dominance),
            num(r.after.dominance - r.before.dominance),
            num(r.before.entropy),
            num(r.after.entropy),
            num(r.after.entropy - r.before.entropy),
            num(r.after.non_anchor),
            num(r.non_anchor_vs_before),
            NON_PROPAGATED.into(),
        ]);
    }
    report::write_csv(&dir.join("replay.csv"), &prov, &summary)?;
    report::write_csv(&dir.join("replay_traces.csv"), &prov, &per_trace)?;
    write_failures(&dir.join("failures.csv"), &prov, &failures)?;
    Ok(ReplayOutput {
        dir,
        rows,
        failures,
        total: files.len(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskStudySpec {
    pub toy: ToySpec,
    /// Masking window; `None` masks every layer but the first.
    pub window: Option<Window>,
    pub fixed_frame: usize,
    /// When set, each run is scored by the target row's attention mass on
    /// this frame, averaged over layers and heads.
    pub task_frame: Option<usize>,
}

/// Target-row attention on `frame`, averaged over layers and heads.
pub fn evidence_score(result: &ForwardResult, layout: &FrameLayout, frame: usize) -> f64 {
    let Ok(span) = layout.frame_span(frame) else {
        return 0.0;
    };
    let mut total = 0.0;
    let mut count = 0usize;
    for layer in &result.attention.layers {
        let pos = layer.rows().len() - 1;
        for h in 0..layer.heads() {
            total += layer.row(h, pos)[span.start..span.end].iter().sum::<f64>();
            count += 1;
        }
    }
    total / count as f64
}

pub fn mask_study(
    spec: &MaskStudySpec,
    out: &Path,
) -> Result<(PathBuf, MaskingStudy)> {
    spec.toy.check()?;
    let layout = spec.toy.layout()?;
    let model = spec.toy.model(&layout)?;
    let l = spec.toy.num_layers;
    let mut cfg = StudyConfig::for_layers(l);
    if let Some(w) = spec.window {
        if w.end >= l {
            return Err(temporal_rebalance_core::Error::LayerWindowOutOfRange {
                start: w.start,
                end: w.end,
                num_layers: l,
            }
            .into());
        }
        cfg.layer_start = w.start;
        cfg.layer_end = w.end;
    }
    cfg.random_seed = spec.toy.seed;
    cfg.fixed_frame = spec.fixed_frame;
    if let Some(f) = spec.task_frame {
        layout.frame_span(f)?;
    }
    let task_frame = spec.task_frame;
    let task_layout = layout.clone();
    let scorer =
        move |_: usize, r: &ForwardResult| evidence_score(r, &task_layout, task_frame.unwrap_or(0));
    let task: Option<TaskScorer<'_>> = task_frame.map(|_| &scorer as TaskScorer<'_>);

    let samples: Vec<Sample> = (0..spec.toy.samples)
        .map(|k| Sample {
            embeddings: spec.toy.embeddings(&layout, k),
            layout: layout.clone(),
        })
        .collect();
    let per_sample = pool()?.install(|| {
        samples
            .par_iter()
            .enumerate()
            .map(|(k, s)| study_sample(&model, k, s, None, &cfg, task))
            .collect::<std::result::Result<Vec<_>, _>>()
    })?;
    let study = aggregate_study(per_sample)?;

    let mut command = format!(
        "mask-study --num-layers {} --num-heads {} --model-dim {} --frames {} --tokens-per-frame {} --prefix {} --suffix {} --seed {} --samples {} {} --layers {}:{} --fixed-frame {}",
        spec.toy.num_layers, spec.toy.num_heads, spec.toy.model_dim, spec.toy.frames,
        spec.toy.tokens_per_frame, spec.toy.prefix, spec.toy.suffix, spec.toy.seed,
        spec.toy.samples, generator_flags(&spec.toy), cfg.layer_start, cfg.layer_end, spec.fixed_frame,
    );
    if let Some(f) = spec.task_frame {
        command.push_str(&format!(" --task-frame {f}"));
    }
    let prov = toy_provenance(command, &spec.toy)
        .note("stats", "score queries, masked-window layers, reference = baseline anchor");
    let dir = run_dir(out, "mask-study", spec)?;
    let mut t = Table::new(&["condition", "samples", "dominance", "entropy", "non_anchor", "task_score"]);
    let mut per = Table::new(&[
        "condition",
        "sample",
        "masked_frame",
        "anchor",
        "dominance",
        "entropy",
        "non_anchor",
        "task_score",
    ]);
    for row in &study.rows {
        t.push(vec![
            row.condition.name().into(),
            row.stats.samples.to_string(),
            num(row.stats.dominance),
            num(row.stats.entropy),
            num(row.stats.non_anchor),
            opt_num(row.task_score),
        ]);
        for (k, run) in row.runs.iter().enumerate() {
            per.push(vec![
                row.condition.name().into(),
                k.to_string(),
                run.masked_frame.map(|f| f.to_string()).unwrap_or_default(),
                run.report.reference_anchor.to_string(),
                num(run.report.dominance),
                num(run.report.entropy),
                num(run.report.non_anchor),
                opt_num(run.task_score),
            ]);
        }
    }
    report::write_csv(&dir.join("masking.csv"), &prov, &t)?;
    report::write_csv(&dir.join("masking_samples.csv"), &prov, &per)?;
    report::write_json(&dir.join("config.json"), &RunConfig::new("mask-study", spec))?;
    Ok((dir, study))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlackFrameSpec {
    pub toy: ToySpec,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlackFrameOutput {
    pub dir: PathBuf,
    pub anchors_before: Vec<usize>,
    pub anchors_after: Vec<usize>,
    pub histogram_before: Vec<f64>,
    pub histogram_after: Vec<f64>,
}

/// Anchor positions before and after blanking each sample's anchor frame.
pub fn black_frame(spec: &BlackFrameSpec, out: &Path) -> Result<BlackFrameOutput> {
    spec.toy.check()?;
    let layout = spec.toy.layout()?;
    let model = spec.toy.model(&layout)?;
    let pairs = pool()?.install(|| {
        (0..spec.toy.samples)
            .into_par_iter()
            .map(|k| -> Result<(AnchorReport, AnchorReport)> {
                let emb = spec.toy.embeddings(&layout, k);
                let r = model.prefill(&emb, &layout, None)?;
                let before = report_for(&r, &layout, StatsScope::ScoreQueries, None, None)?;
                let blank = black_frame_embeddings(&emb, &layout, before.anchor)?;
                let r = model.prefill(&blank, &layout, None)?;
                let after = report_for(&r, &layout, StatsScope::ScoreQueries, None, None)?;
                Ok((before, after))
            })
            .collect::<Result<Vec<_>>>()
    })?;
    let (before, after): (Vec<AnchorReport>, Vec<AnchorReport>) = pairs.into_iter().unzip();
    let histogram_before = anchor_histogram(&before)?;
    let histogram_after = anchor_histogram(&after)?;

    let command = format!(
        "black-frame --num-layers {} --num-heads {} --model-dim {} --frames {} --tokens-per-frame {} --prefix {} --suffix {} --seed {} --samples {} {}",
        spec.toy.num_layers, spec.toy.num_heads, spec.toy.model_dim, spec.toy.frames,
        spec.toy.tokens_per_frame, spec.toy.prefix, spec.toy.suffix, spec.toy.seed,
        spec.toy.samples, generator_flags(&spec.toy),
    );
    let prov = toy_provenance(command, &spec.toy).note("stats", "score queries, all layers");
    let dir = run_dir(out, "black-frame", spec)?;
    let mut h = Table::new(&["frame", "before", "after"]);
    for (i, (b, a)) in histogram_before.iter().zip(&histogram_after).enumerate() {
        h.push(vec![i.to_string(), num(*b), num(*a)]);
    }
    let mut s = Table::new(&["sample", "anchor_before", "anchor_after", "dominance_before", "dominance_after"]);
    for (k, (b, a)) in before.iter().zip(&after).enumerate() {
        s.push(vec![
            k.to_string(),
            b.anchor.to_string(),
            a.anchor.to_string(),
            num(b.dominance),
            num(a.dominance),
        ]);
    }
    report::write_csv(&dir.join("black_frame.csv"), &prov, &h)?;
    report::write_csv(&dir.join("black_frame_samples.csv"), &prov, &s)?;
    report::write_json(&dir.join("config.json"), &RunConfig::new("black-frame", spec))?;
    Ok(BlackFrameOutput {
        dir,
        anchors_before: before.iter().map(|r| r.anchor).collect(),
        anchors_after: after.iter().map(|r| r.anchor).collect(),
        histogram_before,
        histogram_after,
    })
}
