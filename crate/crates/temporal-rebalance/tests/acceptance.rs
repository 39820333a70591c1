//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Runs as a plain binary (`harness = false`) so the lines always print.
//! Exits non-zero if any criterion fails.

use std::panic::{self, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use proptest::prelude::*;
use proptest::test_runner::{Config as RunnerConfig, TestRunner};
use temporal_rebalance::core::analysis::{averaged_logits, frame_mass, select_anchor};
use temporal_rebalance::core::dtr::{
    frame_scores, gaps_and_bias, make_dtr_hook, replay_non_propagated, DEFAULT_EPSILON,
};
use temporal_rebalance::core::engine::{seeded_decode_embedding, seeded_embeddings};
use temporal_rebalance::core::interventions::{mask_hook, Condition, InterventionSpec};
use temporal_rebalance::core::tensor::is_masked;
use temporal_rebalance::core::{
    build_query_plan, DtrConfig, ForwardResult, FrameLayout, LayerLogits, LogitTensor, Model,
    ModelConfig, Preset, QueryPlan, Stage, StatsScope, MASKED_LOGIT,
};
use temporal_rebalance::harness::{mask_study, MaskStudySpec};
use temporal_rebalance::report::read_csv;
use temporal_rebalance::toy::ToySpec;
use temporal_rebalance::trace::{read_trace, write_trace, AttentionTrace, TraceError};

const IDENTITY_BUDGET: Duration = Duration::from_secs(1);
const ROW_SUM_TOL: f64 = 1e-6;
const TEXT_MASS_TOL: f64 = 1e-12;
const BIAS_TOL: f64 = 1e-12;
const ORACLE_TOL: f64 = 1e-9;
const DECODE_TOL: f64 = 1e-6;
const LADDER_TOL: f64 = 1e-9;
const SWEEP_BUDGET: Duration = Duration::from_secs(60);
const STABILITY_EPSILON: f64 = 1e-6;
const MAX_ENTROPY_8: f64 = 2.0794415416798357;

const SEEDS: u64 = 100;
const DECODE_SEEDS: u64 = 20;
const DECODE_STEPS: usize = 5;
const ORACLE_CASES: u32 = 128;

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)*) => {
        if !$cond {
            return Err(format!($($msg)*));
        }
    };
}

fn fail<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

/// L=4, H=4, N=8 frames of M=4 tokens.
fn toy(seed: u64) -> (ToySpec, FrameLayout, Model) {
    let spec = ToySpec {
        seed,
        ..ToySpec::default()
    };
    let layout = spec.layout().unwrap();
    let model = spec.model(&layout).unwrap();
    (spec, layout, model)
}

fn dtr_config() -> DtrConfig {
    DtrConfig::new(0.5, 0.3, 2, 3)
}

fn same_bits(a: &LogitTensor, b: &LogitTensor) -> bool {
    a.layers.len() == b.layers.len()
        && a.layers.iter().zip(&b.layers).all(|(x, y)| {
            x.rows() == y.rows()
                && x.data().len() == y.data().len()
                && x.data().iter().zip(y.data()).all(|(p, q)| p.to_bits() == q.to_bits())
        })
}

fn same_result_bits(a: &ForwardResult, b: &ForwardResult) -> bool {
    same_bits(&a.original, &b.original)
        && same_bits(&a.modified, &b.modified)
        && same_bits(&a.attention, &b.attention)
        && a.hidden.len() == b.hidden.len()
        && a.hidden.iter().zip(&b.hidden).all(|(x, y)| {
            x.iter().zip(y).all(|(p, q)| p.to_bits() == q.to_bits())
        })
}

fn identity() -> Outcome {
    let start = Instant::now();
    let mut checked = 0;
    for seed in 0..10 {
        let (spec, layout, model) = toy(seed);
        let emb = spec.embeddings(&layout, 0);
        let hook = make_dtr_hook(DtrConfig::new(0.0, 0.0, 0, 3), &layout).map_err(fail)?;
        let (a, ca) = model.prefill_with_cache(&emb, &layout, None).map_err(fail)?;
        let (b, cb) = model.prefill_with_cache(&emb, &layout, Some(&hook)).map_err(fail)?;
        ensure!(same_result_bits(&a, &b), "prefill differs at seed {seed}");
        let e = seeded_decode_embedding(seed, 0, spec.model_dim);
        let (da, _) = model.decode_step(ca, &e, &layout, None).map_err(fail)?;
        let (db, _) = model.decode_step(cb, &e, &layout, Some(&hook)).map_err(fail)?;
        ensure!(same_result_bits(&da, &db), "decode differs at seed {seed}");
        checked += 1;
    }
    let took = start.elapsed();
    ensure!(took < IDENTITY_BUDGET, "took {took:?}");
    Ok(format!("{checked} seeds bitwise equal, prefill and decode, {took:.2?}"))
}

fn row_sums_ok(result: &ForwardResult) -> Result<usize, String> {
    let mut rows = 0;
    for (l, layer) in result.attention.layers.iter().enumerate() {
        for h in 0..layer.heads() {
            for p in 0..layer.rows().len() {
                let s: f64 = layer.row(h, p).iter().sum();
                ensure!((s - 1.0).abs() <= ROW_SUM_TOL, "layer {l} head {h} row {p} sums to {s}");
                rows += 1;
            }
        }
    }
    Ok(rows)
}

fn normalization() -> Outcome {
    let mut rows = 0;
    for seed in 0..SEEDS {
        let (spec, layout, model) = toy(seed);
        let emb = spec.embeddings(&layout, 0);
        let dtr = make_dtr_hook(dtr_config(), &layout).map_err(fail)?;
        let mask = mask_hook(&InterventionSpec::mask_frame((seed % 8) as usize, 1, 3), &layout)
            .map_err(fail)?;
        rows += row_sums_ok(&model.prefill(&emb, &layout, None).map_err(fail)?)?;
        rows += row_sums_ok(&model.prefill(&emb, &layout, Some(&dtr)).map_err(fail)?)?;
        rows += row_sums_ok(&model.prefill(&emb, &layout, Some(&mask)).map_err(fail)?)?;
    }
    Ok(format!("{rows} rows over {SEEDS} seeds within {ROW_SUM_TOL:e}"))
}

fn text_mass(weights: &[f64], layout: &FrameLayout) -> f64 {
    weights
        .iter()
        .enumerate()
        .filter(|(j, _)| !layout.is_visual(*j))
        .map(|(_, w)| w)
        .sum()
}

/// Plain softmax with masked entries at zero, written out for the oracles.
fn oracle_softmax(row: &[f64]) -> Vec<f64> {
    let mut max = f64::NEG_INFINITY;
    for &z in row {
        if !is_masked(z) && z > max {
            max = z;
        }
    }
    let mut out = vec![0.0; row.len()];
    let mut sum = 0.0;
    for (j, &z) in row.iter().enumerate() {
        if !is_masked(z) {
            out[j] = (z - max).exp();
            sum += out[j];
        }
    }
    for w in &mut out {
        *w /= sum;
    }
    out
}

fn monotone_lift() -> Outcome {
    let cfg = dtr_config();
    let mut entries = 0;
    for seed in 0..SEEDS {
        let (spec, layout, model) = toy(seed);
        let emb = spec.embeddings(&layout, 0);
        let hook = make_dtr_hook(cfg, &layout).map_err(fail)?;
        let r = model.prefill(&emb, &layout, Some(&hook)).map_err(fail)?;
        let q = build_query_plan(&layout, Stage::Prefill).map_err(fail)?.target_query;
        for l in cfg.window() {
            let (o, m) = (r.original.layer(l), r.modified.layer(l));
            for h in 0..o.heads() {
                let (zo, zm) = (o.query_row(h, q).unwrap(), m.query_row(h, q).unwrap());
                for j in 0..zo.len() {
                    if layout.is_visual(j) {
                        ensure!(zm[j] >= zo[j], "seed {seed} layer {l} head {h} key {j} lowered");
                        entries += 1;
                    }
                }
                let before = text_mass(&oracle_softmax(zo), &layout);
                let after = text_mass(r.attention.layer(l).query_row(h, q).unwrap(), &layout);
                ensure!(
                    after <= before + TEXT_MASS_TOL,
                    "seed {seed} layer {l} head {h}: text mass {before} -> {after}"
                );
            }
        }
    }
    Ok(format!("{entries} visual logits lifted, text mass non-increasing, {SEEDS} seeds"))
}

/// The bias formula written out directly.
fn direct_bias(s: &[f64], alpha: f64, beta: f64, eps: f64) -> Vec<f64> {
    let top = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let max_gap = s.iter().map(|x| top - x).fold(0.0, f64::max);
    s.iter().map(|x| alpha + beta * ((top - x) / (max_gap + eps))).collect()
}

fn bias_structure() -> Outcome {
    ensure!(DEFAULT_EPSILON == STABILITY_EPSILON, "epsilon is {DEFAULT_EPSILON}");
    let cfg = DtrConfig::new(0.5, 0.3, 0, 0);
    let b = gaps_and_bias(&[3.0, 1.0, 2.0], &cfg).bias;
    let expected = [0.5, 0.79999985, 0.649999925];
    for (x, y) in b.iter().zip(expected) {
        ensure!((x - y).abs() < BIAS_TOL, "worked example gives {b:?}");
    }

    let mut runner = TestRunner::new(RunnerConfig {
        cases: 512,
        failure_persistence: None,
        ..RunnerConfig::default()
    });
    let strategy = (
        proptest::collection::vec(-50.0f64..50.0, 1..12),
        0.0f64..2.0,
        0.0f64..2.0,
    );
    runner
        .run(&strategy, |(s, alpha, beta)| {
            let cfg = DtrConfig::new(alpha, beta, 0, 0);
            let got = gaps_and_bias(&s, &cfg).bias;
            let want = direct_bias(&s, alpha, beta, STABILITY_EPSILON);
            for i in 0..s.len() {
                prop_assert!((got[i] - want[i]).abs() < BIAS_TOL);
                prop_assert!(got[i] >= alpha);
                prop_assert!(beta == 0.0 || got[i] < alpha + beta);
                for k in 0..s.len() {
                    if s[i] > s[k] {
                        prop_assert!(got[i] <= got[k]);
                    }
                }
            }
            let flat = vec![s[0]; s.len()];
            prop_assert!(gaps_and_bias(&flat, &cfg).bias.iter().all(|&x| x == alpha));
            Ok(())
        })
        .map_err(fail)?;
    Ok("worked example, 512 random score sets, all-equal gives alpha exactly".into())
}

#[derive(Debug, Clone)]
struct Instance {
    layout: FrameLayout,
    heads: usize,
    rows: Vec<usize>,
    /// `[layer][head][row][key]`, `None` for masked.
    dense: Vec<Vec<Vec<Vec<Option<f64>>>>>,
}

impl Instance {
    fn tensor(&self) -> LogitTensor {
        let len = self.layout.total_len();
        LogitTensor::new(
            self.dense
                .iter()
                .map(|layer| {
                    let mut out = LayerLogits::zeros(self.heads, self.rows.clone(), len);
                    for h in 0..self.heads {
                        for p in 0..self.rows.len() {
                            for (j, z) in out.row_mut(h, p).iter_mut().enumerate() {
                                *z = layer[h][p][j].unwrap_or(MASKED_LOGIT);
                            }
                        }
                    }
                    out
                })
                .collect(),
        )
    }
}

fn instance_strategy() -> impl Strategy<Value = Instance> {
    (
        0usize..3,
        proptest::collection::vec(1usize..4, 1..6),
        1usize..4,
        1usize..4,
        1usize..4,
    )
        .prop_flat_map(|(prefix, frames, suffix, layers, heads)| {
            let layout = FrameLayout::with_frame_lengths(prefix, &frames, suffix).unwrap();
            let len = layout.total_len();
            let visual_end = layout.visual_block().end;
            let rows = proptest::sample::subsequence((0..len).collect::<Vec<_>>(), 1..=len.min(4))
                .prop_filter("a row past the visual block", move |r| {
                    r.iter().any(|&q| q >= visual_end)
                });
            let values = proptest::collection::vec(-8.0f64..8.0, layers * heads * 4 * len);
            (Just(layout), Just(heads), Just(layers), rows, values)
        })
        .prop_map(|(layout, heads, layers, rows, values)| {
            let len = layout.total_len();
            let mut it = values.into_iter();
            let dense = (0..layers)
                .map(|_| {
                    (0..heads)
                        .map(|_| {
                            rows.iter()
                                .map(|&q| {
                                    (0..len)
                                        .map(|j| {
                                            let z = it.next().unwrap();
                                            (j <= q).then_some(z)
                                        })
                                        .collect()
                                })
                                .collect()
                        })
                        .collect()
                })
                .collect();
            Instance {
                layout,
                heads,
                rows,
                dense,
            }
        })
}

fn oracle_averaged(inst: &Instance) -> Vec<Vec<Option<f64>>> {
    let len = inst.layout.total_len();
    inst.dense
        .iter()
        .map(|layer| {
            (0..len)
                .map(|j| {
                    let mut sum = 0.0;
                    for h in 0..inst.heads {
                        for p in 0..inst.rows.len() {
                            sum += layer[h][p][j]?;
                        }
                    }
                    Some(sum / (inst.heads * inst.rows.len()) as f64)
                })
                .collect()
        })
        .collect()
}

fn oracles() -> Outcome {
    let mut runner = TestRunner::new(RunnerConfig {
        cases: ORACLE_CASES,
        failure_persistence: None,
        ..RunnerConfig::default()
    });
    runner
        .run(&instance_strategy(), |inst| {
            let tensor = inst.tensor();
            let layout = &inst.layout;
            let avg = oracle_averaged(&inst);

            let got = averaged_logits(&tensor, &inst.rows).unwrap();
            for (g, w) in got.iter().zip(&avg) {
                for (x, y) in g.iter().zip(w) {
                    match y {
                        Some(y) => prop_assert!((x - y).abs() < ORACLE_TOL),
                        None => prop_assert!(is_masked(*x)),
                    }
                }
            }

            let plan = QueryPlan {
                score_queries: inst.rows.clone(),
                target_query: *inst.rows.last().unwrap(),
            };
            for (l, layer) in tensor.layers.iter().enumerate() {
                let scores = frame_scores(layer, layout, &plan).unwrap();
                for (span, s) in layout.frame_spans().iter().zip(&scores) {
                    let vals: Vec<f64> = (span.start..span.end).filter_map(|j| avg[l][j]).collect();
                    let want = (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64);
                    match (s, want) {
                        (Some(a), Some(b)) => prop_assert!((a - b).abs() < ORACLE_TOL),
                        (None, None) => {}
                        _ => prop_assert!(false, "score presence differs"),
                    }
                }
            }

            let table = frame_mass(&got, layout).unwrap();
            let mut mean = vec![0.0; layout.num_frames()];
            for (l, row) in avg.iter().enumerate() {
                let dense: Vec<f64> = row.iter().map(|z| z.unwrap_or(MASKED_LOGIT)).collect();
                let w = oracle_softmax(&dense);
                for (i, span) in layout.frame_spans().iter().enumerate() {
                    let m: f64 = (span.start..span.end).map(|j| w[j]).sum();
                    prop_assert!((table.mass[l][i] - m).abs() < ORACLE_TOL);
                    mean[i] += table.mass[l][i] / avg.len() as f64;
                }
            }
            let mut best = 0;
            for i in 1..mean.len() {
                if mean[i] > mean[best] {
                    best = i;
                }
            }
            prop_assert_eq!(select_anchor(&table).unwrap(), best);
            Ok(())
        })
        .map_err(fail)?;
    Ok(format!(
        "averaged_logits, frame_scores, frame_mass, select_anchor on {ORACLE_CASES} instances within {ORACLE_TOL:e}"
    ))
}

fn decode_consistency() -> Outcome {
    let mut worst: f64 = 0.0;
    for seed in 0..DECODE_SEEDS {
        let model = Model::new(ModelConfig {
            seed,
            ..ModelConfig::default()
        })
        .map_err(fail)?;
        let layout = FrameLayout::uniform(2, 8, 4, 3).map_err(fail)?;
        let emb = seeded_embeddings(&layout, seed, 32);
        let (_, mut cache) = model.prefill_with_cache(&emb, &layout, None).map_err(fail)?;
        let mut all = emb;
        for t in 0..DECODE_STEPS {
            let e = seeded_decode_embedding(seed, t, 32);
            let (step, next) = model.decode_step(cache, &e, &layout, None).map_err(fail)?;
            cache = next;
            all.push(e);
            let longer = FrameLayout::uniform(2, 8, 4, 3 + t + 1).map_err(fail)?;
            let full = model.prefill(&all, &longer, None).map_err(fail)?;
            let row = layout.total_len() + t;
            for (a, b) in [(&step.original, &full.original), (&step.attention, &full.attention)] {
                for l in 0..a.num_layers() {
                    for h in 0..a.layer(l).heads() {
                        let x = a.layer(l).row(h, 0);
                        let y = b.layer(l).query_row(h, row).unwrap();
                        for (p, q) in x.iter().zip(y) {
                            if !(is_masked(*p) && is_masked(*q)) {
                                worst = worst.max((p - q).abs());
                            }
                        }
                    }
                }
            }
        }
    }
    ensure!(worst < DECODE_TOL, "max deviation {worst:e}");
    Ok(format!(
        "{DECODE_SEEDS} seeds x {DECODE_STEPS} steps, max deviation {worst:.1e}"
    ))
}

fn masking() -> Outcome {
    let mut rows = 0;
    for seed in 0..SEEDS {
        let (spec, layout, model) = toy(seed);
        let frame = (seed % 8) as usize;
        let hook = mask_hook(&InterventionSpec::mask_frame(frame, 1, 3), &layout).map_err(fail)?;
        let r = model.prefill(&spec.embeddings(&layout, 0), &layout, Some(&hook)).map_err(fail)?;
        let span = layout.frame_span(frame).map_err(fail)?;
        for l in 1..4 {
            let att = r.attention.layer(l);
            for h in 0..att.heads() {
                for (p, &q) in att.rows().iter().enumerate() {
                    if q < span.start {
                        continue;
                    }
                    let mass: f64 = att.row(h, p)[span.start..span.end.min(q + 1)].iter().sum();
                    ensure!(mass == 0.0, "seed {seed} layer {l} head {h} row {q}: {mass}");
                    rows += 1;
                }
            }
        }
    }

    let tmp = tempfile::tempdir().map_err(fail)?;
    let spec = MaskStudySpec {
        toy: ToySpec {
            samples: 20,
            ..ToySpec::default()
        },
        window: None,
        fixed_frame: 3,
        task_frame: None,
    };
    let (dir, study) = mask_study(&spec, tmp.path()).map_err(fail)?;
    let names: Vec<_> = study.rows.iter().map(|r| r.condition).collect();
    ensure!(names == Condition::ALL, "conditions {names:?}");
    let table = read_csv(&dir.join("masking.csv")).map_err(fail)?;
    ensure!(table.rows.len() == 4, "{} rows in masking.csv", table.rows.len());
    for run in &study.rows[1].runs {
        ensure!(
            run.masked_frame == Some(run.report.reference_anchor),
            "mask-anchor run masked {:?}",
            run.masked_frame
        );
    }
    let summary: Vec<String> = study
        .rows
        .iter()
        .map(|r| format!("{} {:.3}", r.condition.name(), r.stats.dominance))
        .collect();
    Ok(format!("{rows} masked rows exactly zero; study: {}", summary.join(", ")))
}

/// Prefix 2, eight frames of four tokens, suffix 3. One head, three layers.
/// Frame 0 has the highest (least negative) logits; all visual logits are
/// negative so the rebalancing shrinks their magnitude.
fn ladder_instance() -> (FrameLayout, QueryPlan, LogitTensor) {
    let layout = FrameLayout::uniform(2, 8, 4, 3).unwrap();
    let plan = build_query_plan(&layout, Stage::Prefill).unwrap();
    let rows = plan.score_queries.clone();
    let len = layout.total_len();
    let layers = (0..3)
        .map(|l| {
            let mut layer = LayerLogits::zeros(1, rows.clone(), len);
            for (p, &q) in rows.iter().enumerate() {
                for (j, z) in layer.row_mut(0, p).iter_mut().enumerate() {
                    *z = if j > q {
                        MASKED_LOGIT
                    } else if !layout.is_visual(j) {
                        -3.0
                    } else {
                        let frame = (j - 2) / 4;
                        let wiggle = 0.05 * (((j + l + p) % 3) as f64 - 1.0);
                        if frame == 0 {
                            -6.0 + wiggle
                        } else {
                            -8.0 - 0.3 * frame as f64 + wiggle
                        }
                    };
                }
            }
            layer
        })
        .collect();
    (layout, plan, LogitTensor::new(layers))
}

/// Dominance and entropy of the target row after DTR, computed with loops.
fn ladder_oracle(
    layout: &FrameLayout,
    plan: &QueryPlan,
    logits: &LogitTensor,
    alpha: f64,
    beta: f64,
) -> (f64, f64) {
    let n = layout.num_frames();
    let mut dist = vec![0.0; n];
    for layer in &logits.layers {
        let pos: Vec<usize> = plan
            .score_queries
            .iter()
            .map(|q| layer.rows().iter().position(|r| r == q).unwrap())
            .collect();
        let mut s = vec![0.0; n];
        for (i, span) in layout.frame_spans().iter().enumerate() {
            for j in span.start..span.end {
                for &p in &pos {
                    s[i] += layer.get(0, p, j);
                }
            }
            s[i] /= (pos.len() * (span.end - span.start)) as f64;
        }
        let b = direct_bias(&s, alpha, beta, STABILITY_EPSILON);
        let t = layer.rows().iter().position(|&r| r == plan.target_query).unwrap();
        let mut row = layer.row(0, t).to_vec();
        for (i, span) in layout.frame_spans().iter().enumerate() {
            for j in span.start..span.end {
                row[j] += b[i] * row[j].abs();
            }
        }
        let w = oracle_softmax(&row);
        let mass: Vec<f64> = layout
            .frame_spans()
            .iter()
            .map(|sp| (sp.start..sp.end).map(|j| w[j]).sum())
            .collect();
        let total: f64 = mass.iter().sum();
        for i in 0..n {
            dist[i] += mass[i] / total / logits.num_layers() as f64;
        }
    }
    let dom = dist.iter().cloned().fold(0.0, f64::max);
    let ent = -dist.iter().filter(|&&p| p > 0.0).map(|p| p * p.ln()).sum::<f64>();
    (dom, ent)
}

fn ladder() -> Outcome {
    let (layout, plan, logits) = ladder_instance();
    for layer in &logits.layers {
        for p in 0..layer.rows().len() {
            for j in layout.visual_block().iter() {
                let z = layer.get(0, p, j);
                ensure!(is_masked(z) || z < 0.0, "visual logit {z} is not negative");
            }
        }
    }
    let ids = [0, 1, 2];
    let mut points = Vec::new();
    for preset in Preset::ALL {
        let cfg = preset.config(0, 2);
        let out = replay_non_propagated(&logits, &ids, &layout, &plan, &cfg, StatsScope::TargetRow)
            .map_err(fail)?;
        let (dom, ent) = ladder_oracle(&layout, &plan, &logits, cfg.alpha, cfg.beta);
        ensure!(
            (out.after.dominance - dom).abs() < LADDER_TOL && (out.after.entropy - ent).abs() < LADDER_TOL,
            "{}: got ({}, {}), oracle ({dom}, {ent})",
            preset.name(),
            out.after.dominance,
            out.after.entropy
        );
        ensure!(out.after.entropy <= MAX_ENTROPY_8, "entropy {} above ln 8", out.after.entropy);
        points.push((preset.name(), dom, ent));
    }
    for w in points.windows(2) {
        ensure!(w[1].1 < w[0].1, "dominance {} -> {} not decreasing", w[0].0, w[1].0);
        ensure!(w[1].2 > w[0].2, "entropy {} -> {} not increasing", w[0].0, w[1].0);
    }
    let text: Vec<String> = points
        .iter()
        .map(|(n, d, e)| format!("{n} {d:.3}/{e:.3}"))
        .collect();
    Ok(format!("dominance/entropy {}", text.join(", ")))
}

fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

fn trace_round_trip() -> Outcome {
    let (spec, layout, model) = toy(5);
    let r = model.prefill(&spec.embeddings(&layout, 0), &layout, None).map_err(fail)?;
    let t = AttentionTrace::from_forward(&r, &layout, spec.tag()).map_err(fail)?;
    let mut buf = Vec::new();
    write_trace(&t, &mut buf).map_err(fail)?;
    let back = read_trace(&mut buf.as_slice()).map_err(fail)?;
    let bits = |b: &[f32]| b.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    ensure!(bits(back.body()) == bits(t.body()), "body changed");
    ensure!(back == t, "header fields changed");

    let read = |name: &str| {
        let bytes = std::fs::read(fixture(name)).unwrap();
        read_trace(&mut bytes.as_slice())
    };
    let classes = [
        ("malformed_bad_magic.atrc", matches!(read("malformed_bad_magic.atrc"), Err(TraceError::BadMagic(_)))),
        ("malformed_bad_version.atrc", matches!(read("malformed_bad_version.atrc"), Err(TraceError::VersionMismatch { .. }))),
        ("malformed_truncated.atrc", matches!(read("malformed_truncated.atrc"), Err(TraceError::Truncated { .. }))),
        ("malformed_shape_mismatch.atrc", matches!(read("malformed_shape_mismatch.atrc"), Err(TraceError::ShapeMismatch(_)))),
        ("malformed_checksum.atrc", matches!(read("malformed_checksum.atrc"), Err(TraceError::ChecksumFail { .. }))),
    ];
    for (name, ok) in classes {
        ensure!(ok, "{name} gave the wrong error");
    }

    for name in ["golden_prefill.atrc", "golden_decode.atrc"] {
        let bytes = std::fs::read(fixture(name)).map_err(fail)?;
        let g = read_trace(&mut bytes.as_slice()).map_err(fail)?;
        let mut i = 0;
        for &l in &g.layer_ids {
            for h in 0..g.num_heads {
                for &q in &g.queries {
                    for j in 0..g.key_len {
                        let z = g.body()[i];
                        if j <= q {
                            let want = -0.125 * (l + 1) as f64 - 0.0625 * h as f64
                                - 0.03125 * j as f64
                                + 0.5 * (q % 3) as f64;
                            ensure!(z as f64 == want, "{name}: value {i} is {z}, want {want}");
                        } else {
                            ensure!(is_masked(z as f64), "{name}: value {i} not masked");
                        }
                        i += 1;
                    }
                }
            }
        }
        let mut again = Vec::new();
        write_trace(&g, &mut again).map_err(fail)?;
        ensure!(again == bytes, "{name} does not re-encode to the same bytes");
    }
    Ok("body bitwise, 5 malformed classes typed, 2 golden files identical".into())
}

fn cli(args: &[&str], out: &Path) -> Result<PathBuf, String> {
    let o = Command::new(env!("CARGO_BIN_EXE_temporal-rebalance"))
        .args(args)
        .arg("--out")
        .arg(out)
        .output()
        .map_err(fail)?;
    ensure!(
        o.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&o.stderr)
    );
    String::from_utf8_lossy(&o.stdout)
        .lines()
        .find_map(|l| l.strip_prefix("output: "))
        .map(PathBuf::from)
        .ok_or_else(|| "no output line".to_string())
}

fn cli_determinism() -> Outcome {
    let a = tempfile::tempdir().map_err(fail)?;
    let b = tempfile::tempdir().map_err(fail)?;
    let args = ["simulate", "--seed", "11", "--alpha", "0,0.5", "--beta", "0,0.3"];
    let da = cli(&args, a.path())?;
    let db = cli(&args, b.path())?;
    let read = |d: &Path| std::fs::read(d.join("summary.csv")).map_err(fail);
    ensure!(read(&da)? == read(&db)?, "summary.csv differs between identical runs");

    let start = Instant::now();
    let sweep = tempfile::tempdir().map_err(fail)?;
    let s = sweep.path();
    cli(&["simulate"], s)?;
    cli(&["simulate", "--ablation"], s)?;
    cli(&["simulate", "--decode-steps", "5"], s)?;
    cli(&["mask-study"], s)?;
    cli(&["black-frame"], s)?;
    let captures = cli(&["capture", "--decode-steps", "2"], s)?;
    let c = captures.to_str().unwrap();
    cli(&["analyze", c], s)?;
    cli(&["replay", c, "--preset", "all"], s)?;
    let took = start.elapsed();
    ensure!(took < SWEEP_BUDGET, "default sweep took {took:?}");
    Ok(format!("summary.csv byte-identical; default sweep {took:.2?}"))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 10] = [
        ("identity", identity),
        ("normalization", normalization),
        ("monotone lift", monotone_lift),
        ("bias structure", bias_structure),
        ("oracle equivalence", oracles),
        ("incremental consistency", decode_consistency),
        ("masking", masking),
        ("directional ladder", ladder),
        ("trace round trip", trace_round_trip),
        ("cli determinism", cli_determinism),
    ];
    panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    for (name, check) in criteria {
        let outcome = panic::catch_unwind(AssertUnwindSafe(check))
            .unwrap_or_else(|e| {
                let msg = e
                    .downcast_ref::<String>()
                    .cloned()
                    .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                    .unwrap_or_default();
                Err(format!("panicked: {msg}"))
            });
        match outcome {
            Ok(detail) => println!("PASS {name}: {detail}"),
            Err(why) => {
                failed += 1;
                println!("FAIL {name}: {why}");
            }
        }
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
