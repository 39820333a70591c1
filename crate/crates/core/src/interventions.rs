//! Diagnostic interventions: attention-level frame masking and black-frame
//! substitution, plus the four-condition masking study.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::analysis::{self, AnchorReport, MeanStats};
use crate::engine::{blank_embedding, ForwardResult, HookContext, LogitHook, Model};
use crate::error::{Error, Result};
use crate::layout::{build_query_plan, FrameLayout, Span, Stage};
use crate::tensor::{LayerLogits, MASKED_LOGIT};

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum InterventionKind {
    None,
    MaskFrames(Vec<usize>),
    /// One frame drawn uniformly from a seeded ChaCha8 stream.
    MaskRandom { seed: u64 },
    BlackFrame(usize),
}

/// Which rows a mask touches.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskRows {
    /// Every row that can see the masked keys.
    All,
    /// Only the stage's target row.
    Target,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InterventionSpec {
    pub kind: InterventionKind,
    /// Inclusive, 0-indexed. Table-style "layers 1–31" of a 32-layer
    /// decoder is `1..=31` here, leaving layer 0 untouched.
    pub layer_start: usize,
    pub layer_end: usize,
    pub applies_to: MaskRows,
}

impl InterventionSpec {
    pub fn mask_frame(frame: usize, layer_start: usize, layer_end: usize) -> Self {
        Self {
            kind: InterventionKind::MaskFrames(vec![frame]),
            layer_start,
            layer_end,
            applies_to: MaskRows::All,
        }
    }

    pub fn mask_random(seed: u64, layer_start: usize, layer_end: usize) -> Self {
        Self {
            kind: InterventionKind::MaskRandom { seed },
            layer_start,
            layer_end,
            applies_to: MaskRows::All,
        }
    }
}

/// Frame picked by [`InterventionKind::MaskRandom`].
pub fn random_frame(seed: u64, num_frames: usize) -> usize {
    ChaCha8Rng::seed_from_u64(seed).gen_range(0..num_frames)
}

/// Sets the selected frames' logits to −∞ inside the layer window.
#[derive(Debug, Clone)]
pub struct MaskHook {
    frames: Vec<usize>,
    spans: Vec<Span>,
    layer_start: usize,
    layer_end: usize,
    applies_to: MaskRows,
}

impl MaskHook {
    pub fn frames(&self) -> &[usize] {
        &self.frames
    }
}

pub fn mask_hook(spec: &InterventionSpec, layout: &FrameLayout) -> Result<MaskHook> {
    let n = layout.num_frames();
    let frames = match &spec.kind {
        InterventionKind::MaskFrames(f) => f.clone(),
        InterventionKind::MaskRandom { seed } => vec![random_frame(*seed, n)],
        _ => {
            return Err(Error::InvalidConfig("mask_hook needs a mask intervention".into()));
        }
    };
    let spans = frames
        .iter()
        .map(|&f| layout.frame_span(f))
        .collect::<Result<Vec<_>>>()?;
    if spec.layer_start > spec.layer_end {
        return Err(Error::InvalidConfig("mask layer window is reversed".into()));
    }
    Ok(MaskHook {
        frames,
        spans,
        layer_start: spec.layer_start,
        layer_end: spec.layer_end,
        applies_to: spec.applies_to,
    })
}

impl LogitHook for MaskHook {
    fn bind(&self, num_layers: usize, _layout: &FrameLayout) -> Result<()> {
        if self.layer_end >= num_layers {
            return Err(Error::LayerWindowOutOfRange {
                start: self.layer_start,
                end: self.layer_end,
                num_layers,
            });
        }
        Ok(())
    }

    fn apply(&self, ctx: &HookContext<'_>, logits: &mut LayerLogits) -> Result<()> {
        if ctx.layer < self.layer_start || ctx.layer > self.layer_end {
            return Ok(());
        }
        let positions: Vec<(usize, usize)> = match self.applies_to {
            MaskRows::All => logits.rows().iter().copied().enumerate().collect(),
            MaskRows::Target => {
                let q = build_query_plan(ctx.layout, ctx.stage)?.target_query;
                vec![(logits.require_row(q)?, q)]
            }
        };
        let keys = logits.keys();
        for h in 0..logits.heads() {
            for &(p, q) in &positions {
                let row = logits.row_mut(h, p);
                for span in &self.spans {
                    // keys after q are already causally masked
                    let end = span.end.min(q + 1).min(keys);
                    for z in row.iter_mut().take(end).skip(span.start) {
                        *z = MASKED_LOGIT;
                    }
                }
            }
        }
        Ok(())
    }
}

/// Replaces every token of `frame` with the blank (all-zero) embedding.
pub fn black_frame_embeddings(
    embeddings: &[Vec<f64>],
    layout: &FrameLayout,
    frame: usize,
) -> Result<Vec<Vec<f64>>> {
    let span = layout.frame_span(frame)?;
    if embeddings.len() != layout.total_len() {
        return Err(Error::ShapeMismatch(alloc::format!(
            "{} embeddings for {} tokens",
            embeddings.len(),
            layout.total_len()
        )));
    }
    Ok(embeddings
        .iter()
        .enumerate()
        .map(|(j, e)| {
            if span.contains(j) {
                blank_embedding(e.len())
            } else {
                e.clone()
            }
        })
        .collect())
}

/// A prefill input for the toy engine.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub embeddings: Vec<Vec<f64>>,
    pub layout: FrameLayout,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum AnchorSource {
    /// Each sample's anchor from its own unmasked run.
    Baseline,
    /// Precomputed anchors, one per sample.
    Given(Vec<usize>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Condition {
    Normal,
    MaskAnchor,
    MaskRandom,
    MaskFixed,
}

impl Condition {
    pub const ALL: [Condition; 4] = [
        Condition::Normal,
        Condition::MaskAnchor,
        Condition::MaskRandom,
        Condition::MaskFixed,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Condition::Normal => "normal",
            Condition::MaskAnchor => "mask_anchor",
            Condition::MaskRandom => "mask_random",
            Condition::MaskFixed => "mask_fixed_non_anchor",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StudyConfig {
    pub layer_start: usize,
    pub layer_end: usize,
    /// Sample `k` draws its random frame from seed `random_seed + k`.
    pub random_seed: u64,
    /// The fixed non-anchor frame; bumped to the next frame when it
    /// coincides with a sample's anchor.
    pub fixed_frame: usize,
    /// Layers feeding the statistics; `None` means the masking window.
    pub stats_layers: Option<Vec<usize>>,
}

impl StudyConfig {
    /// Mask every layer except the first, frame index 3 as the fixed frame.
    pub fn for_layers(num_layers: usize) -> Self {
        Self {
            layer_start: 1.min(num_layers - 1),
            layer_end: num_layers - 1,
            random_seed: 0,
            fixed_frame: 3,
            stats_layers: None,
        }
    }

    fn stats_layers(&self) -> Vec<usize> {
        self.stats_layers
            .clone()
            .unwrap_or_else(|| (self.layer_start..=self.layer_end).collect())
    }
}

pub type TaskScorer<'a> = &'a (dyn Fn(usize, &ForwardResult) -> f64 + Sync);

/// One sample's run under one condition.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionRun {
    pub condition: Condition,
    pub masked_frame: Option<usize>,
    pub report: AnchorReport,
    pub task_score: Option<f64>,
}

/// Runs all four conditions for one sample. `anchor` overrides the
/// baseline anchor when given.
pub fn study_sample(
    model: &Model,
    index: usize,
    sample: &Sample,
    anchor: Option<usize>,
    config: &StudyConfig,
    task: Option<TaskScorer<'_>>,
) -> Result<Vec<ConditionRun>> {
    let layout = &sample.layout;
    let n = layout.num_frames();
    let plan = build_query_plan(layout, Stage::Prefill)?;
    let stats_layers = config.stats_layers();
    let stats = |r: &ForwardResult, reference: Option<usize>| {
        analysis::analyze_logits(
            &r.modified,
            layout,
            &plan.score_queries,
            Some(&stats_layers),
            reference,
        )
    };

    let normal = model.prefill(&sample.embeddings, layout, None)?;
    let normal_report = stats(&normal, None)?;
    let anchor = anchor.unwrap_or(normal_report.anchor);
    if anchor >= n {
        return Err(Error::FrameOutOfRange {
            frame: anchor,
            num_frames: n,
        });
    }
    let fixed = if config.fixed_frame % n == anchor {
        (anchor + 1) % n
    } else {
        config.fixed_frame % n
    };
    let random = random_frame(config.random_seed.wrapping_add(index as u64), n);

    let mut runs = Vec::with_capacity(4);
    for condition in Condition::ALL {
        let masked = match condition {
            Condition::Normal => None,
            Condition::MaskAnchor => Some(anchor),
            Condition::MaskRandom => Some(random),
            Condition::MaskFixed => Some(fixed),
        };
        let result = match masked {
            None => normal.clone(),
            Some(f) => {
                let hook = mask_hook(
                    &InterventionSpec::mask_frame(f, config.layer_start, config.layer_end),
                    layout,
                )?;
                model.prefill(&sample.embeddings, layout, Some(&hook))?
            }
        };
        let report = stats(&result, Some(anchor))?;
        runs.push(ConditionRun {
            condition,
            masked_frame: masked,
            report,
            task_score: task.map(|t| t(index, &result)),
        });
    }
    Ok(runs)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConditionRow {
    pub condition: Condition,
    pub stats: MeanStats,
    pub task_score: Option<f64>,
    pub runs: Vec<ConditionRun>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaskingStudy {
    pub rows: Vec<ConditionRow>,
}

/// Folds per-sample runs (as returned by [`study_sample`]) into the
/// four-row table.
pub fn aggregate_study(per_sample: Vec<Vec<ConditionRun>>) -> Result<MaskingStudy> {
    if per_sample.is_empty() {
        return Err(Error::EmptyInput);
    }
    let mut rows = Vec::with_capacity(4);
    for (c, condition) in Condition::ALL.into_iter().enumerate() {
        let runs: Vec<ConditionRun> = per_sample.iter().map(|s| s[c].clone()).collect();
        let reports: Vec<AnchorReport> = runs.iter().map(|r| r.report.clone()).collect();
        let stats = analysis::mean_stats(&reports)?;
        let scores: Option<Vec<f64>> = runs.iter().map(|r| r.task_score).collect();
        let task_score = scores.map(|s| s.iter().sum::<f64>() / s.len() as f64);
        rows.push(ConditionRow {
            condition,
            stats,
            task_score,
            runs,
        });
    }
    Ok(MaskingStudy { rows })
}

pub fn run_masking_study(
    model: &Model,
    samples: &[Sample],
    anchor_source: &AnchorSource,
    config: &StudyConfig,
    task: Option<TaskScorer<'_>>,
) -> Result<MaskingStudy> {
    if let AnchorSource::Given(a) = anchor_source {
        if a.len() != samples.len() {
            return Err(Error::ShapeMismatch(alloc::format!(
                "{} anchors for {} samples",
                a.len(),
                samples.len()
            )));
        }
    }
    let per_sample = samples
        .iter()
        .enumerate()
        .map(|(k, s)| {
            let anchor = match anchor_source {
                AnchorSource::Baseline => None,
                AnchorSource::Given(a) => Some(a[k]),
            };
            study_sample(model, k, s, anchor, config, task)
        })
        .collect::<Result<Vec<_>>>()?;
    aggregate_study(per_sample)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::{seeded_embeddings, ModelConfig};

    #[test]
    fn random_choice_is_reproducible() {
        let a = random_frame(42, 8);
        assert_eq!(a, random_frame(42, 8));
        assert!(a < 8);
        let picks: Vec<usize> = (0..64).map(|s| random_frame(s, 8)).collect();
        assert!(picks.iter().any(|&p| p != picks[0]));
    }

    #[test]
    fn out_of_range_frame() {
        let layout = FrameLayout::uniform(1, 4, 2, 2).unwrap();
        assert!(matches!(
            mask_hook(&InterventionSpec::mask_frame(4, 0, 0), &layout),
            Err(Error::FrameOutOfRange { frame: 4, .. })
        ));
        let emb = seeded_embeddings(&layout, 0, 8);
        assert!(matches!(
            black_frame_embeddings(&emb, &layout, 9),
            Err(Error::FrameOutOfRange { .. })
        ));
    }

    #[test]
    fn black_frame_only_touches_its_span() {
        let layout = FrameLayout::uniform(1, 3, 2, 2).unwrap();
        let emb = seeded_embeddings(&layout, 5, 8);
        let out = black_frame_embeddings(&emb, &layout, 1).unwrap();
        for j in 0..layout.total_len() {
            if (3..5).contains(&j) {
                assert_eq!(out[j], vec![0.0; 8]);
            } else {
                assert_eq!(out[j], emb[j]);
            }
        }
    }

    #[test]
    fn mask_zeroes_frame_weights() {
        let model = Model::new(ModelConfig::default()).unwrap();
        let layout = FrameLayout::uniform(2, 4, 3, 3).unwrap();
        let emb = seeded_embeddings(&layout, 1, 32);
        let hook = mask_hook(&InterventionSpec::mask_frame(2, 1, 3), &layout).unwrap();
        let r = model.prefill(&emb, &layout, Some(&hook)).unwrap();
        let span = layout.frame_span(2).unwrap();
        for (l, att) in r.attention.layers.iter().enumerate() {
            for h in 0..att.heads() {
                for (p, &q) in att.rows().iter().enumerate() {
                    let row = att.row(h, p);
                    let mass: f64 = row[span.start..span.end].iter().sum();
                    if l >= 1 && q >= span.start {
                        assert_eq!(mass, 0.0);
                    }
                    if q >= span.start && l == 0 {
                        assert!(mass > 0.0);
                    }
                    assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn target_only_mask() {
        let model = Model::new(ModelConfig::default()).unwrap();
        let layout = FrameLayout::uniform(0, 2, 2, 2).unwrap();
        let emb = seeded_embeddings(&layout, 1, 32);
        let spec = InterventionSpec {
            kind: InterventionKind::MaskFrames(vec![0]),
            layer_start: 0,
            layer_end: 0,
            applies_to: MaskRows::Target,
        };
        let hook = mask_hook(&spec, &layout).unwrap();
        let r = model.prefill(&emb, &layout, Some(&hook)).unwrap();
        let l0 = r.modified.layer(0);
        assert_eq!(l0.query_row(0, 5).unwrap()[0], MASKED_LOGIT);
        assert_ne!(l0.query_row(0, 4).unwrap()[0], MASKED_LOGIT);
    }

    #[test]
    fn mask_hook_rejects_non_mask_kind() {
        let layout = FrameLayout::uniform(0, 2, 2, 2).unwrap();
        let spec = InterventionSpec {
            kind: InterventionKind::BlackFrame(0),
            layer_start: 0,
            layer_end: 0,
            applies_to: MaskRows::All,
        };
        assert!(mask_hook(&spec, &layout).is_err());
    }
}
