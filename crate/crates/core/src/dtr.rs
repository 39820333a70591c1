//! Decoder-side temporal rebalancing.
//!
//! Per windowed layer: score each frame by its mean raw logit over tokens,
//! heads and score rows; measure each frame's deficit to the top-scored
//! frame; normalize by the largest deficit (plus `epsilon`); turn that into a
//! bias `alpha + beta * gap_hat`; then lift every visual logit of the target
//! row by `bias[frame] * |z|`. Text logits are never touched.

use alloc::format;
use alloc::vec::Vec;

use crate::analysis::{self, mean_logit, row_positions, AnchorReport, StatsScope};
use crate::engine::{HookContext, LogitHook};
use crate::error::{Error, Result};
use crate::layout::{build_query_plan, FrameLayout, QueryPlan};
use crate::tensor::{is_masked, LayerLogits, LogitTensor};

pub const DEFAULT_EPSILON: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct DtrConfig {
    pub alpha: f64,
    pub beta: f64,
    pub epsilon: f64,
    /// First windowed layer, inclusive, 0-indexed.
    pub layer_start: usize,
    /// Last windowed layer, inclusive.
    pub layer_end: usize,
}

impl DtrConfig {
    pub fn new(alpha: f64, beta: f64, layer_start: usize, layer_end: usize) -> Self {
        Self {
            alpha,
            beta,
            epsilon: DEFAULT_EPSILON,
            layer_start,
            layer_end,
        }
    }

    /// The operating point used on 32-layer backbones: α=0.5, β=0.4, layers 18–31.
    pub fn operating_point() -> Self {
        Self::new(0.5, 0.4, 18, 31)
    }

    pub fn in_window(&self, layer: usize) -> bool {
        self.layer_start <= layer && layer <= self.layer_end
    }

    pub fn window(&self) -> core::ops::RangeInclusive<usize> {
        self.layer_start..=self.layer_end
    }

    pub fn is_identity(&self) -> bool {
        self.alpha == 0.0 && self.beta == 0.0
    }

    /// Checks scalar ranges; the window is checked against a model in [`Self::validate`].
    pub fn check_scalars(&self) -> Result<()> {
        if !(self.alpha >= 0.0) || !self.alpha.is_finite() {
            return Err(Error::InvalidConfig(format!("alpha must be >= 0, got {}", self.alpha)));
        }
        if !(self.beta >= 0.0) || !self.beta.is_finite() {
            return Err(Error::InvalidConfig(format!("beta must be >= 0, got {}", self.beta)));
        }
        if !(self.epsilon > 0.0) || !self.epsilon.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "epsilon must be > 0, got {}",
                self.epsilon
            )));
        }
        if self.layer_start > self.layer_end {
            return Err(Error::InvalidConfig(format!(
                "layer window {}:{} is reversed",
                self.layer_start, self.layer_end
            )));
        }
        Ok(())
    }

    pub fn validate(&self, num_layers: usize) -> Result<()> {
        self.check_scalars()?;
        if self.layer_end >= num_layers {
            return Err(Error::LayerWindowOutOfRange {
                start: self.layer_start,
                end: self.layer_end,
                num_layers,
            });
        }
        Ok(())
    }
}

/// The four-row attention-statistics ladder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Preset {
    Baseline,
    GlobalOnly,
    CompensationOnly,
    Full,
}

impl Preset {
    pub const ALL: [Preset; 4] = [
        Preset::Baseline,
        Preset::GlobalOnly,
        Preset::CompensationOnly,
        Preset::Full,
    ];

    pub fn alpha_beta(self) -> (f64, f64) {
        match self {
            Preset::Baseline => (0.0, 0.0),
            Preset::GlobalOnly => (0.5, 0.0),
            Preset::CompensationOnly => (0.0, 0.3),
            Preset::Full => (0.5, 0.3),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Preset::Baseline => "baseline",
            Preset::GlobalOnly => "global",
            Preset::CompensationOnly => "comp",
            Preset::Full => "dtr",
        }
    }

    pub fn from_name(name: &str) -> Option<Preset> {
        Preset::ALL.into_iter().find(|p| p.name() == name)
    }

    pub fn config(self, layer_start: usize, layer_end: usize) -> DtrConfig {
        let (a, b) = self.alpha_beta();
        DtrConfig::new(a, b, layer_start, layer_end)
    }
}

/// Per-frame score of one layer; `None` for a frame whose keys are all
/// masked for the score rows.
pub fn frame_scores(
    layer: &LayerLogits,
    layout: &FrameLayout,
    plan: &QueryPlan,
) -> Result<Vec<Option<f64>>> {
    let positions = row_positions(layer, &plan.score_queries)?;
    if layer.keys() < layout.visual_block().end {
        return Err(Error::ShapeMismatch(format!(
            "{} keys do not cover the visual block",
            layer.keys()
        )));
    }
    Ok(layout
        .frame_spans()
        .iter()
        .map(|span| {
            let (sum, count) = span
                .iter()
                .filter_map(|j| mean_logit(layer, &positions, j))
                .fold((0.0, 0usize), |(s, c), z| (s + z, c + 1));
            (count > 0).then(|| sum / count as f64)
        })
        .collect())
}

/// Gaps, normalized gaps and biases for one layer.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct FrameBias {
    pub gaps: Vec<f64>,
    pub normalized_gaps: Vec<f64>,
    pub bias: Vec<f64>,
}

pub fn gaps_and_bias(scores: &[f64], config: &DtrConfig) -> FrameBias {
    let top = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let gaps: Vec<f64> = scores.iter().map(|s| top - s).collect();
    let max_gap = gaps.iter().copied().fold(0.0, f64::max);
    let normalized_gaps: Vec<f64> = gaps.iter().map(|g| g / (max_gap + config.epsilon)).collect();
    let bias = normalized_gaps
        .iter()
        .map(|g| config.alpha + config.beta * g)
        .collect();
    FrameBias {
        gaps,
        normalized_gaps,
        bias,
    }
}

/// Like [`gaps_and_bias`] over the frames that have a score; unscored
/// (fully masked) frames get zero gap and zero bias.
pub fn frame_bias(scores: &[Option<f64>], config: &DtrConfig) -> FrameBias {
    let present: Vec<f64> = scores.iter().flatten().copied().collect();
    let dense = gaps_and_bias(&present, config);
    let mut out = FrameBias {
        gaps: Vec::with_capacity(scores.len()),
        normalized_gaps: Vec::with_capacity(scores.len()),
        bias: Vec::with_capacity(scores.len()),
    };
    let mut k = 0;
    for s in scores {
        if s.is_some() {
            out.gaps.push(dense.gaps[k]);
            out.normalized_gaps.push(dense.normalized_gaps[k]);
            out.bias.push(dense.bias[k]);
            k += 1;
        } else {
            out.gaps.push(0.0);
            out.normalized_gaps.push(0.0);
            out.bias.push(0.0);
        }
    }
    out
}

/// `z + bias[frame(j)] * |z|` on visual keys; text and masked keys unchanged.
pub fn inject_bias_in_place(row: &mut [f64], layout: &FrameLayout, bias: &[f64]) {
    let len = row.len();
    for (span, &b) in layout.frame_spans().iter().zip(bias) {
        if b == 0.0 {
            continue;
        }
        for z in row[span.start.min(len)..span.end.min(len)].iter_mut() {
            if !is_masked(*z) {
                *z += b * z.abs();
            }
        }
    }
}

pub fn inject_bias(row: &[f64], layout: &FrameLayout, bias: &[f64]) -> Vec<f64> {
    let mut out = row.to_vec();
    inject_bias_in_place(&mut out, layout, bias);
    out
}

/// Scores and biases computed at one layer.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct LayerBias {
    pub layer: usize,
    pub scores: Vec<Option<f64>>,
    pub bias: FrameBias,
}

#[derive(Debug, Clone, PartialEq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct FrameScoreState {
    pub layers: Vec<LayerBias>,
}

/// Scores the layer from its current logits and rewrites the target row of
/// every head.
pub fn rebalance_layer(
    logits: &mut LayerLogits,
    layer: usize,
    layout: &FrameLayout,
    plan: &QueryPlan,
    config: &DtrConfig,
) -> Result<LayerBias> {
    let scores = frame_scores(logits, layout, plan)?;
    let bias = frame_bias(&scores, config);
    let target = logits.require_row(plan.target_query)?;
    for h in 0..logits.heads() {
        inject_bias_in_place(logits.row_mut(h, target), layout, &bias.bias);
    }
    Ok(LayerBias {
        layer,
        scores,
        bias,
    })
}

/// Engine hook applying the rebalancing inside the configured window.
#[derive(Debug, Clone)]
pub struct DtrHook {
    config: DtrConfig,
    layout: FrameLayout,
}

pub fn make_dtr_hook(config: DtrConfig, layout: &FrameLayout) -> Result<DtrHook> {
    config.check_scalars()?;
    Ok(DtrHook {
        config,
        layout: layout.clone(),
    })
}

impl DtrHook {
    pub fn config(&self) -> &DtrConfig {
        &self.config
    }
}

impl LogitHook for DtrHook {
    fn bind(&self, num_layers: usize, layout: &FrameLayout) -> Result<()> {
        self.config.validate(num_layers)?;
        if layout != &self.layout {
            return Err(Error::ShapeMismatch("hook was built for a different layout".into()));
        }
        Ok(())
    }

    fn apply(&self, ctx: &HookContext<'_>, logits: &mut LayerLogits) -> Result<()> {
        if !self.config.in_window(ctx.layer) {
            return Ok(());
        }
        let plan = build_query_plan(&self.layout, ctx.stage)?;
        rebalance_layer(logits, ctx.layer, &self.layout, &plan, &self.config)?;
        Ok(())
    }
}

/// Outcome of a counterfactual rebalancing of captured logits.
///
/// Each layer is rebalanced on its own captured logits; nothing flows to
/// later layers, so these numbers are "non-propagated".
#[derive(Debug, Clone, PartialEq)]
pub struct ReplayOutcome {
    pub before: AnchorReport,
    pub after: AnchorReport,
    /// Non-anchor mass of `after` measured against `before`'s anchor.
    pub non_anchor_vs_before: f64,
    pub state: FrameScoreState,
    pub modified: LogitTensor,
}

pub const NON_PROPAGATED: &str = "non-propagated";

/// Rebalances captured logits layer by layer and compares statistics.
///
/// `layer_ids[k]` is the model layer held in `logits.layers[k]`.
pub fn replay_non_propagated(
    logits: &LogitTensor,
    layer_ids: &[usize],
    layout: &FrameLayout,
    plan: &QueryPlan,
    config: &DtrConfig,
    scope: StatsScope,
) -> Result<ReplayOutcome> {
    config.check_scalars()?;
    if layer_ids.len() != logits.num_layers() {
        return Err(Error::ShapeMismatch(format!(
            "{} layer ids for {} layers",
            layer_ids.len(),
            logits.num_layers()
        )));
    }
    let missing: Vec<usize> = config
        .window()
        .filter(|l| !layer_ids.contains(l))
        .collect();
    if !missing.is_empty() {
        return Err(Error::MissingLayers(missing));
    }

    let mut modified = logits.clone();
    let mut state = FrameScoreState::default();
    for (layer, &id) in modified.layers.iter_mut().zip(layer_ids) {
        if config.in_window(id) {
            state
                .layers
                .push(rebalance_layer(layer, id, layout, plan, config)?);
        }
    }

    let rows: Vec<usize> = match scope {
        StatsScope::ScoreQueries => plan.score_queries.clone(),
        StatsScope::TargetRow => alloc::vec![plan.target_query],
    };
    let stats = |t: &LogitTensor| analysis::analyze_labeled(t, layer_ids, layout, &rows, None);
    let before = stats(logits)?;
    let after = stats(&modified)?;
    let non_anchor_vs_before = 1.0 - after.distribution[before.anchor];
    Ok(ReplayOutcome {
        before,
        after,
        non_anchor_vs_before,
        state,
        modified,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layout::{Span, Stage};
    use alloc::vec;

    fn cfg(alpha: f64, beta: f64) -> DtrConfig {
        DtrConfig::new(alpha, beta, 0, 0)
    }

    #[test]
    fn single_token_score_is_its_logit() {
        let layout = FrameLayout::new(vec![Span::new(0, 1)], vec![Span::new(1, 2)], 2).unwrap();
        let layer = LayerLogits::from_data(1, vec![1], 2, vec![-3.0, 0.0]).unwrap();
        let plan = build_query_plan(&layout, Stage::Prefill).unwrap();
        assert_eq!(frame_scores(&layer, &layout, &plan).unwrap(), vec![Some(-3.0)]);
    }

    #[test]
    fn two_token_frame_averages() {
        let layout = FrameLayout::new(vec![Span::new(0, 2)], vec![Span::new(2, 3)], 3).unwrap();
        let layer = LayerLogits::from_data(1, vec![2], 3, vec![-1.0, -3.0, 0.0]).unwrap();
        let plan = build_query_plan(&layout, Stage::Prefill).unwrap();
        assert_eq!(frame_scores(&layer, &layout, &plan).unwrap(), vec![Some(-2.0)]);
    }

    #[test]
    fn gap_and_bias_hand_values() {
        let fb = gaps_and_bias(&[3.0, 1.0, 2.0], &cfg(0.5, 0.3));
        assert_eq!(fb.gaps, vec![0.0, 2.0, 1.0]);
        let expected_hat = [0.0, 2.0 / 2.000001, 1.0 / 2.000001];
        let expected_b = [0.5, 0.79999985, 0.649999925];
        for i in 0..3 {
            assert!((fb.normalized_gaps[i] - expected_hat[i]).abs() < 1e-12);
            assert!((fb.bias[i] - expected_b[i]).abs() < 1e-8);
        }
        assert!((fb.normalized_gaps[1] - 0.9999995).abs() < 1e-9);
        assert!((fb.normalized_gaps[2] - 0.49999975).abs() < 1e-9);
    }

    #[test]
    fn equal_scores_give_alpha() {
        let fb = gaps_and_bias(&[1.5; 4], &cfg(0.7, 0.4));
        assert_eq!(fb.bias, vec![0.7; 4]);
        let fb = gaps_and_bias(&[3.0, 1.0, 2.0], &cfg(0.0, 0.0));
        assert_eq!(fb.bias, vec![0.0; 3]);
    }

    #[test]
    fn injection_hand_values() {
        let layout = FrameLayout::uniform(0, 1, 2, 1).unwrap();
        assert_eq!(inject_bias(&[-2.0, 0.0, -2.0], &layout, &[0.5]), vec![-1.0, 0.0, -2.0]);
        assert_eq!(inject_bias(&[-2.0, 4.0, 1.0], &layout, &[0.0]), vec![-2.0, 4.0, 1.0]);
        assert_eq!(inject_bias(&[3.0, 1.0, 1.0], &layout, &[0.5]), vec![4.5, 1.5, 1.0]);
    }

    #[test]
    fn masked_keys_are_skipped() {
        let layout = FrameLayout::uniform(0, 1, 2, 1).unwrap();
        let row = [crate::tensor::MASKED_LOGIT, -1.0, 0.0];
        let out = inject_bias(&row, &layout, &[0.5]);
        assert_eq!(out[0], crate::tensor::MASKED_LOGIT);
        assert_eq!(out[1], -0.5);
    }

    #[test]
    fn unscored_frames_get_no_bias() {
        let fb = frame_bias(&[Some(1.0), None, Some(-1.0)], &cfg(0.5, 0.3));
        assert_eq!(fb.bias[1], 0.0);
        assert_eq!(fb.bias[0], 0.5);
        assert!((fb.bias[2] - (0.5 + 0.3 * 2.0 / 2.000001)).abs() < 1e-15);
    }

    #[test]
    fn config_validation() {
        assert!(DtrConfig::operating_point().validate(32).is_ok());
        assert_eq!(
            DtrConfig::operating_point().validate(31),
            Err(Error::LayerWindowOutOfRange {
                start: 18,
                end: 31,
                num_layers: 31
            })
        );
        assert!(DtrConfig::new(-0.1, 0.0, 0, 0).check_scalars().is_err());
        assert!(DtrConfig::new(0.1, f64::NAN, 0, 0).check_scalars().is_err());
        assert!(DtrConfig::new(0.1, 0.1, 2, 1).check_scalars().is_err());
        let mut c = DtrConfig::new(0.1, 0.1, 0, 1);
        c.epsilon = 0.0;
        assert!(c.check_scalars().is_err());
    }

    #[test]
    fn presets() {
        assert_eq!(Preset::from_name("comp"), Some(Preset::CompensationOnly));
        assert_eq!(Preset::Full.alpha_beta(), (0.5, 0.3));
        assert_eq!(Preset::from_name("nope"), None);
    }
}
