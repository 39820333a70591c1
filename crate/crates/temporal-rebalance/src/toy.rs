//! Synthetic samples on the toy engine.

use serde::{Deserialize, Serialize};
use temporal_rebalance_core::engine::seeded_embeddings;
use temporal_rebalance_core::{
    build_query_plan, AnchorReport, Error as CoreError, ForwardResult, FrameLayout, Model,
    ModelConfig, StatsScope,
};

use crate::error::Result;

/// Logit boost of the anchor-dominant generator. Calibrated so the default
/// toy setup's target-row baseline dominance sits near 0.746 (seeds 0-3,
/// 50 samples each); see [`calibrate_delta`].
pub const DEFAULT_DELTA: f64 = 3.05;

pub const DEFAULT_LOGIT_OFFSET: f64 = -8.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Generator {
    /// Adds `delta` to every raw logit targeting `frame`'s keys.
    AnchorDominant { delta: f64, frame: usize },
    /// No prior; anchors come from the random weights and embeddings.
    Random,
}

impl Default for Generator {
    fn default() -> Self {
        Generator::AnchorDominant {
            delta: DEFAULT_DELTA,
            frame: 0,
        }
    }
}

/// Model dimensions, token geometry and sampling.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToySpec {
    pub num_layers: usize,
    pub num_heads: usize,
    pub model_dim: usize,
    pub frames: usize,
    pub tokens_per_frame: usize,
    /// Text tokens before the visual block.
    pub prefix: usize,
    /// Text tokens after the visual block.
    pub suffix: usize,
    pub seed: u64,
    pub samples: usize,
    pub generator: Generator,
    /// Added to every raw logit. Leaves baseline attention unchanged
    /// (each row shifts uniformly) but sets the sign regime DTR's `|z|`
    /// sees; negative values put visual logits below zero.
    pub logit_offset: f64,
}

impl Default for ToySpec {
    fn default() -> Self {
        Self {
            num_layers: 4,
            num_heads: 4,
            model_dim: 32,
            frames: 8,
            tokens_per_frame: 4,
            prefix: 2,
            suffix: 6,
            seed: 0,
            samples: 10,
            generator: Generator::default(),
            logit_offset: DEFAULT_LOGIT_OFFSET,
        }
    }
}

impl ToySpec {
    pub fn layout(&self) -> Result<FrameLayout> {
        Ok(FrameLayout::uniform(
            self.prefix,
            self.frames,
            self.tokens_per_frame,
            self.suffix,
        )?)
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            num_layers: self.num_layers,
            num_heads: self.num_heads,
            model_dim: self.model_dim,
            seed: self.seed,
        }
    }

    pub fn model(&self, layout: &FrameLayout) -> Result<Model> {
        let model = Model::new(self.model_config())?;
        let mut prior = vec![self.logit_offset; layout.total_len()];
        if let Generator::AnchorDominant { delta, frame } = self.generator {
            let span = layout.frame_span(frame)?;
            prior[span.start..span.end].iter_mut().for_each(|p| *p += delta);
        }
        if prior.iter().all(|&p| p == 0.0) {
            return Ok(model);
        }
        Ok(model.with_key_prior(prior))
    }

    pub fn sample_seed(&self, k: usize) -> u64 {
        sample_seed(self.seed, k)
    }

    pub fn embeddings(&self, layout: &FrameLayout, k: usize) -> Vec<Vec<f64>> {
        seeded_embeddings(layout, self.sample_seed(k), self.model_dim)
    }

    pub fn check(&self) -> Result<()> {
        if !self.logit_offset.is_finite() {
            return Err(crate::Error::Usage("logit offset must be finite".into()));
        }
        if self.samples == 0 {
            return Err(crate::Error::Usage("sample count must be at least 1".into()));
        }
        self.model_config().validate()?;
        Ok(())
    }

    pub fn tag(&self) -> String {
        format!(
            "toy:L{}H{}d{}:seed{}",
            self.num_layers, self.num_heads, self.model_dim, self.seed
        )
    }
}

/// Embedding seed of sample `k`.
pub fn sample_seed(seed: u64, k: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(k as u64)
}

/// Stats of any forward result; the stage picks the rows.
pub fn report_for(
    result: &ForwardResult,
    layout: &FrameLayout,
    scope: StatsScope,
    layers: Option<&[usize]>,
    reference: Option<usize>,
) -> std::result::Result<AnchorReport, CoreError> {
    let plan = build_query_plan(layout, result.stage)?;
    let rows = match scope {
        StatsScope::ScoreQueries => plan.score_queries,
        StatsScope::TargetRow => vec![plan.target_query],
    };
    temporal_rebalance_core::analysis::analyze_logits(
        &result.modified,
        layout,
        &rows,
        layers,
        reference,
    )
}

/// Mean target-row baseline dominance of `spec` with anchor boost `delta`.
pub fn baseline_dominance(spec: &ToySpec, delta: f64) -> Result<f64> {
    let mut spec = spec.clone();
    let frame = match spec.generator {
        Generator::AnchorDominant { frame, .. } => frame,
        Generator::Random => 0,
    };
    spec.generator = Generator::AnchorDominant { delta, frame };
    let layout = spec.layout()?;
    let model = spec.model(&layout)?;
    let mut total = 0.0;
    for k in 0..spec.samples {
        let r = model.prefill(&spec.embeddings(&layout, k), &layout, None)?;
        total += report_for(&r, &layout, StatsScope::TargetRow, None, None)?.dominance;
    }
    Ok(total / spec.samples as f64)
}

/// Bisects the anchor boost so mean baseline dominance reaches `target`.
pub fn calibrate_delta(spec: &ToySpec, target: f64) -> Result<f64> {
    let (mut lo, mut hi) = (0.0f64, 20.0f64);
    for _ in 0..40 {
        let mid = 0.5 * (lo + hi);
        if baseline_dominance(spec, mid)? < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}
