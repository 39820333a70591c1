//! Anchor-frame statistics over pre-softmax logits.
//!
//! Logits of the collected query rows are averaged over rows and heads, the
//! average is softmaxed over the full key dimension, and each frame's mass is
//! the sum over its tokens. The anchor is the frame with the highest
//! layer-averaged mass. Dominance, entropy and non-anchor mass are read off
//! the per-layer distribution renormalized over frames, then averaged over
//! layers.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::layout::FrameLayout;
use crate::tensor::{is_masked, masked_softmax, LayerLogits, LogitTensor, MASKED_LOGIT};

/// Mean of `z[h][q][key]` over heads and the given rows.
///
/// A key masked in any averaged entry is masked in the result, which keeps
/// the average to keys every row can see.
pub(crate) fn mean_logit(layer: &LayerLogits, positions: &[usize], key: usize) -> Option<f64> {
    let mut sum = 0.0;
    for &p in positions {
        for h in 0..layer.heads() {
            let z = layer.get(h, p, key);
            if is_masked(z) {
                return None;
            }
            sum += z;
        }
    }
    Some(sum / (layer.heads() * positions.len()) as f64)
}

pub(crate) fn row_positions(layer: &LayerLogits, queries: &[usize]) -> Result<Vec<usize>> {
    if queries.is_empty() {
        return Err(Error::EmptyQuerySet);
    }
    queries.iter().map(|&q| layer.require_row(q)).collect()
}

/// Row- and head-averaged logits of one layer.
pub fn averaged_layer_logits(layer: &LayerLogits, queries: &[usize]) -> Result<Vec<f64>> {
    let positions = row_positions(layer, queries)?;
    Ok((0..layer.keys())
        .map(|j| mean_logit(layer, &positions, j).unwrap_or(MASKED_LOGIT))
        .collect())
}

/// Row- and head-averaged logits for every layer, `[layer][key]`.
pub fn averaged_logits(logits: &LogitTensor, queries: &[usize]) -> Result<Vec<Vec<f64>>> {
    logits
        .layers
        .iter()
        .map(|layer| averaged_layer_logits(layer, queries))
        .collect()
}

/// Frame-level attention mass per analyzed layer.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct FrameMassTable {
    /// Layer indices, parallel to `mass`.
    pub layers: Vec<usize>,
    /// `mass[l][i]`: summed softmax weight on frame `i` at `layers[l]`.
    pub mass: Vec<Vec<f64>>,
}

impl FrameMassTable {
    pub fn num_frames(&self) -> usize {
        self.mass.first().map_or(0, Vec::len)
    }

    /// Total visual mass per layer.
    pub fn visual_ratio(&self) -> Vec<f64> {
        self.mass.iter().map(|m| m.iter().sum()).collect()
    }

    /// Mass of each frame averaged over the analyzed layers.
    pub fn layer_averaged(&self) -> Result<Vec<f64>> {
        if self.mass.is_empty() {
            return Err(Error::EmptyLayerSet);
        }
        let n = self.num_frames();
        let mut avg = vec![0.0; n];
        for row in &self.mass {
            for (a, m) in avg.iter_mut().zip(row) {
                *a += m;
            }
        }
        let count = self.mass.len() as f64;
        avg.iter_mut().for_each(|a| *a /= count);
        Ok(avg)
    }

    /// Restricts the table to `layers`, in the given order.
    pub fn select_layers(&self, layers: &[usize]) -> Result<FrameMassTable> {
        let mut missing = Vec::new();
        let mut mass = Vec::with_capacity(layers.len());
        for &l in layers {
            match self.layers.iter().position(|&x| x == l) {
                Some(p) => mass.push(self.mass[p].clone()),
                None => missing.push(l),
            }
        }
        if !missing.is_empty() {
            return Err(Error::MissingLayers(missing));
        }
        Ok(FrameMassTable {
            layers: layers.to_vec(),
            mass,
        })
    }
}

fn frame_mass_row(avg: &[f64], layout: &FrameLayout) -> Result<Vec<f64>> {
    let visual_end = layout.visual_block().end;
    if avg.len() < visual_end {
        return Err(Error::ShapeMismatch(alloc::format!(
            "{} keys do not cover the visual block ending at {visual_end}",
            avg.len()
        )));
    }
    let p = masked_softmax(avg);
    Ok(layout
        .frame_spans()
        .iter()
        .map(|s| p[s.start..s.end].iter().sum())
        .collect())
}

/// Frame masses from averaged logits, one row per entry of `averaged`
/// (layer `l` is row `l`).
pub fn frame_mass(averaged: &[Vec<f64>], layout: &FrameLayout) -> Result<FrameMassTable> {
    let mass = averaged
        .iter()
        .map(|z| frame_mass_row(z, layout))
        .collect::<Result<Vec<_>>>()?;
    Ok(FrameMassTable {
        layers: (0..averaged.len()).collect(),
        mass,
    })
}

/// Argmax of layer-averaged frame mass; ties go to the lowest frame index.
pub fn select_anchor(masses: &FrameMassTable) -> Result<usize> {
    let avg = masses.layer_averaged()?;
    Ok(argmax_first(&avg))
}

pub(crate) fn argmax_first(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

fn entropy(p: &[f64]) -> f64 {
    -p.iter()
        .filter(|&&x| x > 0.0)
        .map(|&x| x * libm::log(x))
        .sum::<f64>()
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct LayerStats {
    pub layer: usize,
    /// Frame distribution renormalized over visual mass.
    pub distribution: Vec<f64>,
    pub dominance: f64,
    pub entropy: f64,
    pub visual_ratio: f64,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct AnchorReport {
    pub anchor: usize,
    pub reference_anchor: usize,
    pub num_frames: usize,
    /// Layer-averaged normalized frame distribution.
    pub distribution: Vec<f64>,
    pub dominance: f64,
    pub entropy: f64,
    pub non_anchor: f64,
    pub per_layer: Vec<LayerStats>,
}

impl AnchorReport {
    pub fn visual_ratio(&self) -> Vec<f64> {
        self.per_layer.iter().map(|l| l.visual_ratio).collect()
    }
}

/// Dominance, entropy (natural log) and non-anchor mass.
///
/// `reference_anchor` defaults to this table's own anchor; pass another
/// run's anchor to measure mass moved away from it.
pub fn attention_stats(
    masses: &FrameMassTable,
    reference_anchor: Option<usize>,
) -> Result<AnchorReport> {
    let anchor = select_anchor(masses)?;
    let n = masses.num_frames();
    let reference_anchor = reference_anchor.unwrap_or(anchor);
    if reference_anchor >= n {
        return Err(Error::FrameOutOfRange {
            frame: reference_anchor,
            num_frames: n,
        });
    }

    let mut per_layer = Vec::with_capacity(masses.layers.len());
    let mut distribution = vec![0.0; n];
    for (&layer, row) in masses.layers.iter().zip(&masses.mass) {
        let total: f64 = row.iter().sum();
        if !(total > 0.0) {
            return Err(Error::ZeroVisualMass { layer });
        }
        let p: Vec<f64> = row.iter().map(|a| a / total).collect();
        for (d, x) in distribution.iter_mut().zip(&p) {
            *d += x;
        }
        per_layer.push(LayerStats {
            layer,
            dominance: p.iter().copied().fold(0.0, f64::max),
            entropy: entropy(&p),
            distribution: p,
            visual_ratio: total,
        });
    }
    let count = per_layer.len() as f64;
    distribution.iter_mut().for_each(|d| *d /= count);

    Ok(AnchorReport {
        anchor,
        reference_anchor,
        num_frames: n,
        dominance: distribution.iter().copied().fold(0.0, f64::max),
        entropy: entropy(&distribution),
        non_anchor: 1.0 - distribution[reference_anchor],
        distribution,
        per_layer,
    })
}

/// Which rows feed the statistic.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StatsScope {
    /// The stage's score queries (the offline anchor statistic).
    ScoreQueries,
    /// Only the target row, the one a rebalancing hook edits.
    TargetRow,
}

/// Averaging → frame mass → layer selection → stats in one call.
pub fn analyze_logits(
    logits: &LogitTensor,
    layout: &FrameLayout,
    queries: &[usize],
    layers: Option<&[usize]>,
    reference_anchor: Option<usize>,
) -> Result<AnchorReport> {
    let table = frame_mass(&averaged_logits(logits, queries)?, layout)?;
    let table = match layers {
        Some(ls) => table.select_layers(ls)?,
        None => table,
    };
    attention_stats(&table, reference_anchor)
}

/// Like [`analyze_logits`] for a tensor whose `k`-th layer is model layer
/// `layer_ids[k]` (captures may hold a subset of layers).
pub fn analyze_labeled(
    logits: &LogitTensor,
    layer_ids: &[usize],
    layout: &FrameLayout,
    queries: &[usize],
    reference_anchor: Option<usize>,
) -> Result<AnchorReport> {
    if layer_ids.len() != logits.num_layers() {
        return Err(Error::ShapeMismatch(alloc::format!(
            "{} layer ids for {} layers",
            layer_ids.len(),
            logits.num_layers()
        )));
    }
    let mut table = frame_mass(&averaged_logits(logits, queries)?, layout)?;
    table.layers = layer_ids.to_vec();
    attention_stats(&table, reference_anchor)
}

/// How often each frame is the anchor across reports.
pub fn anchor_histogram(reports: &[AnchorReport]) -> Result<Vec<f64>> {
    let first = reports.first().ok_or(Error::EmptyInput)?;
    let n = first.num_frames;
    let mut counts = vec![0usize; n];
    for r in reports {
        if r.num_frames != n {
            return Err(Error::MixedFrameCounts {
                expected: n,
                found: r.num_frames,
            });
        }
        counts[r.anchor] += 1;
    }
    let total = reports.len() as f64;
    Ok(counts.iter().map(|&c| c as f64 / total).collect())
}

/// Per-sample statistics averaged over samples.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct MeanStats {
    pub dominance: f64,
    pub entropy: f64,
    pub non_anchor: f64,
    pub samples: usize,
}

pub fn mean_stats(reports: &[AnchorReport]) -> Result<MeanStats> {
    if reports.is_empty() {
        return Err(Error::EmptyInput);
    }
    let k = reports.len() as f64;
    Ok(MeanStats {
        dominance: reports.iter().map(|r| r.dominance).sum::<f64>() / k,
        entropy: reports.iter().map(|r| r.entropy).sum::<f64>() / k,
        non_anchor: reports.iter().map(|r| r.non_anchor).sum::<f64>() / k,
        samples: reports.len(),
    })
}
