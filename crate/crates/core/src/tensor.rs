//! Per-layer logit and attention tensors indexed `[head][row][key]`.
//!
//! Only the computed query rows are stored; each row carries its absolute
//! query index so prefill (all rows) and decode (one row) share a type.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};

/// Stand-in for a causally masked (−∞) logit.
///
/// Matches the f32 sentinel used in trace files. Softmax maps it to an
/// exact zero and every kernel skips it before doing arithmetic.
pub const MASKED_LOGIT: f64 = -3.4e38;

/// Anything at or below this is treated as masked, including `-inf`.
const MASK_THRESHOLD: f64 = -1.0e38;

#[inline]
pub fn is_masked(z: f64) -> bool {
    z <= MASK_THRESHOLD
}

/// Softmax over a row with masked entries mapped to exactly zero weight.
/// A fully masked row yields all zeros.
pub fn masked_softmax(row: &[f64]) -> Vec<f64> {
    let max = row
        .iter()
        .copied()
        .filter(|&z| !is_masked(z))
        .fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return vec![0.0; row.len()];
    }
    let mut out: Vec<f64> = row
        .iter()
        .map(|&z| if is_masked(z) { 0.0 } else { libm::exp(z - max) })
        .collect();
    let sum: f64 = out.iter().sum();
    for w in &mut out {
        *w /= sum;
    }
    out
}

/// One layer's `[head][row][key]` block.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerLogits {
    heads: usize,
    rows: Vec<usize>,
    keys: usize,
    data: Vec<f64>,
}

impl LayerLogits {
    pub fn zeros(heads: usize, rows: Vec<usize>, keys: usize) -> Self {
        let data = vec![0.0; heads * rows.len() * keys];
        Self {
            heads,
            rows,
            keys,
            data,
        }
    }

    pub fn from_data(heads: usize, rows: Vec<usize>, keys: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != heads * rows.len() * keys {
            return Err(Error::ShapeMismatch(format!(
                "{} values for {heads} heads x {} rows x {keys} keys",
                data.len(),
                rows.len()
            )));
        }
        if rows.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::ShapeMismatch("query rows must be strictly increasing".into()));
        }
        Ok(Self {
            heads,
            rows,
            keys,
            data,
        })
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    /// Absolute query indices of the stored rows.
    pub fn rows(&self) -> &[usize] {
        &self.rows
    }

    pub fn keys(&self) -> usize {
        self.keys
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Position of absolute query `q` among the stored rows.
    pub fn row_position(&self, q: usize) -> Option<usize> {
        self.rows.binary_search(&q).ok()
    }

    pub(crate) fn require_row(&self, q: usize) -> Result<usize> {
        self.row_position(q)
            .ok_or_else(|| Error::ShapeMismatch(format!("query row {q} not recorded")))
    }

    fn offset(&self, head: usize, pos: usize) -> usize {
        (head * self.rows.len() + pos) * self.keys
    }

    /// Row by head and stored position.
    pub fn row(&self, head: usize, pos: usize) -> &[f64] {
        let o = self.offset(head, pos);
        &self.data[o..o + self.keys]
    }

    pub fn row_mut(&mut self, head: usize, pos: usize) -> &mut [f64] {
        let o = self.offset(head, pos);
        &mut self.data[o..o + self.keys]
    }

    /// Row by head and absolute query index.
    pub fn query_row(&self, head: usize, q: usize) -> Option<&[f64]> {
        self.row_position(q).map(|p| self.row(head, p))
    }

    pub fn get(&self, head: usize, pos: usize, key: usize) -> f64 {
        self.data[self.offset(head, pos) + key]
    }

    /// Row-wise masked softmax of every stored row.
    pub fn softmax(&self) -> LayerLogits {
        let mut out = Self::zeros(self.heads, self.rows.clone(), self.keys);
        for h in 0..self.heads {
            for p in 0..self.rows.len() {
                let w = masked_softmax(self.row(h, p));
                out.row_mut(h, p).copy_from_slice(&w);
            }
        }
        out
    }
}

/// Logits (or attention weights) for every layer.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct LogitTensor {
    pub layers: Vec<LayerLogits>,
}

impl LogitTensor {
    pub fn new(layers: Vec<LayerLogits>) -> Self {
        Self { layers }
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn layer(&self, l: usize) -> &LayerLogits {
        &self.layers[l]
    }

    pub fn softmax(&self) -> LogitTensor {
        LogitTensor::new(self.layers.iter().map(LayerLogits::softmax).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn masked_entries_get_zero_weight() {
        let w = masked_softmax(&[0.0, MASKED_LOGIT, 0.0, f64::NEG_INFINITY]);
        assert_eq!(w, vec![0.5, 0.0, 0.5, 0.0]);
    }

    #[test]
    fn fully_masked_row_is_zero() {
        assert_eq!(masked_softmax(&[MASKED_LOGIT; 3]), vec![0.0; 3]);
    }

    #[test]
    fn large_logits_do_not_overflow() {
        let w = masked_softmax(&[1000.0, 999.0]);
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(w[0] > w[1]);
    }

    #[test]
    fn row_indexing() {
        let data: Vec<f64> = (0..12).map(|x| x as f64).collect();
        let t = LayerLogits::from_data(2, vec![3, 5], 3, data).unwrap();
        assert_eq!(t.row(1, 0), &[6.0, 7.0, 8.0]);
        assert_eq!(t.query_row(0, 5), Some(&[3.0, 4.0, 5.0][..]));
        assert_eq!(t.query_row(0, 4), None);
        assert!(LayerLogits::from_data(2, vec![3, 5], 3, vec![0.0; 11]).is_err());
        assert!(LayerLogits::from_data(1, vec![5, 3], 1, vec![0.0; 2]).is_err());
    }
}
