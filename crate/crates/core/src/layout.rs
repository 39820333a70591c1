//! Token geometry of a video-conditioned sequence.
//!
//! Visual tokens form one contiguous block, frames in temporal order. Text
//! tokens may precede the block (system prompt) and follow it (question,
//! chat template). Decode steps append rows after the prefill sequence.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};

/// Half-open key interval `[start, end)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Span {
    pub start: usize,
    pub end: usize,
}

impl Span {
    pub const fn new(start: usize, end: usize) -> Self {
        Self { start, end }
    }

    pub const fn len(&self) -> usize {
        self.end - self.start
    }

    pub const fn is_empty(&self) -> bool {
        self.end <= self.start
    }

    pub const fn contains(&self, j: usize) -> bool {
        self.start <= j && j < self.end
    }

    pub fn iter(&self) -> core::ops::Range<usize> {
        self.start..self.end
    }
}

/// What a key position holds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TokenKind {
    Frame(usize),
    Text,
}

#[derive(Debug, Clone, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize))]
pub struct FrameLayout {
    frame_spans: Vec<Span>,
    text_spans: Vec<Span>,
    total_len: usize,
    /// Post-visual positions kept out of the prefill score set (template tokens).
    excluded_queries: Vec<usize>,
}

impl FrameLayout {
    pub fn new(frame_spans: Vec<Span>, text_spans: Vec<Span>, total_len: usize) -> Result<Self> {
        let layout = Self {
            frame_spans,
            text_spans,
            total_len,
            excluded_queries: Vec::new(),
        };
        layout.validate()?;
        Ok(layout)
    }

    /// `prefix` text tokens, `num_frames` frames of `tokens_per_frame` each,
    /// then `suffix` text tokens.
    pub fn uniform(
        prefix: usize,
        num_frames: usize,
        tokens_per_frame: usize,
        suffix: usize,
    ) -> Result<Self> {
        Self::with_frame_lengths(prefix, &vec![tokens_per_frame; num_frames], suffix)
    }

    pub fn with_frame_lengths(prefix: usize, frame_lens: &[usize], suffix: usize) -> Result<Self> {
        let mut frames = Vec::with_capacity(frame_lens.len());
        let mut cursor = prefix;
        for &m in frame_lens {
            frames.push(Span::new(cursor, cursor + m));
            cursor += m;
        }
        let mut text = Vec::new();
        if prefix > 0 {
            text.push(Span::new(0, prefix));
        }
        if suffix > 0 {
            text.push(Span::new(cursor, cursor + suffix));
        }
        Self::new(frames, text, cursor + suffix)
    }

    /// Exclude post-visual positions (e.g. chat-template tokens) from the
    /// prefill score set. The target query is unaffected.
    pub fn with_excluded_queries(mut self, mut excluded: Vec<usize>) -> Result<Self> {
        excluded.sort_unstable();
        excluded.dedup();
        if let Some(&j) = excluded.iter().find(|&&j| j >= self.total_len) {
            return Err(Error::OutOfRange {
                index: j,
                len: self.total_len,
            });
        }
        self.excluded_queries = excluded;
        Ok(self)
    }

    fn validate(&self) -> Result<()> {
        if self.total_len == 0 {
            return Err(Error::EmptyLayout);
        }
        if self.frame_spans.is_empty() {
            return Err(Error::InvalidLayout("at least one frame is required".into()));
        }
        for (i, span) in self.frame_spans.iter().enumerate() {
            if span.is_empty() {
                return Err(Error::InvalidLayout(format!("frame {i} has no tokens")));
            }
        }
        for pair in self.frame_spans.windows(2) {
            if pair[0].end != pair[1].start {
                return Err(Error::InvalidLayout(format!(
                    "frames {:?} and {:?} are not contiguous and ordered",
                    pair[0], pair[1]
                )));
            }
        }
        let mut cover = vec![0u8; self.total_len];
        for span in self.frame_spans.iter().chain(self.text_spans.iter()) {
            if span.end > self.total_len || span.start > span.end {
                return Err(Error::InvalidLayout(format!(
                    "span {span:?} exceeds length {}",
                    self.total_len
                )));
            }
            for j in span.iter() {
                cover[j] += 1;
            }
        }
        if let Some(j) = cover.iter().position(|&c| c != 1) {
            return Err(Error::InvalidLayout(format!(
                "position {j} covered {} times",
                cover[j]
            )));
        }
        Ok(())
    }

    pub fn num_frames(&self) -> usize {
        self.frame_spans.len()
    }

    pub fn frame_spans(&self) -> &[Span] {
        &self.frame_spans
    }

    pub fn frame_span(&self, frame: usize) -> Result<Span> {
        self.frame_spans
            .get(frame)
            .copied()
            .ok_or(Error::FrameOutOfRange {
                frame,
                num_frames: self.num_frames(),
            })
    }

    pub fn text_spans(&self) -> &[Span] {
        &self.text_spans
    }

    pub fn total_len(&self) -> usize {
        self.total_len
    }

    pub fn excluded_queries(&self) -> &[usize] {
        &self.excluded_queries
    }

    /// The contiguous visual block spanning all frames.
    pub fn visual_block(&self) -> Span {
        Span::new(
            self.frame_spans[0].start,
            self.frame_spans[self.frame_spans.len() - 1].end,
        )
    }

    pub fn is_visual(&self, j: usize) -> bool {
        self.visual_block().contains(j)
    }

    /// Maps a key index to its frame, or [`TokenKind::Text`].
    pub fn frame_of_token(&self, j: usize) -> Result<TokenKind> {
        if j >= self.total_len {
            return Err(Error::OutOfRange {
                index: j,
                len: self.total_len,
            });
        }
        if !self.is_visual(j) {
            return Ok(TokenKind::Text);
        }
        // frames are sorted and contiguous
        let frame = self.frame_spans.partition_point(|s| s.end <= j);
        Ok(TokenKind::Frame(frame))
    }
}

/// Forward state: the prefill pass, or the `t`-th autoregressive step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(tag = "kind", content = "step", rename_all = "snake_case"))]
pub enum Stage {
    Prefill,
    Decode(usize),
}

impl Stage {
    /// Sequence length seen by this stage.
    pub fn seq_len(&self, layout: &FrameLayout) -> usize {
        match *self {
            Stage::Prefill => layout.total_len(),
            Stage::Decode(t) => layout.total_len() + t + 1,
        }
    }
}

/// Rows used to estimate frame scores, and the single row that gets modified.
#[derive(Debug, Clone, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct QueryPlan {
    pub score_queries: Vec<usize>,
    pub target_query: usize,
}

pub fn build_query_plan(layout: &FrameLayout, stage: Stage) -> Result<QueryPlan> {
    if layout.total_len() == 0 {
        return Err(Error::EmptyLayout);
    }
    match stage {
        Stage::Prefill => {
            let first = layout.visual_block().end;
            let excluded = layout.excluded_queries();
            let score_queries: Vec<usize> = (first..layout.total_len())
                .filter(|q| excluded.binary_search(q).is_err())
                .collect();
            if score_queries.is_empty() {
                return Err(Error::NoPostVisualText);
            }
            Ok(QueryPlan {
                score_queries,
                target_query: layout.total_len() - 1,
            })
        }
        Stage::Decode(t) => {
            let row = layout.total_len() + t;
            Ok(QueryPlan {
                score_queries: vec![row],
                target_query: row,
            })
        }
    }
}
