//! Frame-structured decoder attention kernels.
//!
//! - [`layout`]: token geometry and the per-stage query plan.
//! - [`engine`]: a toy causal decoder with a pre-softmax [`LogitHook`] point
//!   and KV-cached decoding.
//! - [`analysis`]: anchor-frame statistics (frame mass, anchor, dominance,
//!   entropy, non-anchor mass, visual ratio).
//! - [`dtr`]: temporal rebalancing of visual logits and its engine hook.
//! - [`interventions`]: frame masking, black-frame substitution and the
//!   masking study.
//!
//! The crate is `no_std` and needs only `alloc`.

#![no_std]

extern crate alloc;

pub mod analysis;
pub mod dtr;
pub mod engine;
pub mod error;
pub mod interventions;
pub mod layout;
pub mod tensor;

pub use analysis::{AnchorReport, FrameMassTable, StatsScope};
pub use dtr::{DtrConfig, DtrHook, FrameScoreState, Preset};
pub use engine::{CachedState, ForwardResult, HookContext, LogitHook, Model, ModelConfig};
pub use error::{Error, Result};
pub use layout::{build_query_plan, FrameLayout, QueryPlan, Span, Stage, TokenKind};
pub use tensor::{LayerLogits, LogitTensor, MASKED_LOGIT};
