//! `.atrc` attention trace files.
//!
//! ```text
//! "ATRC" | u32 version | u32 header_len | header (canonical JSON) | body
//! ```
//!
//! Integers are little-endian. The body holds `f32` logits in
//! `(layer, head, query, key)` order for the recorded query rows only;
//! masked entries are stored as `-3.4e38`. The header carries the shape,
//! layout, stage, query plan and a SHA-256 of the body. The full
//! byte-level description lives in `docs/trace-format.md`.

use std::io::{self, Read, Write};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use temporal_rebalance_core::analysis::{attention_stats, averaged_logits, frame_mass};
use temporal_rebalance_core::dtr::{replay_non_propagated, ReplayOutcome};
use temporal_rebalance_core::layout::Span;
use temporal_rebalance_core::tensor::is_masked;
use temporal_rebalance_core::{
    build_query_plan, AnchorReport, DtrConfig, ForwardResult, FrameLayout, LayerLogits,
    LogitTensor, QueryPlan, Stage, StatsScope, MASKED_LOGIT,
};

pub const MAGIC: [u8; 4] = *b"ATRC";
pub const FORMAT_VERSION: u32 = 1;
/// Masked entries on disk.
pub const MASKED_F32: f32 = -3.4e38;
/// Headers larger than this are rejected before any allocation.
pub const MAX_HEADER_LEN: u32 = 16 << 20;

#[derive(Debug, thiserror::Error)]
pub enum TraceError {
    #[error("not an attention trace (magic {0:02x?})")]
    BadMagic([u8; 4]),
    #[error("unsupported trace version {found} (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("truncated {section}: expected {expected} bytes, found {found}")]
    Truncated {
        section: &'static str,
        expected: u64,
        found: u64,
    },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("body checksum mismatch: header {expected}, body {found}")]
    ChecksumFail { expected: String, found: String },
    #[error("trace records no query rows")]
    EmptyQuerySet,
    #[error("bad header: {0}")]
    Header(String),
    #[error("non-finite logit at body offset {0}")]
    NonFinite(usize),
    #[error("write failed: {0}")]
    SinkFailure(#[source] io::Error),
    #[error("read failed: {0}")]
    Source(#[source] io::Error),
}

/// Precision of the capture the logits came from; the body is always f32.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F32,
    F16,
    Bf16,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionTrace {
    pub num_heads: usize,
    /// Key dimension of every recorded row.
    pub key_len: usize,
    /// Model layer of each recorded layer, strictly increasing.
    pub layer_ids: Vec<usize>,
    pub layout: FrameLayout,
    pub stage: Stage,
    pub plan: QueryPlan,
    /// Absolute indices of the recorded query rows, strictly increasing.
    pub queries: Vec<usize>,
    pub model_tag: String,
    pub dtype: Dtype,
    body: Vec<f32>,
}

#[derive(Serialize, Deserialize)]
struct LayoutHeader {
    frame_spans: Vec<Span>,
    text_spans: Vec<Span>,
    total_len: usize,
    excluded_queries: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format_version: u32,
    num_layers: usize,
    num_heads: usize,
    total_len: usize,
    layer_ids: Vec<usize>,
    layout: LayoutHeader,
    stage: Stage,
    plan: QueryPlan,
    queries: Vec<usize>,
    model_tag: String,
    dtype: Dtype,
    body_bytes: u64,
    body_sha256: String,
}

fn shape(msg: impl Into<String>) -> TraceError {
    TraceError::ShapeMismatch(msg.into())
}

fn strictly_increasing(v: &[usize]) -> bool {
    v.windows(2).all(|w| w[0] < w[1])
}

fn body_len(layers: usize, heads: usize, queries: usize, keys: usize) -> Option<u64> {
    [layers, heads, queries, keys, 4]
        .iter()
        .try_fold(1u64, |acc, &x| acc.checked_mul(x as u64))
}

/// Checks everything about a trace except the body contents.
#[allow(clippy::too_many_arguments)]
fn check_shape(
    num_layers: usize,
    num_heads: usize,
    key_len: usize,
    layer_ids: &[usize],
    layout: &FrameLayout,
    stage: Stage,
    plan: &QueryPlan,
    queries: &[usize],
) -> Result<u64, TraceError> {
    if queries.is_empty() {
        return Err(TraceError::EmptyQuerySet);
    }
    if num_layers == 0 || num_heads == 0 {
        return Err(shape("trace needs at least one layer and one head"));
    }
    if layer_ids.len() != num_layers {
        return Err(shape(format!(
            "{} layer ids for {num_layers} layers",
            layer_ids.len()
        )));
    }
    if !strictly_increasing(layer_ids) || !strictly_increasing(queries) {
        return Err(shape("layer ids and query rows must be strictly increasing"));
    }
    let seq_len = stage.seq_len(layout);
    if key_len != seq_len {
        return Err(shape(format!(
            "key length {key_len} does not match the {seq_len} positions of stage {stage:?}"
        )));
    }
    if let Some(&q) = queries.iter().find(|&&q| q >= key_len) {
        return Err(shape(format!("query row {q} beyond key length {key_len}")));
    }
    let recorded = |q: &usize| queries.binary_search(q).is_ok();
    if plan.score_queries.is_empty() {
        return Err(TraceError::EmptyQuerySet);
    }
    if !plan.score_queries.iter().all(recorded) || !recorded(&plan.target_query) {
        return Err(shape("query plan refers to rows that were not recorded"));
    }
    body_len(num_layers, num_heads, queries.len(), key_len)
        .ok_or_else(|| shape("body size overflows"))
}

fn to_f32(z: f64) -> f32 {
    if is_masked(z) {
        MASKED_F32
    } else {
        z as f32
    }
}

impl AttentionTrace {
    /// Records rows `queries` of every layer of `logits`.
    #[allow(clippy::too_many_arguments)]
    pub fn from_tensor(
        logits: &LogitTensor,
        layer_ids: Vec<usize>,
        layout: &FrameLayout,
        stage: Stage,
        plan: QueryPlan,
        queries: Vec<usize>,
        model_tag: impl Into<String>,
        dtype: Dtype,
    ) -> Result<Self, TraceError> {
        let first = logits
            .layers
            .first()
            .ok_or_else(|| shape("no layers to record"))?;
        let (heads, keys) = (first.heads(), first.keys());
        check_shape(
            logits.num_layers(),
            heads,
            keys,
            &layer_ids,
            layout,
            stage,
            &plan,
            &queries,
        )?;
        let mut body = Vec::new();
        for layer in &logits.layers {
            if layer.heads() != heads || layer.keys() != keys {
                return Err(shape("layers disagree on head count or key length"));
            }
            for h in 0..heads {
                for &q in &queries {
                    let row = layer
                        .query_row(h, q)
                        .ok_or_else(|| shape(format!("row {q} not present in logits")))?;
                    body.extend(row.iter().map(|&z| to_f32(z)));
                }
            }
        }
        Ok(Self {
            num_heads: heads,
            key_len: keys,
            layer_ids,
            layout: layout.clone(),
            stage,
            plan,
            queries,
            model_tag: model_tag.into(),
            dtype,
            body,
        })
    }

    /// Raw logits of a forward pass, restricted to the rows the stage's
    /// query plan uses.
    pub fn from_forward(
        result: &ForwardResult,
        layout: &FrameLayout,
        model_tag: impl Into<String>,
    ) -> Result<Self, TraceError> {
        let plan = build_query_plan(layout, result.stage)
            .map_err(|e| TraceError::Header(e.to_string()))?;
        let mut queries = plan.score_queries.clone();
        queries.push(plan.target_query);
        queries.sort_unstable();
        queries.dedup();
        let layer_ids = (0..result.original.num_layers()).collect();
        Self::from_tensor(
            &result.original,
            layer_ids,
            layout,
            result.stage,
            plan,
            queries,
            model_tag,
            Dtype::F32,
        )
    }

    pub fn num_layers(&self) -> usize {
        self.layer_ids.len()
    }

    pub fn body(&self) -> &[f32] {
        &self.body
    }

    /// Body size in bytes.
    pub fn body_bytes(&self) -> u64 {
        self.body.len() as u64 * 4
    }

    pub fn to_logit_tensor(&self) -> LogitTensor {
        let per_layer = self.num_heads * self.queries.len() * self.key_len;
        let layers = self
            .body
            .chunks_exact(per_layer)
            .map(|chunk| {
                let data = chunk
                    .iter()
                    .map(|&z| {
                        let z = f64::from(z);
                        if is_masked(z) {
                            MASKED_LOGIT
                        } else {
                            z
                        }
                    })
                    .collect();
                LayerLogits::from_data(self.num_heads, self.queries.clone(), self.key_len, data)
                    .expect("shape checked on construction")
            })
            .collect();
        LogitTensor::new(layers)
    }

    /// Anchor statistics over the plan's score queries. `layers` selects
    /// model layers; `None` uses every recorded layer.
    pub fn analyze(&self, layers: Option<&[usize]>) -> temporal_rebalance_core::Result<AnchorReport> {
        let tensor = self.to_logit_tensor();
        let mut table = frame_mass(&averaged_logits(&tensor, &self.plan.score_queries)?, &self.layout)?;
        table.layers = self.layer_ids.clone();
        let table = match layers {
            Some(ls) => table.select_layers(ls)?,
            None => table,
        };
        attention_stats(&table, None)
    }

    fn header(&self) -> Header {
        let body_bytes = self.body_bytes();
        Header {
            format_version: FORMAT_VERSION,
            num_layers: self.num_layers(),
            num_heads: self.num_heads,
            total_len: self.key_len,
            layer_ids: self.layer_ids.clone(),
            layout: LayoutHeader {
                frame_spans: self.layout.frame_spans().to_vec(),
                text_spans: self.layout.text_spans().to_vec(),
                total_len: self.layout.total_len(),
                excluded_queries: self.layout.excluded_queries().to_vec(),
            },
            stage: self.stage,
            plan: self.plan.clone(),
            queries: self.queries.clone(),
            model_tag: self.model_tag.clone(),
            dtype: self.dtype,
            body_bytes,
            body_sha256: hex::encode(Sha256::digest(self.body_le())),
        }
    }

    fn body_le(&self) -> Vec<u8> {
        self.body.iter().flat_map(|z| z.to_le_bytes()).collect()
    }
}

/// Sorted keys, no whitespace. `serde_json` maps are ordered by key.
fn canonical_json<T: Serialize>(value: &T) -> Vec<u8> {
    let v = serde_json::to_value(value).expect("header is plain data");
    serde_json::to_vec(&v).expect("value serializes")
}

/// Writes a trace and returns the number of bytes written.
pub fn write_trace<W: Write>(trace: &AttentionTrace, sink: &mut W) -> Result<u64, TraceError> {
    if trace.queries.is_empty() {
        return Err(TraceError::EmptyQuerySet);
    }
    let header = canonical_json(&trace.header());
    let header_len = u32::try_from(header.len())
        .ok()
        .filter(|&n| n <= MAX_HEADER_LEN)
        .ok_or_else(|| TraceError::Header("header too large".into()))?;
    let body = trace.body_le();
    let mut write = |bytes: &[u8]| sink.write_all(bytes).map_err(TraceError::SinkFailure);
    write(&MAGIC)?;
    write(&FORMAT_VERSION.to_le_bytes())?;
    write(&header_len.to_le_bytes())?;
    write(&header)?;
    write(&body)?;
    sink.flush().map_err(TraceError::SinkFailure)?;
    Ok(8 + 4 + header.len() as u64 + body.len() as u64)
}

/// Reads up to `n` bytes; fewer only at end of input. Allocation grows
/// with the bytes actually present, not with `n`.
fn read_up_to<R: Read>(source: &mut R, n: u64) -> Result<Vec<u8>, TraceError> {
    let mut buf = Vec::new();
    source
        .take(n)
        .read_to_end(&mut buf)
        .map_err(TraceError::Source)?;
    Ok(buf)
}

fn read_exact_section<R: Read>(
    source: &mut R,
    n: u64,
    section: &'static str,
) -> Result<Vec<u8>, TraceError> {
    let buf = read_up_to(source, n)?;
    if (buf.len() as u64) < n {
        return Err(TraceError::Truncated {
            section,
            expected: n,
            found: buf.len() as u64,
        });
    }
    Ok(buf)
}

fn read_u32<R: Read>(source: &mut R, section: &'static str) -> Result<u32, TraceError> {
    let b = read_exact_section(source, 4, section)?;
    Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
}

pub fn read_trace<R: Read>(source: &mut R) -> Result<AttentionTrace, TraceError> {
    let magic = read_exact_section(source, 4, "magic")?;
    let magic = [magic[0], magic[1], magic[2], magic[3]];
    if magic != MAGIC {
        return Err(TraceError::BadMagic(magic));
    }
    let version = read_u32(source, "version")?;
    if version != FORMAT_VERSION {
        return Err(TraceError::VersionMismatch {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let header_len = read_u32(source, "header length")?;
    if header_len > MAX_HEADER_LEN {
        return Err(TraceError::Header(format!(
            "header length {header_len} exceeds {MAX_HEADER_LEN}"
        )));
    }
    let raw = read_exact_section(source, u64::from(header_len), "header")?;
    let header: Header =
        serde_json::from_slice(&raw).map_err(|e| TraceError::Header(e.to_string()))?;
    if header.format_version != FORMAT_VERSION {
        return Err(TraceError::VersionMismatch {
            found: header.format_version,
            expected: FORMAT_VERSION,
        });
    }
    let lh = header.layout;
    let layout = FrameLayout::new(lh.frame_spans, lh.text_spans, lh.total_len)
        .and_then(|l| l.with_excluded_queries(lh.excluded_queries))
        .map_err(|e| TraceError::Header(e.to_string()))?;
    let expected = check_shape(
        header.num_layers,
        header.num_heads,
        header.total_len,
        &header.layer_ids,
        &layout,
        header.stage,
        &header.plan,
        &header.queries,
    )?;
    if header.body_bytes != expected {
        return Err(shape(format!(
            "header declares {} body bytes, shape {}x{}x{}x{} needs {expected}",
            header.body_bytes,
            header.num_layers,
            header.num_heads,
            header.queries.len(),
            header.total_len
        )));
    }

    let body = read_up_to(source, expected.saturating_add(1))?;
    let found = body.len() as u64;
    if found < expected {
        return Err(TraceError::Truncated {
            section: "body",
            expected,
            found,
        });
    }
    if found > expected {
        return Err(shape("trailing bytes after body"));
    }
    let digest = hex::encode(Sha256::digest(&body));
    if !digest.eq_ignore_ascii_case(&header.body_sha256) {
        return Err(TraceError::ChecksumFail {
            expected: header.body_sha256,
            found: digest,
        });
    }
    let values: Vec<f32> = body
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    if let Some(i) = values
        .iter()
        .position(|z| z.is_nan() || *z == f32::INFINITY)
    {
        return Err(TraceError::NonFinite(i * 4));
    }

    Ok(AttentionTrace {
        num_heads: header.num_heads,
        key_len: header.total_len,
        layer_ids: header.layer_ids,
        layout,
        stage: header.stage,
        plan: header.plan,
        queries: header.queries,
        model_tag: header.model_tag,
        dtype: header.dtype,
        body: values,
    })
}

/// Counterfactual DTR on the recorded target row of each layer, without
/// cross-layer propagation. Statistics use the target row.
pub fn replay_dtr(
    trace: &AttentionTrace,
    config: &DtrConfig,
) -> temporal_rebalance_core::Result<ReplayOutcome> {
    replay_non_propagated(
        &trace.to_logit_tensor(),
        &trace.layer_ids,
        &trace.layout,
        &trace.plan,
        config,
        StatsScope::TargetRow,
    )
}
