use alloc::string::String;

/// Errors raised by the core kernels.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("layout has no tokens")]
    EmptyLayout,
    #[error("invalid layout: {0}")]
    InvalidLayout(String),
    #[error("prefill requires at least one text token after the visual block")]
    NoPostVisualText,
    #[error("token index {index} out of range for length {len}")]
    OutOfRange { index: usize, len: usize },
    #[error("model dim {dim} is not divisible by head count {heads}")]
    InvalidDim { dim: usize, heads: usize },
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("cache was produced by a different model")]
    StaleCache,
    #[error("score query set is empty")]
    EmptyQuerySet,
    #[error("analyzed layer set is empty")]
    EmptyLayerSet,
    #[error("no attention mass on visual tokens at layer {layer}")]
    ZeroVisualMass { layer: usize },
    #[error("reports disagree on frame count ({expected} vs {found})")]
    MixedFrameCounts { expected: usize, found: usize },
    #[error("no reports given")]
    EmptyInput,
    #[error("layer window [{start}, {end}] out of range for {num_layers} layers")]
    LayerWindowOutOfRange {
        start: usize,
        end: usize,
        num_layers: usize,
    },
    #[error("frame {frame} out of range for {num_frames} frames")]
    FrameOutOfRange { frame: usize, num_frames: usize },
    #[error("black-frame substitution needs the toy engine; traces cannot be re-run")]
    UnsupportedInTraceMode,
    #[error("layers missing from capture: {0:?}")]
    MissingLayers(alloc::vec::Vec<usize>),
}

pub type Result<T, E = Error> = core::result::Result<T, E>;
