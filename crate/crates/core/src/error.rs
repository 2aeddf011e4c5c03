use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, StarError>;

#[derive(Debug, Error)]
pub enum StarError {
    #[error("{axis} of {size} is not divisible by {divisor}")]
    NotDivisible {
        axis: &'static str,
        size: usize,
        divisor: usize,
    },

    #[error("invalid image: {0}")]
    InvalidImage(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("images in one pack must share geometry: {0}")]
    HeterogeneousGeometry(String),

    #[error("identity separator needs a square cluster, got {rows}x{cols}")]
    NonSquareCluster { rows: usize, cols: usize },

    #[error("layout {layout} needs the cluster count {clusters} to be a multiple of {group}")]
    LayoutGrouping {
        layout: &'static str,
        clusters: usize,
        group: usize,
    },

    #[error("cluster ids must be non-decreasing (position {position}: {prev} -> {next})")]
    DecreasingClusterIds {
        position: usize,
        prev: usize,
        next: usize,
    },

    #[error("non-finite value in channel {channel}")]
    NonFiniteChannel { channel: usize },

    #[error("non-finite value at step {step}: {what}")]
    NonFinite { step: u64, what: String },

    #[error("input-dependent parameters cannot be expressed as a convolution kernel")]
    NotTimeInvariant,

    #[error("four-scan mode only accepts a single image without separators")]
    FourScanPacked,

    #[error("unknown {kind} '{name}' (available: {available})")]
    UnknownStrategy {
        kind: &'static str,
        name: String,
        available: String,
    },

    #[error("config error: {0}")]
    Config(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("{0}")]
    CheckFailed(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}
