use std::path::PathBuf;

use thiserror::Error;

use crate::loss::TripletIndex;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid channel layout: {0}")]
    Layout(String),
    #[error("invalid material stack: {0}")]
    Stack(String),
    #[error("missing file: {}", .0.display())]
    MissingFile(PathBuf),
    #[error("{}: {message}", path.display())]
    Image { path: PathBuf, message: String },
    #[error("size mismatch: {role} is {found_h}x{found_w}, expected {expected_h}x{expected_w} (set a target size to resample)")]
    SizeMismatch {
        role: String,
        expected_h: usize,
        expected_w: usize,
        found_h: usize,
        found_w: usize,
    },
    #[error("unsupported bit depth: {0}")]
    BitDepth(String),
    #[error("channel index {index} out of range for {channels} channels")]
    ChannelIndex { index: usize, channels: usize },
    #[error("channel count mismatch: {0} vs {1}")]
    ChannelCount(usize, usize),
    #[error("{channels} channels exceed the exact-loss enumeration cap of {cap}")]
    EnumerationCap { channels: usize, cap: usize },
    #[error("overlapping channel groups: channel {0} appears twice")]
    OverlappingGroups(usize),
    #[error("tap layer not found: {0}")]
    TapNotFound(String),
    #[error("weights: {0}")]
    Weights(String),
    #[error("image is {height}x{width}, extractor needs at least {min}x{min}")]
    ImageTooSmall { height: usize, width: usize, min: usize },
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("extractor mismatch: {0}")]
    ExtractorMismatch(String),
    #[error("non-finite loss at step {step} (triplets {triplets:?})")]
    NonFiniteLoss { step: usize, triplets: Vec<TripletIndex> },
    #[error("training diverged at step {step}: running mean {running_mean} stayed above 10x minimum {minimum}")]
    Diverged {
        step: usize,
        running_mean: f64,
        minimum: f64,
    },
    #[error("size {height}x{width} is not a multiple of {factor}")]
    PyramidSize { height: usize, width: usize, factor: usize },
    #[error("model file: {0}")]
    Model(String),
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
