use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape {shape:?} holds {expected} elements but {actual} were given")]
    ShapeData {
        shape: Vec<usize>,
        expected: usize,
        actual: usize,
    },
    #[error("shape {0:?} has a zero-sized dimension")]
    ZeroDim(Vec<usize>),
    #[error(
        "dimension mismatch: axis {axis_a} of a has size {dim_a}, axis {axis_b} of b has size {dim_b}"
    )]
    DimensionMismatch {
        axis_a: usize,
        dim_a: usize,
        axis_b: usize,
        dim_b: usize,
    },
    #[error("axis {axis} out of range for tensor {tensor} of rank {rank}")]
    AxisOutOfRange {
        tensor: char,
        axis: usize,
        rank: usize,
    },
    #[error("invalid contraction: {0}")]
    InvalidSpec(String),
    #[error("batch member {index} has shape {found:?}, expected {expected:?}")]
    HeterogeneousBatch {
        index: usize,
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    #[error("invalid topology: {0}")]
    Topology(String),
    #[error("expected {expected} input vectors, got {actual}")]
    InputCount { expected: usize, actual: usize },
    #[error("input length mismatch at layer {layer}: expected {expected}, got {actual}")]
    InputLength {
        layer: usize,
        expected: usize,
        actual: usize,
    },
    #[error("sigma_w2 must be positive, got {0}")]
    NonPositiveVariance(f64),
    #[error("stale trace: {0}")]
    StaleTrace(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("output has length {output} but target has length {target}")]
    TargetLength { output: usize, target: usize },
    #[error("class {class} out of range for {classes} outputs")]
    ClassOutOfRange { class: usize, classes: usize },
    #[error("cross-entropy target is not one-hot")]
    NotOneHot,

    #[error("model too large for brute-force expansion: {0}")]
    SizeGuard(String),
    #[error("wrong topology preset: {0}")]
    WrongPreset(String),

    #[error("empty input")]
    EmptyInput,
    #[error("image must be square with an even side, got {rows}x{cols}")]
    BadImageSide { rows: usize, cols: usize },
    #[error("pixel value {value} at index {index} is outside 0..=255")]
    PixelRange { index: usize, value: i64 },
    #[error("input statistics must be positive")]
    ZeroInputStats,

    #[error("{path}: bad magic number 0x{found:08x}, expected 0x{expected:08x}")]
    Magic {
        path: PathBuf,
        found: u32,
        expected: u32,
    },
    #[error("{path}: truncated file ({detail})")]
    Truncated { path: PathBuf, detail: String },
    #[error("{images} images but {labels} labels")]
    CountMismatch { images: usize, labels: usize },
    #[error("row {row}, column '{column}': '{value}' is not numeric")]
    NonNumeric {
        row: usize,
        column: String,
        value: String,
    },
    #[error("missing column '{0}'")]
    MissingColumn(String),
    #[error("degenerate split: {0}")]
    DegenerateSplit(String),
    #[error("fraction {0} out of range")]
    InvalidFraction(f64),
    #[error("dataset is empty")]
    EmptyDataset,

    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("training diverged at epoch {epoch}, batch {batch}: loss = {loss}")]
    Diverged { epoch: usize, batch: usize, loss: f64 },
    #[error("invalid hyperparameter: {0}")]
    Hyperparameter(String),
    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}
