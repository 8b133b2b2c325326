//! Crate-wide error type.

use std::path::PathBuf;

use crate::geometry::Frame;

pub type Result<T> = std::result::Result<T, Error>;

/// Coarse classification used by callers that map errors to process
/// exit codes: configuration problems, bad or missing data, and
/// numeric failures during optimization.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Config,
    Data,
    Numeric,
}

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("bounding box frames differ: {0:?} vs {1:?}")]
    FrameMismatch(Frame, Frame),

    #[error("bounding box extents must be positive, got w={w}, h={h}")]
    NonPositiveExtent { w: f64, h: f64 },

    #[error("bounding box coordinates must be finite")]
    NonFiniteBox,

    #[error("regression target distances must be nonnegative")]
    NegativeTargetDistance,

    #[error("degenerate grid location: an opposing distance pair is all zero")]
    DegenerateTargets,

    #[error("degenerate enclosing box")]
    DegenerateEnclosure,

    #[error("NMS score at index {0} is not finite")]
    NonFiniteScore(usize),

    #[error("{what} has length {got}, expected {expected}")]
    LengthMismatch {
        what: &'static str,
        got: usize,
        expected: usize,
    },

    #[error("IoU threshold must lie in (0, 1], got {0}")]
    InvalidThreshold(f64),

    #[error("pixel spacing must be positive, got {0}")]
    InvalidSpacing(f64),

    #[error("box frame {box_frame:?} does not match source frame {src_frame:?}")]
    UnrelatedFrames { box_frame: Frame, src_frame: Frame },

    #[error("frame metadata has non-finite or nonpositive scale")]
    InvalidFrameMeta,

    #[error("affine transform is singular (|det| = {0:e})")]
    SingularTransform(f64),

    #[error("downsample factor must be >= 1, got {0}")]
    InvalidFactor(i64),

    #[error("image is empty or smaller than the downsample factor")]
    ImageTooSmall,

    #[error("images have different pixel spacing: {0} vs {1}")]
    SpacingMismatch(f64, f64),

    #[error("{0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("manifest schema violation at {context}: {message}")]
    Schema { context: String, message: String },

    #[error("referenced image file does not exist: {0}")]
    MissingFile(PathBuf),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed image file {path}: {message}")]
    ImageFormat { path: PathBuf, message: String },

    #[error("weights container is invalid: {0}")]
    WeightsFormat(String),

    #[error("non-finite loss at epoch {epoch}, batch {batch} (value {value})")]
    NonFiniteLoss {
        epoch: usize,
        batch: usize,
        value: f64,
    },

    #[error("refiner training found no positive candidates in the whole dataset")]
    NoPositiveSamples,

    #[error("{what} must lie in {range}, got {value}")]
    OutOfRange {
        what: &'static str,
        range: &'static str,
        value: f64,
    },

    #[error("failed to place a lesion inside the phantom support after {0} attempts")]
    PlacementFailed(usize),

    #[error("empty input: {0}")]
    EmptyInput(&'static str),
}

impl Error {
    /// Map the error onto the process-level classification.
    pub fn class(&self) -> ErrorClass {
        use Error::*;
        match self {
            Config(_) | InvalidThreshold(_) | InvalidSpacing(_) | InvalidFactor(_)
            | InvalidFrameMeta | OutOfRange { .. } => ErrorClass::Config,
            Schema { .. } | MissingFile(_) | Io { .. } | ImageFormat { .. }
            | WeightsFormat(_) | EmptyInput(_) | LengthMismatch { .. } => ErrorClass::Data,
            _ => ErrorClass::Numeric,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
