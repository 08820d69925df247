use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("cannot compose up-to-scale motions")]
    UpToScaleComposition,

    #[error("point lies behind the camera (depth {0})")]
    BehindCamera(f64),

    #[error("crop rectangle ({x}, {y}, {width}x{height}) exceeds the {image_width}x{image_height} image")]
    CropOutOfBounds {
        x: f64,
        y: f64,
        width: f64,
        height: f64,
        image_width: f64,
        image_height: f64,
    },

    #[error("invalid intrinsics: {0}")]
    InvalidIntrinsics(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("frame pair starting at {index} is out of range for a trajectory of {len} frames")]
    FrameOutOfRange { index: usize, len: usize },

    #[error("grid dimensions differ: {expected:?} vs {found:?}")]
    DimensionMismatch {
        expected: (usize, usize),
        found: (usize, usize),
    },

    #[error("{width}x{height} grid is not divisible by {factor}")]
    NotDivisible {
        width: usize,
        height: usize,
        factor: usize,
    },

    #[error("bad magic in flow file")]
    BadMagic,

    #[error("truncated file: {0}")]
    TruncatedFile(String),

    #[error("degenerate motion: {0}")]
    DegenerateMotion(String),

    #[error("insufficient static support: {available} usable pixels, {required} required")]
    InsufficientStaticSupport { available: usize, required: usize },

    #[error("no jointly valid pixels")]
    NoOverlap,

    #[error("segmentation marks {:.1}% of valid pixels dynamic", fraction * 100.0)]
    AllDynamic { fraction: f64 },

    #[error("iteration {iteration}: {source}")]
    AtIteration {
        iteration: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("point spread is degenerate (covariance rank < 2)")]
    DegenerateSpread,

    #[error("trajectories differ in length ({est} vs {gt}) or are too short")]
    LengthMismatch { est: usize, gt: usize },

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("empty trajectory set")]
    EmptyTrajectory,

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Strips any iteration context and returns the underlying error.
    pub fn root(&self) -> &Error {
        match self {
            Error::AtIteration { source, .. } => source.root(),
            other => other,
        }
    }

    pub fn iteration(&self) -> Option<usize> {
        match self {
            Error::AtIteration { iteration, .. } => Some(*iteration),
            _ => None,
        }
    }
}
