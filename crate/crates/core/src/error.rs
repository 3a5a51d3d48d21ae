use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("frame {frame}: missing required landmark `{landmark}`")]
    MissingLandmark { frame: usize, landmark: String },

    #[error("degenerate landmarks: {0}")]
    DegenerateLandmarks(String),

    #[error("no skeleton frame within {tolerance_s} s of wrist sample at t = {time} s")]
    AlignmentGap { time: f64, tolerance_s: f64 },

    #[error("insufficient frames: need {needed}, got {got}")]
    InsufficientFrames { needed: usize, got: usize },

    #[error("limb length {0} m outside the [0.3, 1.0] m plausibility band")]
    LimbLengthOutOfRange(f64),

    #[error("degenerate points: {0}")]
    DegeneratePoints(String),

    #[error("too few samples: need {needed}, got {got}")]
    TooFewSamples { needed: usize, got: usize },

    #[error("rank-deficient fit: {0}")]
    RankDeficient(String),

    #[error("empty rollout: {0}")]
    EmptyRollout(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("unsupported document version {found} for {kind} (expected {expected})")]
    Version {
        kind: &'static str,
        found: u32,
        expected: u32,
    },

    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    /// True for errors caused by user-supplied files or settings rather than
    /// by a failure during computation.
    pub fn is_config(&self) -> bool {
        matches!(
            self,
            Error::Parse { .. }
                | Error::Config(_)
                | Error::Version { .. }
                | Error::Io { .. }
                | Error::Json(_)
                | Error::MissingLandmark { .. }
                | Error::InvalidArgument(_)
        )
    }
}
