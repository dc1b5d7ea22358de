use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("sequence too short: {levels} pyramid levels need at least {min_len} frames, got {len}")]
    SequenceTooShort { len: usize, levels: usize, min_len: usize },

    #[error("frame {frame} lies outside instance [{start}, {end})")]
    FrameOutsideInstance { frame: f64, start: usize, end: usize },

    #[error("degenerate segment [{start}, {end}]")]
    DegenerateSegment { start: f64, end: f64 },

    #[error("unknown class id {class} (model has {num_classes} classes)")]
    UnknownClass { class: usize, num_classes: usize },

    #[error("training diverged: non-finite {component} at epoch {epoch}, batch {batch}")]
    Diverged { component: String, epoch: usize, batch: usize },

    #[error("format error at byte {offset}: {message}")]
    Format { offset: u64, message: String },

    #[error("no ground truth instances to evaluate against")]
    NoGroundTruth,

    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("json error in {path}: {source}")]
    Json {
        path: String,
        #[source]
        source: serde_json::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: &std::path::Path, source: std::io::Error) -> Self {
        Error::Io { path: path.display().to_string(), source }
    }

    pub(crate) fn json(path: &std::path::Path, source: serde_json::Error) -> Self {
        Error::Json { path: path.display().to_string(), source }
    }
}
