use std::fmt;

/// Spatial/temporal axis of a video or block grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    Channel,
    Temporal,
    Height,
    Width,
}

impl fmt::Display for Axis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            Axis::Channel => "channel",
            Axis::Temporal => "temporal",
            Axis::Height => "height",
            Axis::Width => "width",
        };
        f.write_str(name)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch on {axis} axis: {detail}")]
    Dimension { axis: Axis, detail: String },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("class index {index} out of range for {classes} classes")]
    Index { index: usize, classes: usize },

    #[error("{axis} extent {extent} is not divisible by patch size {patch}")]
    NonDivisible { axis: Axis, extent: usize, patch: usize },

    #[error("sequence has no temporal units")]
    EmptySequence,

    #[error("malformed timestamp group at token {index}: {reason}")]
    Parse { index: usize, reason: String },

    #[error("timestamps decrease at unit {unit}: {previous}s then {current}s")]
    NonMonotonic { unit: usize, previous: u64, current: u64 },

    #[error("learned grounder has not been trained")]
    UntrainedGrounder,

    #[error("budget error: {0}")]
    Budget(String),

    #[error("feature error: {0}")]
    Feature(String),

    #[error("out-of-vocabulary token `{0}`")]
    Vocab(String),

    #[error("non-finite {branch} loss ({value})")]
    Numeric { branch: &'static str, value: f64 },

    #[error("empty input")]
    EmptyInput,

    #[error("config error: {0}")]
    Config(String),

    #[error("label error: {0}")]
    Label(String),

    #[error("metric error: {0}")]
    Metric(String),

    #[error("dataset contains no instances")]
    EmptyDataset,

    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    /// True for failures caused by non-finite numbers rather than bad input.
    pub fn is_numeric(&self) -> bool {
        matches!(self, Error::Numeric { .. })
    }
}

pub type Result<T> = std::result::Result<T, Error>;
