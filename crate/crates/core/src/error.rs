use thiserror::Error;

/// Error type shared by every module in the crate.
#[derive(Debug, Error)]
pub enum Error {
    /// An operation received tensors whose extents do not fit together.
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    /// A configuration value is out of range or inconsistent.
    #[error("invalid configuration: {0}")]
    Config(String),

    /// Caller-supplied data failed validation.
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// The autodiff graph was used out of protocol (e.g. backward twice).
    #[error("autodiff misuse: {0}")]
    Graph(String),

    /// A non-finite value or other numeric failure surfaced at runtime.
    #[error("numeric failure: {0}")]
    Numeric(String),

    /// A container file is truncated or malformed.
    #[error("corrupt file at byte offset {offset}: {detail}")]
    Corrupt { offset: u64, detail: String },

    /// A container file carries a format version this build cannot read.
    #[error("unsupported format version {found} (this build reads version {supported})")]
    UnsupportedVersion { found: u32, supported: u32 },

    /// AUC is undefined when the labels contain only one class.
    #[error("AUC undefined: labels contain a single class")]
    SingleClassAuc,

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Maps errors onto the process exit-code contract:
    /// 1 for validation problems, 2 for runtime/numeric failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Shape { .. }
            | Error::Config(_)
            | Error::InvalidInput(_)
            | Error::Corrupt { .. }
            | Error::UnsupportedVersion { .. }
            | Error::SingleClassAuc
            | Error::Io(_) => 1,
            Error::Graph(_) | Error::Numeric(_) => 2,
        }
    }

    pub fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape { op, detail: detail.into() }
    }
}
