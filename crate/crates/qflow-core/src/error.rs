use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    /// A tape primitive produced a non-finite value.
    #[error("non-finite value produced by primitive `{op}`")]
    NonFinite { op: &'static str },

    /// Array shapes incompatible with the requested operation.
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    /// Invalid configuration or argument value.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// Duplicate parameter name in a ParamSet.
    #[error("duplicate parameter name `{0}`")]
    DuplicateParam(String),

    /// A named parameter was expected but not present.
    #[error("missing parameter `{0}`")]
    MissingParam(String),

    /// Discrete-world validation failure.
    #[error("invalid world: {0}")]
    InvalidWorld(String),

    /// Training aborted on a non-finite loss; the diagnostic checkpoint
    /// captures the parameters at the failing step.
    #[error("non-finite loss at step {step}; diagnostic checkpoint attached")]
    NonFiniteLoss {
        step: u64,
        diagnostic: Box<crate::harness::Checkpoint>,
    },

    /// Unknown ablation knob.
    #[error("unknown ablation knob `{got}`; valid knobs: {valid}")]
    UnknownKnob { got: String, valid: String },

    /// Malformed or truncated container file.
    #[error("corrupt file: {0}")]
    CorruptFile(String),

    /// Container version not understood by this build.
    #[error("unsupported file version {got} (expected {expected})")]
    VersionMismatch { got: u32, expected: u32 },

    /// Checkpoint dimensions incompatible with the requested data.
    #[error("dimension mismatch: {0}")]
    DimMismatch(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("config parse error: {0}")]
    ConfigParse(String),
}

pub type Result<T> = std::result::Result<T, Error>;
