//! Error type shared across the crate.

/// Convenience alias used throughout the library.
pub type Result<T> = std::result::Result<T, DyError>;

/// Everything that can go wrong in the library, one variant per failure class.
#[derive(Debug, thiserror::Error)]
pub enum DyError {
    /// Operand shapes are incompatible for a primitive; names the primitive
    /// and both shapes so the caller can see exactly what was fed in.
    #[error("{primitive}: incompatible shapes {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        primitive: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// `apply_primitive` was handed a name outside the supported set.
    #[error("unknown primitive `{0}`")]
    UnknownPrimitive(String),

    /// A primitive was called with a bad or missing attribute.
    #[error("{primitive}: {msg}")]
    BadAttribute { primitive: &'static str, msg: String },

    /// Anything structurally invalid that is not a shape mismatch:
    /// bad configuration values, out-of-range timesteps, empty inputs.
    #[error("{0}")]
    Invalid(String),

    /// A schedule was compiled for a different set of weights than the one
    /// it is being used with.
    #[error("schedule fingerprint {schedule} does not match model fingerprint {model}")]
    FingerprintMismatch { schedule: String, model: String },

    /// A checkpoint was loaded against an expected configuration and one
    /// field disagrees.
    #[error("checkpoint config mismatch on `{field}`: expected {expected}, found {found}")]
    ConfigMismatch {
        field: &'static str,
        expected: String,
        found: String,
    },

    /// A file had the wrong magic, version, or was truncated/corrupt.
    #[error("{what}: {msg}")]
    Format { what: String, msg: String },

    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

impl DyError {
    /// Shorthand for [`DyError::Invalid`] with formatted text.
    pub fn invalid(msg: impl Into<String>) -> Self {
        DyError::Invalid(msg.into())
    }

    /// Shorthand for [`DyError::Format`].
    pub fn format(what: impl Into<String>, msg: impl Into<String>) -> Self {
        DyError::Format {
            what: what.into(),
            msg: msg.into(),
        }
    }
}
