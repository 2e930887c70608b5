use alloc::string::String;

/// Failures raised by the numeric core and the learning components built on it.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    /// An operation produced NaN or an infinity.
    #[error("non-finite value produced by `{op}`")]
    NonFinite { op: &'static str },

    #[error("shape mismatch in `{op}`: {detail}")]
    Shape { op: &'static str, detail: String },

    /// A caller broke a documented precondition.
    #[error("contract violation: {0}")]
    Contract(String),
}

pub type Result<T, E = Error> = core::result::Result<T, E>;

macro_rules! contract {
    ($($arg:tt)*) => {
        $crate::error::Error::Contract(alloc::format!($($arg)*))
    };
}

pub(crate) use contract;
