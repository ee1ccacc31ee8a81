use alloc::string::String;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    /// A numerical routine failed in a way exact arithmetic rules out.
    #[error("internal error: {0}")]
    Internal(String),
    /// An in-loop algorithm invariant was violated at iteration `iteration`.
    #[error("invariant violated at iteration {iteration}: {what}")]
    Invariant { iteration: usize, what: String },
}

macro_rules! invalid {
    ($($arg:tt)*) => {
        $crate::Error::InvalidInput(alloc::format!($($arg)*))
    };
}
pub(crate) use invalid;
