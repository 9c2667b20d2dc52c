use alloc::string::String;

/// Errors produced by the core library.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("class {class} out of range 1..={classes}")]
    ClassOutOfRange { class: u16, classes: usize },

    #[error("class {class} has {available} labeled pixels but {requested} were requested")]
    SplitDeficit {
        class: u16,
        available: usize,
        requested: usize,
    },

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("non-finite value encountered in {0}")]
    NonFinite(&'static str),
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub fn shape(msg: impl Into<String>) -> Self {
        Error::ShapeMismatch(msg.into())
    }
}
