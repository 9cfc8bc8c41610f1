use thiserror::Error;

/// Errors produced anywhere in the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("cannot normalize a zero vector")]
    ZeroNorm,
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("unknown symbol {0:?} (not in vocabulary)")]
    UnknownSymbol(char),
    #[error("unknown token id {0}")]
    UnknownToken(usize),
    #[error("unknown dialect label {0:?}; expected one of wz, ad, kb")]
    UnknownDialect(String),
    #[error("dialect id {id} out of range (have {count})")]
    DialectOutOfRange { id: usize, count: usize },
    #[error("function is not deterministic: two evaluations gave {first} and {second}")]
    NonDeterministic { first: f64, second: f64 },
    #[error("config error: {0}")]
    Config(String),
    #[error("bad file format: {0}")]
    Format(String),
    #[error("empty input: {0}")]
    Empty(&'static str),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape { op, detail: detail.into() }
    }
}
