use thiserror::Error;

/// Errors raised anywhere in the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("feature id {id} out of vocabulary for field `{field}` (size {vocab})")]
    Index {
        field: String,
        id: usize,
        vocab: usize,
    },

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("normalization statistics not initialized{}", domain_suffix(*.domain))]
    UninitializedStats { domain: Option<usize> },

    #[error("domain {domain} out of range 1..={num_domains}")]
    Domain { domain: usize, num_domains: usize },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("cannot calibrate domain {domain} to CTR {target}")]
    Calibration { domain: usize, target: f64 },

    #[error("metric undefined: {0}")]
    Metric(String),

    #[error("unsupported checkpoint version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("cannot fold: {0}")]
    Fold(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

fn domain_suffix(domain: Option<usize>) -> String {
    match domain {
        Some(p) => format!(" for domain {p}"),
        None => String::new(),
    }
}

pub type Result<T> = std::result::Result<T, Error>;
