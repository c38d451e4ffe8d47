use std::path::PathBuf;

use crate::grammar::Diagnostic;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("meta template `{meta}` references unknown synonym set `{set}`")]
    UnknownSynonymSet { meta: String, set: String },

    #[error("unknown meta template `{0}`")]
    UnknownMeta(String),

    #[error("choice vector has {got} entries but meta template `{meta}` has {expected} slots")]
    ChoiceLength {
        meta: String,
        expected: usize,
        got: usize,
    },

    #[error("slot {position} of meta template `{meta}`: choice {choice} out of range for {size} candidates")]
    ChoiceOutOfRange {
        meta: String,
        position: usize,
        choice: usize,
        size: usize,
    },

    #[error("index {index} out of range for a space of {len} templates")]
    IndexOutOfRange { index: u64, len: u64 },

    #[error("refusing to enumerate {count} templates (cap is {cap})")]
    EnumerationRefused { count: u64, cap: u64 },

    #[error("template count overflows u64 in meta template `{0}`")]
    CountOverflow(String),

    #[error("grammar failed validation with {} diagnostic(s)", .0.len())]
    Invalid(Vec<Diagnostic>),

    #[error("tree structure error at node `{node}`: {reason}")]
    Structure { node: String, reason: String },

    #[error("tree weights have not been accumulated")]
    NotAccumulated,

    #[error("template space is empty")]
    EmptySpace,

    #[error("requested {requested} distinct templates but the space holds only {total}")]
    Capacity { requested: u64, total: u64 },

    #[error("{0} choices exceed the 26 available option letters")]
    TooManyChoices(usize),

    #[error("similarity scorer failed: {0}")]
    Scorer(#[source] crate::eval::ClientError),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("{0}")]
    Format(String),

    #[error("corpus rejected: {rejected} of {total} records malformed (limit {limit_pct}%)")]
    TooManyRejects {
        rejected: usize,
        total: usize,
        limit_pct: f64,
    },

    #[error("incomplete evaluation grid, {} (item, template) pair(s) missing", .missing.len())]
    Coverage { missing: Vec<(String, u64)> },

    #[error("model client failed for item `{item_id}` template {template_id} after {attempts} attempt(s): {source}")]
    Client {
        item_id: String,
        template_id: u64,
        attempts: u32,
        #[source]
        source: crate::eval::ClientError,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{context}: {source}")]
    Json {
        context: String,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn json(context: impl Into<String>, source: serde_json::Error) -> Self {
        Error::Json {
            context: context.into(),
            source,
        }
    }
}
