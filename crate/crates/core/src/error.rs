use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid delay: {0} ms (must be a multiple of 80 in [80, 2400])")]
    Delay(u32),

    #[error("empty input to {0}")]
    EmptyInput(&'static str),

    #[error("utterance too short: word {word:?} (index {index}) not flushed within {n_frames} frames")]
    TargetOverflow {
        word: String,
        index: usize,
        n_frames: usize,
    },

    #[error("unknown word {0:?} for tokenizer")]
    UnknownWord(String),

    #[error("KV pool exhausted while allocating for session {session}")]
    PoolExhausted { session: u64 },

    #[error("position {pos} outside block table range [{start}, {end})")]
    TableRange { pos: usize, start: usize, end: usize },

    #[error("state desync: {0}")]
    Desync(String),

    #[error("session {0} is closed")]
    SessionClosed(u64),

    #[error("training diverged at step {0} (loss is not finite)")]
    Diverged(usize),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("wav: {0}")]
    Wav(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub(crate) fn shape_err(op: &'static str, detail: impl Into<String>) -> Error {
    Error::Shape {
        op,
        detail: detail.into(),
    }
}
