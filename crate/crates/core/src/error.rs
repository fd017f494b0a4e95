use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("unknown question id `{0}`")]
    UnknownQuestion(String),

    #[error("answer {answer} out of range for question `{question}` ({alphabet} choices)")]
    AnswerOutOfRange {
        question: String,
        answer: usize,
        alphabet: usize,
    },

    /// Every latent value assigns zero probability to the observation.
    #[error("impossible evidence: answer {answer} to `{question}` has zero probability under the model")]
    ImpossibleEvidence { question: String, answer: usize },

    #[error("outcome space of {size} exceeds the enumeration cap {cap}; use sampled entropy instead")]
    SupportTooLarge { size: u128, cap: usize },

    #[error("question `{0}` already appears in the history")]
    AlreadyAsked(String),

    #[error("empty candidate pool")]
    EmptyPool,

    #[error("empty training set")]
    EmptyTrainingSet,

    #[error("question `{0}` has no feature vector")]
    MissingFeatures(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("invalid table: {0}")]
    InvalidTable(String),

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("entity `{entity}` cannot supply a trial: {reason}")]
    InsufficientEntity { entity: String, reason: String },

    #[error("remote model unavailable after {attempts} attempts: {reason}")]
    Unavailable { attempts: u32, reason: String },

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("session `{0}` not found")]
    SessionNotFound(String),

    #[error("session `{0}` has no pending question")]
    NoPendingQuestion(String),

    #[error("session `{0}` has exhausted its candidate pool")]
    Exhausted(String),

    #[error("session `{0}` is closed")]
    SessionClosed(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
