use std::path::PathBuf;

/// Errors raised across the corpus, model and evaluation pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("template resource error: {0}")]
    TemplateResource(String),

    // tabular data
    #[error("empty table: {0}")]
    EmptyTable(String),
    #[error("schema mismatch on line {line}: expected {expected} columns, found {found}")]
    SchemaMismatch { line: usize, expected: usize, found: usize },
    #[error("unknown label column `{0}`")]
    UnknownLabelColumn(String),
    #[error("non-finite numeric cell in column `{column}` (line {line}): `{value}`")]
    NonFiniteCell { column: String, line: usize, value: String },
    #[error("invalid numeric cell in column `{column}` (line {line}): `{value}`")]
    InvalidNumber { column: String, line: usize, value: String },
    #[error("invalid label `{value}` on line {line}")]
    InvalidLabel { line: usize, value: String },
    #[error("invalid metadata: {0}")]
    InvalidMetadata(String),
    #[error("no eligible label column")]
    NoEligibleLabel,
    #[error("invalid task: {0}")]
    InvalidTask(String),

    // sampling
    #[error("eval count {eval_count} must be smaller than row count {rows}")]
    EvalCountTooLarge { eval_count: usize, rows: usize },
    #[error("pool of {pool} rows cannot supply {requested} demonstrations")]
    PoolTooSmall { pool: usize, requested: usize },
    #[error("context count {0} is not one of 0, 4, 8, 16, 32, 64")]
    InvalidContextCount(usize),
    #[error("empty case grid axis: {0}")]
    EmptyAxis(&'static str),

    // rendering and tokenization
    #[error("cannot format non-finite value {0}")]
    NonFiniteValue(f64),
    #[error("feature name `{0}` contains the table delimiter `|`")]
    DelimiterInName(String),
    #[error("character at byte {offset} is not representable by the tokenizer")]
    Unrepresentable { offset: usize },

    // objective
    #[error("sample has no supervised positions")]
    NoSupervision,
    #[error("shape mismatch: {0}")]
    Shape(String),

    // model and training
    #[error("sequence of length {len} exceeds max_positions {max}")]
    TooLong { len: usize, max: usize },
    #[error("invalid model config: {0}")]
    InvalidModelConfig(String),
    #[error("invalid train config: {0}")]
    InvalidTrainConfig(String),
    #[error("non-finite loss at step {step}: {detail}")]
    NonFiniteLoss { step: usize, detail: String },
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("empty input: {0}")]
    Empty(&'static str),

    // evaluation
    #[error("auroc needs both positive and negative labels")]
    SingleClass,
    #[error("degenerate label range: min = max = {0}")]
    DegenerateRange(f64),
    #[error("empty aggregation cell: {0}")]
    EmptyCell(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
