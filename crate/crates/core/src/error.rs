use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("vector norm is below the 1e-12 floor")]
    ZeroNorm,
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimMismatch { expected: usize, got: usize },
    #[error("batch size mismatch: expected {expected}, got {got}")]
    BatchMismatch { expected: usize, got: usize },
    #[error("batch of {0} rows is too small for this operation")]
    BatchTooSmall(usize),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("unknown parameter `{0}`")]
    UnknownParameter(String),
    #[error("backward pass has not been run")]
    BackwardNotRun,
    #[error("at least two modalities are required, got {0}")]
    TooFewModalities(usize),
    #[error("anchored loss needs at least one non-anchor modality")]
    NoOtherModalities,
    #[error("feature column {0} has zero variance")]
    DegenerateColumn(usize),
    #[error("DOS curve has no tokens")]
    EmptyCurve,
    #[error("invalid DOS curve: {0}")]
    InvalidCurve(String),
    #[error("density grid size {got} does not match configured size {expected}")]
    GridSizeMismatch { expected: usize, got: usize },
    #[error("invalid crystal graph: {0}")]
    InvalidGraph(String),
    #[error("bad generator spec: {0}")]
    BadSpec(String),
    #[error("material record `{0}` carries no modality")]
    EmptyRecord(String),
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("invalid split fractions: {0}")]
    BadSplit(String),
    #[error("step {step} outside [0, {total}]")]
    StepOutOfRange { step: usize, total: usize },
    #[error("modality `{0}` missing")]
    ModalityMissing(String),
    #[error("non-finite loss at epoch {epoch}, step {step}")]
    NonFiniteLoss { epoch: usize, step: usize },
    #[error("property `{0}` missing")]
    PropertyMissing(String),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("k = {k} outside [1, {n}]")]
    BadK { k: usize, n: usize },
    #[error("DOS energy range does not cover the [{lo}, {hi}] eV window")]
    WindowNotCovered { lo: f64, hi: f64 },
    #[error("target DOS has zero area on the evaluation window")]
    ZeroTargetArea,
    #[error("duplicate material id `{0}`")]
    DuplicateId(String),
    #[error("n = {n} outside [1, {m}]")]
    BadN { n: usize, m: usize },
    #[error("no DOS available for candidate `{0}`")]
    LookupMissing(String),
    #[error("sample of {sample} exceeds dataset size {available}")]
    SampleTooLarge { sample: usize, available: usize },
    #[error("projection needs at least 3 rows, got {0}")]
    TooFewRows(usize),
    #[error("malformed file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}
