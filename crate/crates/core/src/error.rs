use std::path::PathBuf;

use thiserror::Error;

/// Broad failure class, used for CLI exit codes and FFI status codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Config,
    Data,
    Numeric,
    Io,
}

#[derive(Debug, Error)]
pub enum QlabError {
    #[error("matrix is not square ({rows}x{cols})")]
    NotSquare { rows: usize, cols: usize },
    #[error("matrix is not symmetric: |a[{i}][{j}] - a[{j}][{i}]| exceeds tolerance")]
    NotSymmetric { i: usize, j: usize },
    #[error("matrix is not positive definite (pivot {index} = {pivot:e}); increase damping")]
    NotPositiveDefinite { index: usize, pivot: f64 },
    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    DimMismatch {
        context: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("empty input: {0}")]
    EmptyInput(&'static str),
    #[error("non-finite value in {0}")]
    NonFiniteInput(&'static str),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("degenerate calibration: {0}")]
    DegenerateCalibration(&'static str),
    #[error("inverse Hessian diagonal {value:e} at column {column} is below 1e-12")]
    BrokenDamping { column: usize, value: f64 },
    #[error("insufficient data for `{lang}`: {available} tokens available, {required} required")]
    InsufficientData {
        lang: String,
        available: usize,
        required: usize,
    },
    #[error("multi10 needs exactly 10 languages, got {0}")]
    WrongLanguageCount(usize),
    #[error("sequence of {tokens} tokens exceeds context length {context}")]
    ContextOverflow { tokens: usize, context: usize },
    #[error("token id {id} outside vocabulary of size {vocab}")]
    TokenOutOfRange { id: u32, vocab: usize },
    #[error("unknown projection `{0}`")]
    UnknownProjection(String),
    #[error("token stream needs at least 2 tokens")]
    EmptyStream,
    #[error("calibration vocabulary ({calib}) does not match model vocabulary ({model})")]
    VocabMismatch { calib: usize, model: usize },
    #[error("calibration sets use different tokenizers: {0} vs {1}")]
    TokenizerMismatch(String, String),
    #[error("perplexity must be positive, got {0}")]
    NonPositivePpl(f64),
    #[error("invalid config at {pointer}: {message}")]
    Config { pointer: String, message: String },
    #[error("invalid report: {0}")]
    Validation(String),
    #[error("malformed container: {0}")]
    Container(String),
    #[error("missing input file {0}")]
    MissingInput(PathBuf),
    #[error("malformed input at {path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl QlabError {
    pub fn config(pointer: impl Into<String>, message: impl Into<String>) -> Self {
        QlabError::Config {
            pointer: pointer.into(),
            message: message.into(),
        }
    }

    pub fn kind(&self) -> ErrorKind {
        use QlabError::*;
        match self {
            Config { .. } | Validation(_) => ErrorKind::Config,
            NotPositiveDefinite { .. }
            | NotSymmetric { .. }
            | BrokenDamping { .. }
            | DegenerateCalibration(_)
            | NonFiniteInput(_)
            | NonPositivePpl(_) => ErrorKind::Numeric,
            Io(_) => ErrorKind::Io,
            _ => ErrorKind::Data,
        }
    }

    /// Process exit code: 2 config, 3 data, 4 numeric. I/O failures count as data errors.
    pub fn exit_code(&self) -> i32 {
        match self.kind() {
            ErrorKind::Config => 2,
            ErrorKind::Data | ErrorKind::Io => 3,
            ErrorKind::Numeric => 4,
        }
    }

    /// Stable machine-readable tag for error objects.
    pub fn tag(&self) -> &'static str {
        use QlabError::*;
        match self {
            NotSquare { .. } => "NotSquare",
            NotSymmetric { .. } => "NotSymmetric",
            NotPositiveDefinite { .. } => "NotPositiveDefinite",
            DimMismatch { .. } => "DimMismatch",
            LengthMismatch { .. } => "LengthMismatch",
            EmptyInput(_) => "EmptyInput",
            NonFiniteInput(_) => "NonFiniteInput",
            ShapeMismatch(_) => "ShapeMismatch",
            DegenerateCalibration(_) => "DegenerateCalibration",
            BrokenDamping { .. } => "BrokenDamping",
            InsufficientData { .. } => "InsufficientData",
            WrongLanguageCount(_) => "WrongLanguageCount",
            ContextOverflow { .. } => "ContextOverflow",
            TokenOutOfRange { .. } => "TokenOutOfRange",
            UnknownProjection(_) => "UnknownProjection",
            EmptyStream => "EmptyStream",
            VocabMismatch { .. } => "VocabMismatch",
            TokenizerMismatch(..) => "TokenizerMismatch",
            NonPositivePpl(_) => "NonPositivePpl",
            Config { .. } => "ConfigError",
            Validation(_) => "ValidationError",
            Container(_) => "ContainerError",
            MissingInput(_) => "MissingInput",
            Parse { .. } => "ParseError",
            Io(_) => "IoError",
            Json(_) => "JsonError",
        }
    }
}

pub type Result<T, E = QlabError> = std::result::Result<T, E>;
