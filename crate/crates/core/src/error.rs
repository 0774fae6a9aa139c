use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// The document does not follow the IR / plan / config schema.
    #[error("schema error: {0}")]
    Schema(String),
    /// Structurally invalid graph (cycle, dangling edge, bad annotation).
    #[error("validation error at node '{node}': {message}")]
    Validation { node: String, message: String },
    #[error("shape error at node '{node}': {message}")]
    Shape { node: String, message: String },
    #[error("dependency error at node '{node}': {message}")]
    Dependency { node: String, message: String },
    #[error("missing weight tensor '{0}'")]
    MissingWeight(String),
    #[error("shape mismatch for '{name}': expected {expected:?}, found {found:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("target level {target}% is infeasible; maximum achievable level is {max_achievable:.4}%")]
    InfeasibleTarget { target: f64, max_achievable: f64 },
    #[error("non-finite value during {stage} (epoch {epoch}, step {step})")]
    NonFinite {
        stage: String,
        epoch: usize,
        step: usize,
    },
    #[error("empty split: {0}")]
    EmptySplit(String),
    #[error("plan mismatch: {0}")]
    PlanMismatch(String),
    #[error("format error at byte offset {offset}: {message}")]
    Format { offset: u64, message: String },
    #[error("unknown class '{0}'")]
    UnknownClass(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("lineage mismatch: {0}")]
    Lineage(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn validation(node: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Validation {
            node: node.into(),
            message: message.into(),
        }
    }

    pub(crate) fn shape(node: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Shape {
            node: node.into(),
            message: message.into(),
        }
    }

    pub(crate) fn dependency(node: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Dependency {
            node: node.into(),
            message: message.into(),
        }
    }

    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    /// Short machine-readable name used in error documents.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Schema(_) => "SchemaError",
            Error::Validation { .. } => "ValidationError",
            Error::Shape { .. } => "ShapeError",
            Error::Dependency { .. } => "DependencyError",
            Error::MissingWeight(_) => "MissingWeight",
            Error::ShapeMismatch { .. } => "ShapeMismatch",
            Error::InfeasibleTarget { .. } => "InfeasibleTarget",
            Error::NonFinite { .. } => "NonFinite",
            Error::EmptySplit(_) => "EmptySplit",
            Error::PlanMismatch(_) => "PlanMismatch",
            Error::Format { .. } => "FormatError",
            Error::UnknownClass(_) => "UnknownClass",
            Error::Config(_) => "ConfigError",
            Error::Lineage(_) => "LineageError",
            Error::Io { .. } => "IoError",
        }
    }

    /// Process exit code: 2 validation/config, 3 numerical, 4 infeasible target.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::NonFinite { .. } => 3,
            Error::InfeasibleTarget { .. } => 4,
            _ => 2,
        }
    }
}
