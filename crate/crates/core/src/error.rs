use thiserror::Error;

pub type Result<T, E = HexaError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum HexaError {
    /// Operand shapes do not fit the primitive's signature.
    #[error("dimension error in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    /// A caller broke an operation's precondition.
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("cannot parse row {row}, column '{column}': {message}")]
    Ingest {
        row: usize,
        column: String,
        message: String,
    },

    /// Training produced a non-finite loss.
    #[error("divergence: non-finite {component} loss ({value}) at epoch {epoch}, step {step}")]
    Divergence {
        component: &'static str,
        epoch: usize,
        step: usize,
        value: f64,
    },

    /// A failure inside one cross-validation fold.
    #[error("repeat {repeat}, fold {fold}: {source}")]
    Fold {
        repeat: usize,
        fold: usize,
        #[source]
        source: Box<HexaError>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl HexaError {
    pub(crate) fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        HexaError::Dimension {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        HexaError::Contract(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        HexaError::Config(msg.into())
    }

    pub(crate) fn data(msg: impl Into<String>) -> Self {
        HexaError::Data(msg.into())
    }

    /// The innermost error, skipping fold wrappers.
    pub fn root(&self) -> &HexaError {
        match self {
            HexaError::Fold { source, .. } => source.root(),
            other => other,
        }
    }
}
