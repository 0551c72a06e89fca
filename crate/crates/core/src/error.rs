use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("degenerate rotation: quaternion norm {0:e} is below 1e-12")]
    DegenerateRotation(f64),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("stale cache: parameters changed since the forward pass")]
    StaleCache,

    #[error("singular geometry: {0}")]
    SingularGeometry(&'static str),

    #[error("degenerate geometry: {0}")]
    DegenerateGeometry(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("ground truth has zero energy, SNR is undefined")]
    ZeroSignal,

    #[error("empty dataset")]
    EmptyDataset,

    #[error("model has no gaussians")]
    EmptyModel,

    #[error("non-finite value in parameter group `{group}` at iteration {iteration}")]
    NonFinite { group: String, iteration: usize },

    #[error("could not place sample {index} after {attempts} rejections")]
    Placement { index: usize, attempts: usize },

    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Numeric failures (as opposed to bad input data or arguments).
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            Error::DegenerateRotation(_)
                | Error::NonFinite { .. }
                | Error::SingularGeometry(_)
                | Error::ZeroSignal
        )
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }
}
