use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("point outside domain: {0}")]
    Domain(String),
    #[error("boundary projection did not converge after {iterations} iterations (|V-E| = {residual:e})")]
    Projection { iterations: usize, residual: f64 },
    #[error("trajectory left the domain box at t = {t}")]
    Escape { t: f64 },
    #[error("step size underflow at t = {t} (h = {h:e})")]
    Stiffness { t: f64, h: f64 },
    #[error("no rebrake event before t = {t_max}")]
    NoBrake { t_max: f64 },
    #[error("degenerate curve: {0}")]
    Degenerate(String),
    #[error("invalid geodesic: {0}")]
    InvalidGeodesic(String),
    #[error("geodesic approaches the boundary at s = {s}; lift through the time parameterization instead")]
    Handoff { s: f64 },
    #[error("insufficient sampling: {0}")]
    Sampling(String),
    #[error("optimizer stalled after {iterations} iterations (gradient norm {grad_norm:e})")]
    Stall { iterations: usize, grad_norm: f64 },
    #[error("no boundary start hit the query point (best miss {miss:e})")]
    Miss { miss: f64 },
    #[error("minimizer is not unique (spread {spread:e}); the distance is not differentiable here")]
    NonUnique { spread: f64 },
    #[error("non-finite quadrature: {0}")]
    Quadrature(String),
    #[error("interpolation outside the sampled range: {0}")]
    Interpolation(String),
    #[error("mesh is not graded toward the boundary start: {0}")]
    MeshNotGraded(String),
    #[error("singular sub-interval problem: {0}")]
    SingularSubinterval(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("i/o: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl Error {
    /// Usage-class errors are caused by bad input rather than numerics.
    pub fn is_usage(&self) -> bool {
        matches!(self, Error::Domain(_) | Error::Config(_) | Error::Io(_))
    }
}

pub type Result<T> = std::result::Result<T, Error>;
