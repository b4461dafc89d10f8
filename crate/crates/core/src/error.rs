use std::path::PathBuf;

use crate::mesh::BoundaryTag;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Broad failure class, used by the CLI to pick an exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Validation,
    Numerical,
    Io,
}

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("evaluation point coincides with the source at ({x}, {z})")]
    Singularity { x: f64, z: f64 },

    #[error("mesh construction failed: {0}")]
    Mesh(String),

    #[error("boundary tag {0:?} is not present in the mesh")]
    MissingTag(BoundaryTag),

    #[error("node {node} at ({x}, {z}) lies outside the source mesh")]
    OutOfDomain { node: usize, x: f64, z: f64 },

    #[error("inconsistent input: {0}")]
    Inconsistent(String),

    #[error("non-finite value in {name} at index {index}")]
    NonFinite { name: &'static str, index: usize },

    #[error("linear solver did not converge after {iterations} iterations (relative residual {residual:.3e})")]
    NonConvergence { iterations: usize, residual: f64 },

    #[error("linear solver breakdown at iteration {iterations} (relative residual {residual:.3e})")]
    Breakdown { iterations: usize, residual: f64 },

    #[error("positivity violated: {what} = {value:.6e} at ({x:.4}, {z:.4})")]
    Positivity { what: &'static str, value: f64, x: f64, z: f64 },

    #[error("singular normal equations: {0}")]
    Singular(String),

    #[error("calibration interval [{lo}, {hi}] does not bracket a root (mismatch {f_lo:.4e} .. {f_hi:.4e})")]
    Bracket { lo: f64, hi: f64, f_lo: f64, f_hi: f64 },

    #[error("asymptotic tail invalid for source {source_id}: 1 + p_inf = {value:.4e} at ({x:.4}, {z:.4})")]
    Asymptotic { source_id: usize, value: f64, x: f64, z: f64 },

    #[error("tail refinement did not converge in {iterations} iterations (last ratio {last:.3e})")]
    TailNonConvergence { iterations: usize, last: f64, history: Vec<f64> },

    #[error("invalid s-grid: {0}")]
    Grid(String),

    #[error("exp overflow while forming intensity: max |s^2 w| = {0:.4e}")]
    Range(f64),

    #[error("config line {line}: {msg}")]
    Config { line: usize, msg: String },

    #[error("{path}: row {row}: {msg}")]
    Parse { path: PathBuf, row: usize, msg: String },

    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },

    #[error("{stage}: {source}")]
    Stage { stage: &'static str, source: Box<Error> },
}

impl Error {
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Domain(_)
            | Error::Mesh(_)
            | Error::MissingTag(_)
            | Error::OutOfDomain { .. }
            | Error::Inconsistent(_)
            | Error::Grid(_)
            | Error::Config { .. }
            | Error::Parse { .. } => ErrorKind::Validation,
            Error::Io { .. } => ErrorKind::Io,
            Error::Stage { source, .. } => source.kind(),
            _ => ErrorKind::Numerical,
        }
    }

    /// Wraps the error with the name of the pipeline stage that produced it.
    pub fn at(self, stage: &'static str) -> Error {
        Error::Stage { stage, source: Box::new(self) }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Error {
        Error::Io { path: path.into(), source }
    }
}
