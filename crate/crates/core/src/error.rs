use thiserror::Error;

/// Errors produced by meshing, assembly, solvers and drivers.
#[derive(Debug, Error)]
pub enum Error {
    #[error("mesh must have at least 2 cells per side, got {0}")]
    MeshTooCoarse(usize),
    #[error("dimension mismatch: expected {expected}, got {got} ({context})")]
    DimensionMismatch {
        expected: usize,
        got: usize,
        context: &'static str,
    },
    #[error("sparse Cholesky factorization failed: {0}")]
    Factorization(String),
    #[error("singular reduced system at time step {step}")]
    SingularReducedSystem { step: usize },
    #[error("reduced basis is not orthonormal: max deviation {0:.3e}")]
    BasisNotOrthonormal(f64),
    #[error("coercivity constant is not positive: {0:.3e}")]
    NonpositiveCoercivity(f64),
    #[error("objective is not finite")]
    NonFiniteObjective,
    #[error("noise sample vanished; retry with a different seed")]
    DegenerateNoise,
    #[error("unknown run id {0}, expected 1..=4")]
    UnknownRun(u32),
    #[error("basis enrichment retries exhausted after {retries} attempts ({context})")]
    EnrichmentExhausted { retries: usize, context: String },
    #[error("trust-region iteration stagnated: {0} consecutive rejections")]
    Stagnation(usize),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
