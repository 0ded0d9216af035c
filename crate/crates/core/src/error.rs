use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("owner mismatch: {0}")]
    OwnerMismatch(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("degenerate spectrum at tol {tol:.3e}: measured gap ratio {gap:.3e} < required {required}")]
    DegenerateSpectrum { tol: f64, gap: f64, required: f64 },
    #[error("not a projection: {0}")]
    NotProjection(String),
    #[error("gram form degenerate: trace is not faithful")]
    GramDegenerate,
    #[error("retraction undefined at grid point {point}: eigenvalue {eigenvalue:.6} in forbidden band")]
    RetractionUndefined { point: usize, eigenvalue: f64 },
    #[error("unsupported: {0}")]
    Unsupported(String),
    #[error("linear algebra failure: {0}")]
    LinAlg(String),
}

pub type Result<T> = std::result::Result<T, Error>;
