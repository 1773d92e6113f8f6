use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    /// Argument outside its mathematical domain (e.g. evaluation point off [0,1]).
    #[error("domain error: {0}")]
    Domain(String),

    /// Structural mismatch between operands.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// Invalid construction data (knot vectors, control nets, weights, configs).
    #[error("invalid input: {0}")]
    Invalid(String),

    /// Geometry Jacobian singular at a parameter point.
    #[error("singular Jacobian at parameter point {point:?}")]
    SingularJacobian { point: Vec<f64> },

    /// Collocation factor too ill-conditioned to invert reliably.
    #[error("collocation matrix ill-conditioned in dimension {dim} (estimated cond {cond:.3e})")]
    IllConditioned { dim: usize, cond: f64 },

    /// Refusal guard for operations that would materialize huge objects.
    #[error("size cap exceeded for {what}: {size} > {cap}")]
    SizeCap { what: &'static str, size: usize, cap: usize },

    /// Reduced system in the alternating solver could not be factorized.
    #[error("singular projected system at sweep {sweep}, core {core}")]
    SingularLocalSystem { sweep: usize, core: usize },

    /// Dense linear algebra failure (singular factorization etc.).
    #[error("linear algebra error: {0}")]
    Linalg(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    /// Malformed TT binary file.
    #[error("invalid TT file: {0}")]
    TtFile(String),
}

pub type Result<T> = std::result::Result<T, Error>;
