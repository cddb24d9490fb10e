use thiserror::Error;

/// Everything that can go wrong inside the library.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    /// An argument lies outside the domain of the operation (negative time,
    /// non-positive step size, empty aggregation, ...).
    #[error("domain error: {0}")]
    Domain(String),

    /// Inconsistent construction parameters (grid too small, unsorted
    /// spectrum, non-diagonal operator, ...).
    #[error("configuration error: {0}")]
    Configuration(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("dimension mismatch in {context}: expected {expected}, found {found}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        found: usize,
    },

    /// A regularity exponent chain is violated; the message names the
    /// inequality that failed.
    #[error("constraint violated: {0}")]
    Constraint(String),

    /// The closed-form stepping path was requested for coefficients whose
    /// commutativity could not be verified.
    #[error("refusing {scheme}: commutative noise of the {kind} kind not verified (max residual {residual:e})")]
    CommutativityRefused {
        scheme: &'static str,
        kind: &'static str,
        residual: f64,
    },

    /// A step produced a non-finite intermediate; `term` names it.
    #[error("numerical overflow in term `{term}` at step {step}")]
    Overflow { term: &'static str, step: usize },

    #[error("study error: {0}")]
    Study(String),

    #[error("i/o error: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
