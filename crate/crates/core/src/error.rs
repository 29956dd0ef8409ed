use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("failed to access {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed scenario: {0}")]
    Parse(String),

    /// A parameter violates a documented invariant. The message names it.
    #[error("validation failed: {0}")]
    Validation(String),

    /// `W·θ/ln2 ≤ 1`: the closed-form effective capacity is undefined.
    #[error("effective capacity outside its domain: W*theta/ln2 = {ratio} (must exceed 1)")]
    CapacityDomain { ratio: f64 },

    /// The closed form gave a non-positive capacity or delay rate.
    #[error("non-positive {what}: {value}")]
    NonPositiveRate { what: &'static str, value: f64 },

    #[error("conditioning event P(D_c < D_c,max) = {probability:e} is negligible")]
    DegenerateConditioning { probability: f64 },

    #[error("quadrature did not converge (estimated error {error:e} on [{lo}, {hi}])")]
    Quadrature { lo: f64, hi: f64, error: f64 },

    #[error(
        "Riccati iteration did not converge: residual {residual:e} after {iterations} iterations"
    )]
    RiccatiNonConvergence { residual: f64, iterations: usize },

    #[error("Lyapunov ratio undefined at the zero state")]
    ZeroState,

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("no feasible point in the search grid")]
    EmptyFeasibleSet,
}
