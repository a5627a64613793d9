use thiserror::Error;

/// Errors produced by the design-optimization engines.
#[derive(Debug, Clone, Error)]
pub enum Error {
    /// A domain type was constructed with values violating its invariants.
    #[error("invalid {what}: {why}")]
    InvalidInput { what: &'static str, why: String },

    /// Cholesky factorization hit a non-positive pivot.
    #[error("matrix is not positive definite (pivot {pivot})")]
    NotPositiveDefinite { pivot: usize },

    /// Covariance implied by the design is numerically singular.
    #[error("singular covariance: {0}")]
    SingularCovariance(String),

    /// A scenario produced a hazard reduction outside (0, 1).
    #[error("hazard reduction {value} for r={r} is outside (0, 1)")]
    HazardOutOfRange { value: f64, r: f64 },

    /// Deterministic CDF evaluation could not reach the requested tolerance.
    #[error("mvn cdf did not converge: estimated error {error:.3e} > tol {tol:.3e} at {points} points")]
    CdfNonConvergence { error: f64, tol: f64, points: usize },

    /// A tensor-grid evaluation would exceed the configured work budget.
    #[error("grid evaluation budget exceeded: {required} > {budget} nodes")]
    WorkBudgetExceeded { required: u128, budget: u128 },

    /// Candidate generation found fewer constraint-satisfying points than requested.
    #[error("insufficient valid candidate points: {valid} valid < {requested} requested")]
    InsufficientValidPoints { valid: usize, requested: usize },

    /// Two interpolation sites coincide.
    #[error("duplicate interpolation sites at indices {0} and {1}")]
    DuplicateSites(usize, usize),

    /// Interpolation sites are affinely degenerate (collinear).
    #[error("rank-deficient site configuration: {0}")]
    RankDeficient(String),

    /// Surface fitting is only supported up to three input dimensions.
    #[error("unsupported surface dimension {0} (max 3)")]
    UnsupportedDimension(usize),

    /// The objective returned a non-finite value during optimization.
    #[error("non-finite objective value {value} at {point:?}")]
    NonFiniteObjective { value: f64, point: Vec<f64> },

    /// The smoothed-surface argmax violates the FWER constraint.
    #[error("surface optimum at {point:?} is infeasible under the FWER constraint")]
    InfeasibleOptimum { point: Vec<f64> },

    /// Too many per-point failures during a sweep.
    #[error("sweep failed: {failed} of {total} design points errored; first: {first}")]
    SweepFailed {
        failed: usize,
        total: usize,
        first: String,
    },
}

pub type Result<T> = std::result::Result<T, Error>;
