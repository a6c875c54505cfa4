use thiserror::Error;

/// Every failure mode surfaced by the toolkit.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("parse error: {0}")]
    Parse(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("state {0:?} outside the declared domain box")]
    OutOfDomain(Vec<f64>),
    #[error("non-finite value while evaluating {0}")]
    NonFinite(String),
    #[error("unknown model `{0}`")]
    UnknownModel(String),
    #[error("eigenvalues of df_1 not real and distinct (gap {0:e})")]
    NotStrictlyHyperbolic(f64),
    #[error("no coercive compensating matrix (best theta {0:e})")]
    NoCoercivity(f64),
    #[error("profile iteration did not converge: {0}")]
    NoConvergence(String),
    #[error("amplitude {0} outside the small-amplitude regime")]
    AmplitudeTooLarge(f64),
    #[error("degenerate singular point, |dap0| = {0:e}")]
    DegenerateSingularPoint(f64),
    #[error("fit failed: {0}")]
    FitFailed(String),
    #[error("{0} sign changes of lambda_p along the profile")]
    MultipleSingularPoints(usize),
    #[error("diagonalizer condition number {0:e} too large")]
    IllConditionedDiagonalizer(f64),
    #[error("center eigenvalue {0:e} of the asymptotic matrix")]
    CenterEigenvalue(f64),
    #[error("step size collapse at x = {0}")]
    StiffnessFailure(f64),
    #[error("mode basis lost rank: {0}")]
    BasisDegeneracy(String),
    #[error("no fast direction at the singular point (Re kappa = {0:e})")]
    NoFastDirection(f64),
    #[error("column count mismatch: expected {expected}, got {got}")]
    ColumnCountMismatch { expected: usize, got: usize },
    #[error("phase jump too large near contour parameter {0}")]
    PhaseJumpTooLarge(f64),
    #[error("eigenbasis failure: {0}")]
    EigenbasisFailure(String),
    #[error("near-singular solve (condition {0:e})")]
    NearSingularSolve(f64),
    #[error("resolvent solve singular (smallest pivot {0:e})")]
    SolverSingular(f64),
    #[error("elliptic solve failed: {0}")]
    EllipticSolveFailed(String),
    #[error("blow-up at t = {0}")]
    Blowup(f64),
    #[error("time step {0} violates the CFL bound")]
    CflViolation(f64),
    #[error("energy equivalence ratio {0} outside [0.1, 10]")]
    EquivalenceFailure(f64),
}

pub type Result<T> = std::result::Result<T, Error>;
