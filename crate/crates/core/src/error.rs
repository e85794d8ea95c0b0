use thiserror::Error;

/// Every failure mode surfaced by the library.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("cocycle violation: {identity} fails at node {node} (defect {defect:.3e})")]
    CocycleViolation {
        identity: &'static str,
        node: usize,
        defect: f64,
    },
    #[error("fiber metric not positive definite at node {node} (min eigenvalue {min_eig:.3e})")]
    NonPositiveMetric { node: usize, min_eig: f64 },
    #[error("invalid bundle: {0}")]
    InvalidBundle(String),
    #[error("sections live in different charts or bundles: {0}")]
    ChartMismatch(String),
    #[error("operator is not self-adjoint (relative asymmetry {asymmetry:.3e})")]
    NotSelfAdjoint { asymmetry: f64 },
    #[error("operator is not positive (lambda_min = {lambda_min:.6e})")]
    NotPositive { lambda_min: f64 },
    #[error("quadrature failure: {0}")]
    QuadratureFailure(String),
    #[error("member count must be at least 1 (got {0})")]
    InvalidCount(usize),
    #[error("degenerate covariance: KL weight {weight:.3e} at index {index}")]
    DegenerateCovariance { index: usize, weight: f64 },
    #[error("inadmissible query: items {first} and {second} have overlapping shifted supports")]
    InadmissibleQuery { first: usize, second: usize },
    #[error("inadmissible query: {0}")]
    InadmissibleTime(String),
    #[error("unknown member: family {family}, member {member}")]
    UnknownMember { family: usize, member: usize },
    #[error("oracle query budget of {0} exhausted")]
    BudgetExceeded(usize),
    #[error("inadmissible dictionary layout: {0}")]
    InadmissibleLayout(String),
    #[error("missing cross-Gram entry ({0}, {1})")]
    MissingGramEntry(usize, usize),
    #[error("singular Gram system (condition {condition:.3e})")]
    SingularGram { condition: f64 },
    #[error("residual {residual:.3e} above tolerance {tolerance:.3e}")]
    ResidualAboveTolerance { residual: f64, tolerance: f64 },
    #[error("finite-difference step too coarse (Richardson defect {defect:.3e})")]
    DerivativeStepTooCoarse { defect: f64 },
    #[error("no convergent delta selection (best Cauchy defect {defect:.3e})")]
    NoConvergentSelection { defect: f64 },
    #[error("rank-deficient frame at node {node} (score {score:.3e})")]
    RankDeficientFrame { node: usize, score: f64 },
    #[error("ill-conditioned overlap at node {node} (condition {condition:.3e})")]
    IllConditionedOverlap { node: usize, condition: f64 },
    #[error("kernel subspace too small: {0}")]
    KernelTooSmall(String),
    #[error("constrained solve singular at node {node}")]
    ConstrainedSolveSingular { node: usize },
    #[error("jet matrix rank deficient at node {node} (relative singular value {rel_sigma:.3e})")]
    JetRankDeficient { node: usize, rel_sigma: f64 },
    #[error("operator fit residual {residual:.3e} above tolerance {tolerance:.3e} at node {node}")]
    FitResidualAboveTolerance {
        node: usize,
        residual: f64,
        tolerance: f64,
    },
    #[error("rebuilt model invalid: {0}")]
    RebuiltModelInvalid(String),
    #[error("bundle classes differ (hidden {hidden}, rebuilt {rebuilt})")]
    ClassMismatch { hidden: i32, rebuilt: i32 },
    #[error("invalid config at `{path}`: {message}")]
    ConfigInvalid { path: String, message: String },
    #[error("stage input missing: {missing} (run `{prerequisite}` first)")]
    StageInputMissing {
        missing: String,
        prerequisite: String,
    },
    #[error("i/o: {0}")]
    Io(String),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
