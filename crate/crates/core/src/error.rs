use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    // geomodel
    #[error("grid has {cells} cells, above the dense-covariance cap of {cap}")]
    CellCapExceeded { cells: usize, cap: usize },
    #[error("covariance matrix is not positive definite after jitter")]
    FactorizationFailure,

    // forward
    #[error("pressure solve did not reach tolerance: residual {residual:e} after {iterations} iterations")]
    SolverDiverged { iterations: usize, residual: f64 },
    #[error("tracer step violates CFL condition (courant number {courant:.3})")]
    CflViolation { courant: f64 },
    #[error("report index {index} out of range for {len} report times")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("pressure range is zero at report {report}")]
    DegenerateRange { report: usize },

    // inference
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("noise standard deviation is zero for a present {0} channel")]
    ZeroSigma(&'static str),
    #[error("forward-run budget of {budget} exhausted")]
    BudgetExhausted { budget: u64 },
    #[error("perturbation kernel covariance is singular")]
    DegenerateKernel,
    #[error("innovation matrix C_dd + alpha R is not positive definite")]
    SingularInnovationMatrix,
    #[error("ESMDA aborted after {completed_steps} steps ({forward_runs} forward runs): {source}")]
    EsmdaAborted {
        completed_steps: usize,
        forward_runs: u64,
        #[source]
        source: Box<Error>,
    },

    // selection
    #[error("requested {requested} representatives but only {distinct} distinct points")]
    InsufficientDistinctPoints { requested: usize, distinct: usize },

    // diagnostics
    #[error("empty sample set")]
    EmptySampleSet,
    #[error("histograms use different bin edges")]
    EdgeMismatch,
    #[error("empty ensemble")]
    EmptyEnsemble,
    #[error("need at least {needed} ensemble members, got {got}")]
    InsufficientMembers { needed: usize, got: usize },
    #[error("snapshots are not ordered by run count")]
    UnsortedSnapshots,

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// True for failures of the numerical machinery (solver, factorizations),
    /// as opposed to bad input.
    pub fn is_numerical(&self) -> bool {
        match self {
            Error::FactorizationFailure
            | Error::SolverDiverged { .. }
            | Error::CflViolation { .. }
            | Error::DegenerateKernel
            | Error::SingularInnovationMatrix
            | Error::DegenerateRange { .. } => true,
            Error::EsmdaAborted { source, .. } => source.is_numerical(),
            _ => false,
        }
    }
}
