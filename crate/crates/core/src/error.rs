use thiserror::Error;

/// Errors raised anywhere in the estimation pipeline.
///
/// Variants are split into input problems (bad shapes, bad files, bad
/// configuration) and numerical problems (a modelling assumption failed on
/// the data at hand). [`Error::is_numerical`] exposes that split so front
/// ends can map it to distinct exit codes.
#[derive(Error, Debug)]
pub enum Error {
    #[error("conformance error: {what} has length {found}, expected {expected}")]
    Conformance {
        what: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("non-finite value in {what} at index {index}")]
    NonFinite { what: &'static str, index: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("empty sample: {0}")]
    EmptySample(String),

    #[error("empty domain: the mask selects no grid cells")]
    EmptyDomain,

    #[error("empty basis: no Gram eigenvalue exceeds {drop_tol:e} times the largest ({max_eigenvalue:e})")]
    EmptyBasis { drop_tol: f64, max_eigenvalue: f64 },

    #[error("triangulation does not cover {} unmasked cell centre(s), first offenders: {:?}", .cells.len(), &.cells[..(.cells.len().min(10))])]
    Coverage { cells: Vec<usize> },

    #[error("invalid triangulation: {0}")]
    Mesh(String),

    #[error("PVE selection infeasible: all {components} components explain only {achieved:.6} of the total variance, below tau = {tau} (projection accuracy (A2) is suspect)")]
    SelectionInfeasible { tau: f64, achieved: f64, components: usize },

    #[error("near-multiplicity between eigenvalues {j} and {k}: gap {gap:e} below tolerance {tol:e} (spectral gap assumption (A3) violated numerically)")]
    NearMultiplicity { j: usize, k: usize, gap: f64, tol: f64 },

    #[error("design second-moment matrix is numerically singular: condition number {condition:e} exceeds {limit:e} (moment and nondegeneracy assumption (A4))")]
    Nondegeneracy { condition: f64, limit: f64 },

    #[error("cannot build the true family: {0}")]
    Family(String),

    #[error("degenerate design: {0}")]
    DegenerateDesign(String),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("{failed} of {total} replicates failed (more than 5%); first failure: {first}")]
    ReplicateFailures { failed: usize, total: usize, first: String },

    #[error("format error at byte {offset}: {message}")]
    Format { offset: u64, message: String },

    #[error("table error in column '{column}', row {row}: {message}")]
    Table {
        column: String,
        row: usize,
        message: String,
    },

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    /// True when the failure is a numerical or modelling-assumption failure
    /// rather than a malformed input.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::EmptyBasis { .. }
                | Error::SelectionInfeasible { .. }
                | Error::NearMultiplicity { .. }
                | Error::Nondegeneracy { .. }
                | Error::DegenerateDesign(_)
                | Error::Family(_)
                | Error::ReplicateFailures { .. }
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
