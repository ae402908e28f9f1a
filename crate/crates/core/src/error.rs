use thiserror::Error;

/// A single validation finding. Violations are data: callers decide whether
/// to print, collect, or abort on them.
#[derive(Debug, Clone, PartialEq)]
pub struct Violation {
    /// Facility id the finding refers to, if any; `None` for portfolio-level findings.
    pub facility: Option<String>,
    /// Stable machine-readable rule name, e.g. "loading-norm".
    pub rule: &'static str,
    pub detail: String,
}

impl std::fmt::Display for Violation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match &self.facility {
            Some(id) => write!(f, "[{}] {}: {}", id, self.rule, self.detail),
            None => write!(f, "{}: {}", self.rule, self.detail),
        }
    }
}

#[derive(Debug, Error)]
pub enum CriskError {
    #[error("order {requested} exceeds cap {cap}")]
    OrderCap { requested: usize, cap: usize },

    #[error("{what} out of domain: {value}")]
    Domain { what: &'static str, value: f64 },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("validation failed with {} finding(s):\n{}", .0.len(),
            .0.iter().map(|v| format!("  {v}")).collect::<Vec<_>>().join("\n"))]
    Validation(Vec<Violation>),

    #[error("tensor dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("first-order portfolio loading vector is numerically zero; no principal direction")]
    DegenerateDirection,

    #[error("single-factor value profile is not increasing at the quantile: V'({eta:.6}) = {slope:.3e}")]
    NonMonotone { eta: f64, slope: f64 },

    #[error("singular derivative in {what}; adjustment undefined")]
    SingularDerivative { what: &'static str },

    #[error("eigenvalue iteration failed to converge for {size}-node rule")]
    EigenFailure { size: usize },

    #[error("tail window holds {got} scenarios; at least {need} required")]
    InsufficientTail { got: usize, need: usize },

    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {detail}")]
    Format { path: String, detail: String },
}

pub type Result<T> = std::result::Result<T, CriskError>;

impl CriskError {
    /// Process exit code the command-line tool maps this error to.
    /// 2 = input/validation, 3 = numerical, 4 = I/O.
    pub fn exit_code(&self) -> i32 {
        match self {
            CriskError::Validation(_) | CriskError::Config(_) => 2,
            CriskError::Io { .. } | CriskError::Format { .. } => 4,
            _ => 3,
        }
    }
}
