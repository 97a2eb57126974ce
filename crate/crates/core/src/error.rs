use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    #[error("grid mismatch: {0}")]
    GridMismatch(String),

    #[error("field value at cell {cell} is not finite ({value})")]
    NonFiniteValue { cell: usize, value: f64 },

    #[error("invalid problem: {0}")]
    InvalidProblem(String),

    #[error("control index out of range: a={a_index} (|A|={a_len}), b={b_index} (|B|={b_len})")]
    ControlIndex {
        a_index: usize,
        b_index: usize,
        a_len: usize,
        b_len: usize,
    },

    /// A scheme inequality failed on the grid; the message carries the numbers.
    #[error("{condition} violated: {detail}")]
    Infeasible {
        condition: &'static str,
        detail: String,
    },

    #[error("monotonicity violated at cell {cell}: {detail}")]
    MonotonicityViolated { cell: usize, detail: String },

    #[error("numeric failure at time level {level}, cell {cell}: value {value}")]
    NumericFailure {
        level: usize,
        cell: usize,
        value: f64,
    },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("precondition failed: {0}")]
    Precondition(String),

    #[error("budget exceeded: {0}")]
    Budget(String),
}
