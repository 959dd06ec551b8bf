use thiserror::Error;

/// Errors surfaced by the model validators, solvers and the harness.
#[derive(Debug, Error)]
pub enum Error {
    #[error("column {col} of a rate matrix sums to {sum:e}, expected 0")]
    BadColumnSum { col: usize, sum: f64 },

    #[error("negative off-diagonal rate {value} at row {row}, column {col}")]
    NegativeRate { row: usize, col: usize, value: f64 },

    #[error("rate schedule is empty")]
    EmptySchedule,

    #[error("matrix is not symmetric")]
    NotSymmetric,

    #[error("non-finite value produced during the backward sweep")]
    NonFinite,

    #[error("penalization ladder exhausted before tolerance, last sup gap {last_gap:e}")]
    NoConvergence { last_gap: f64 },

    #[error("obstacle exceeds terminal value at state {state}: G(T)={obstacle} > xi={terminal}")]
    IncompatibleObstacle {
        state: usize,
        obstacle: f64,
        terminal: f64,
    },

    #[error("solutions live on different grids")]
    GridMismatch,

    #[error("instances must share the same driver apart from the forcing term")]
    InstanceMismatch,

    #[error("no instance satisfies the constraints: {0}")]
    ConstraintUnsatisfiable(String),

    #[error("config: {0}")]
    Config(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
