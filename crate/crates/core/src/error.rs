use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LabError {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("point ({x}, {y}) lies outside the domain")]
    Domain { x: f64, y: f64 },

    #[error("invalid input: {0}")]
    Input(String),

    #[error("capacity exceeded: {got} points, limit {limit}")]
    Capacity { got: usize, limit: usize },

    #[error("solver did not converge after {iterations} iterations (violation {violation:e})")]
    NonConvergence { iterations: usize, violation: f64 },

    #[error("degenerate potential: |Du| >= 1 at {bad} of {total} nodes")]
    Degenerate { bad: usize, total: usize },

    #[error("direction undefined: |Du| = {0:e}")]
    UndefinedDirection(f64),

    #[error("empty field: {0}")]
    Empty(String),

    #[error("disconnected domain: {0}")]
    Topology(String),

    #[error("internal inconsistency: {0}")]
    Internal(String),
}

pub type Result<T> = std::result::Result<T, LabError>;
