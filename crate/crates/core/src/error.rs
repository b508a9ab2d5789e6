use crate::model::ModelError;
use crate::numerics::NumericsError;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(
        "fixed-point iteration did not reach tolerance {tol:e} in {iterations} iterations (last residual {residual:e})"
    )]
    NotConverged { iterations: usize, residual: f64, tol: f64 },
    #[error("{0}")]
    InvalidInput(String),
}

impl Error {
    pub fn is_non_convergence(&self) -> bool {
        matches!(self, Error::NotConverged { .. })
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
