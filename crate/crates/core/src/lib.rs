//! Solver and Monte Carlo harness for scalar mean-field LQG games whose agents
//! follow partially coupled forward-backward SDEs.
//!
//! Pipeline: [`riccati`] solves the x̄-independent coefficient equations,
//! [`consistency`] finds the limiting state average x̄ by fixed-point
//! iteration, [`strategy`] turns both into the decentralized feedback law,
//! [`simulator`] runs the N-agent population against its limiting
//! counterpart, and [`nash`] measures cost gaps and ε-Nash margins.

pub mod consistency;
pub mod csv;
mod error;
pub mod model;
pub mod nash;
pub mod numerics;
pub mod riccati;
pub mod simulator;
pub mod strategy;

pub use error::{Error, Result};
pub use model::{DeterministicPath, InitialLaw, LawKind, ModelParams, RngContract, TimeGrid};
