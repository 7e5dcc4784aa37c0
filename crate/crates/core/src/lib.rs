//! Vehicle simulation, Koopman eigenfunction identification and model
//! predictive control in the lifted state space.

pub mod config;
pub mod dataset;
pub mod error;
pub mod experiments;
pub mod io;
pub mod koopman;
pub mod mpc;
pub mod qp;
pub mod vehicle;

pub use error::{Error, Result};
