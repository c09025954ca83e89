//! Forward–backward splitting solver for nonlinear filtering of
//! Cox-type emission times: coefficient models, grids, transport and diffusion
//! steps, the regression network, and the two backward schemes.

pub mod diffusion;
pub mod error;
pub mod grids;
pub mod isotonic;
pub mod models;
pub mod neuralreg;
pub mod quadrature;
pub mod report;
pub mod splitting;
pub mod transport;

pub use error::{Error, Result};
