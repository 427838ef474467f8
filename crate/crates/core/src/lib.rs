//! Postural-balance laboratory: inverted-pendulum body models under LQR control,
//! stochastic trial simulation, and intersection-point (IP) frequency analysis.

pub mod control;
pub mod error;
pub mod fit;
pub mod interface;
pub mod ipcurve;
pub mod linalg;
pub mod metrics;
pub mod model;
pub mod signal;
pub mod sim;

pub use error::{Error, Result};
