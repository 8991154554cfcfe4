//! Sequential change-point monitoring for parametric nonlinear regression.
//!
//! A model is fitted by least squares on a change-free historical window; the
//! residuals of subsequent observations are accumulated in a weighted CUSUM
//! and compared with critical values obtained either from the simulated
//! limiting Wiener supremum ([`asymptotic`]) or from a residual bootstrap
//! ([`bootstrap`]). [`harness`] runs Monte-Carlo size and power studies and
//! [`app`] holds the command-line front end.

pub mod app;
pub mod asymptotic;
pub mod bootstrap;
pub mod detector;
pub mod error;
pub mod harness;
pub mod io;
pub mod linalg;
pub mod model;
pub mod moments;
pub mod nls;
pub mod rng;
pub mod stats;

pub use error::{Error, Result};
