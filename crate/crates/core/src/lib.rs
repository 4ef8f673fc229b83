//! Degree-corrected Cox model for continuous-time directed interaction networks.
//!
//! The intensity of `i -> j` events is
//! `λ_ij(t) = exp{α_i(t) + β_j(t) + Z_ij(t)^T γ(t)}` with the anchor `β_n ≡ 0`.
//! This crate simulates such networks, estimates the curves by kernel-weighted
//! local estimating equations, builds sandwich confidence intervals and runs
//! multiplier-bootstrap tests for trend and degree heterogeneity.

pub mod cli;
pub mod error;
pub mod kernel;
pub mod estimator;
pub mod experiments;
pub mod output;
pub mod hypothesis;
pub mod inference;
pub mod rng;
pub mod simulator;
pub mod types;

pub use error::{Error, Result};
