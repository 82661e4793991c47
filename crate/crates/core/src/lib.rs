//! Personalised CVD risk-assessment scheduling.
//!
//! A two-stage landmark survival pipeline — multivariate linear mixed model,
//! best linear unbiased predictions of risk-factor trajectories, and landmark
//! Cox models — feeding a person-specific net-benefit optimiser that selects
//! the interval between risk assessments. Cohorts are synthetic with known
//! generating parameters, so every stage can be verified against ground truth.

pub mod cohort;
pub mod error;
pub mod landmark;
pub mod lmem;
pub mod netbenefit;
pub mod survival;
pub mod validation;

pub use error::{Error, Result};
