//! Model-averaged double robust causal effect estimation.
//!
//! The pipeline has four stages:
//!
//! 1. [`exposure_bma`] computes posterior inclusion probabilities of each
//!    covariate in the exposure model.
//! 2. [`outcome_mc3`] explores outcome models with a prior that favours
//!    covariates strongly tied to the exposure.
//! 3. [`tmle`] computes a targeted estimate for every outcome model retained.
//! 4. [`estimate`] averages those estimates by posterior weight.
//!
//! [`benchmarks`] and [`simulation`] provide reference estimators and the
//! Monte Carlo scenarios used to evaluate the method.

pub mod benchmarks;
pub mod data;
pub mod error;
pub mod estimate;
pub mod exposure_bma;
pub mod glm;
pub mod linalg;
pub mod mc3;
pub mod model_space;
pub mod outcome_mc3;
pub mod par;
pub mod rng;
pub mod simulation;
pub mod tmle;

pub use data::{Dataset, VarType};
pub use error::{Error, Result};
pub use estimate::{estimate, GbceeConfig, GbceeResult, VarianceMethod};
pub use model_space::AdjustmentSet;
pub use tmle::{Contrast, ContrastKind};
