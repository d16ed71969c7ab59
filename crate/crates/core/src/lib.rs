//! Predictor–corrector forecasting of dynamical systems.

pub mod adam;
pub mod autodiff;
pub mod commands;
pub mod config;
pub mod corrector;
pub mod data;
pub mod error;
pub mod eval;
pub mod mlp;
pub mod ode;
pub mod path;
pub mod predictors;
pub mod systems;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
