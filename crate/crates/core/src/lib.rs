//! Sequential Bayesian experimental design for locating a contaminant source
//! in a 2-D advection–diffusion field, with active learning of the
//! discrepancy between a misspecified source model and the true system.

pub mod bayes_grid;
pub mod bed_design;
pub mod discrepancy_trainer;
pub mod eki_indicator;
pub mod error;
pub mod experiment;
pub mod forward_models;
pub mod grid_pde;

pub use error::{Error, Result};
