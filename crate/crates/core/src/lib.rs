//! Hybrid-zero-dynamics gait synthesis, gait libraries and gait-guided policy
//! training for a planar biped.

pub mod bezier;
pub mod chart;
pub mod dynamics;
pub mod error;
pub mod gaitlib;
pub mod gaitopt;
pub mod guided;
pub mod hzd;
pub mod integrate;
pub mod mapping;
pub mod model;
pub mod nlp;

pub use error::{Error, Result};
