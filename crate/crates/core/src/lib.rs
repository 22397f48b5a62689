//! Spatio-temporal attention models for groundwater levels, with optional
//! physics guidance from the horizontal flow equation.

pub mod attention;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod layers;
pub mod losses;
pub mod models;
pub mod physics;
pub mod training;
pub mod rng;

pub use error::{GwError, Result};
