//! Differentiable n-body simulation with learned dynamics.

pub mod cli;
pub mod config;
pub mod datagen;
pub mod dynamics;
pub mod error;
pub mod experiments;
pub mod integrators;
pub mod io;
pub mod models;
pub mod neural;
pub mod optimizers;

pub use error::{Error, Result};
