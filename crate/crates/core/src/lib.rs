//! Rating prediction from a sparse rating matrix and auxiliary matrices with
//! shared, context-adapted embeddings and per-context scoring networks.
//!
//! The pipeline runs [`data`] loading and splitting, [`model`] parameters
//! and prediction, [`gradients`] and [`training`], then [`metrics`] and
//! [`experiments`]. [`reductions`] names the baseline and ablation
//! configurations.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod experiments;
pub mod gradients;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod objective;
pub mod reductions;
pub mod synthetic;
pub mod training;

pub use error::{Error, Result};
