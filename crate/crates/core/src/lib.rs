//! Pairwise relation prediction over two encoder streams per entity:
//! reverse-mode autodiff, encoders, within-drug fusion, a relation trunk,
//! heads and losses, leakage-free splits, metrics, training, and drift
//! analysis.

pub mod autodiff;
pub mod checkpoint;
pub mod conditioning;
pub mod config;
pub mod dataset;
pub mod drift;
pub mod encoders;
pub mod error;
pub mod gradcheck;
pub mod heads;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod optim;
pub mod splits;
pub mod synthetic;
pub mod tensor;
pub mod training;
pub mod trunk;

pub use error::{Error, Result};
