//! Arbitrated matching-adjusted indirect comparison.
//!
//! Two sponsors each hold individual patient data (IPD) for their own
//! two-arm trial against a shared comparator C, and only aggregate data
//! (AgD) for the rival's trial. Classic MAIC lets each sponsor reweight its
//! own trial to the rival's population, which can produce conflicting
//! conclusions. The arbitrated procedure instead targets the overlap
//! population of both trials, so both sponsors estimate the same quantity.

pub mod error;
pub mod rng;
pub mod special;

pub mod data_model;
pub mod fixtures;
pub mod propensity;
pub mod weighting;
pub mod estimators;
pub mod covgen;
pub mod canonical;
pub mod arbitration;
pub mod simharness;

pub use error::{Error, Result};
pub use nalgebra;
pub use rayon;
