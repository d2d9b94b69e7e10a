//! Zero-range process on the supercritical bond-percolation cluster.
//!
//! The crate generates periodic percolation environments, evaluates the
//! product invariant measures of the zero-range process, simulates the
//! process exactly by kinetic Monte Carlo, solves the resolvent equation
//! that defines corrected test functions on the cluster, and evaluates the
//! density fluctuation fields built on top of all of these.

pub mod connectivity;
pub mod corrector;
pub mod dynamics;
pub mod error;
pub mod fluctuations;
pub mod measure;
pub mod percolation;
pub mod rng;
pub mod stats;
pub mod sumtree;
pub mod testfn;
pub mod walk;

pub use error::{Error, Result};
