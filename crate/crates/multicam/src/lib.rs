//! Fuel-optimal low-thrust collision avoidance for multiple conjunctions.
//!
//! The pipeline linearizes the dynamics with Taylor jets, convexifies the
//! collision-risk constraints and solves a sequence of second-order cone
//! programs with the in-crate interior-point solver.

pub mod astro;
pub mod convexify;
pub mod dajet;
pub mod optim;
pub mod risk;
pub mod scp;
pub mod scalar;
pub mod shell;
pub mod socp;
pub mod sparse;
pub mod uncert;
pub mod units;

pub use scalar::Number;

pub type Jet64 = dajet::Jet<f64>;
pub type Jet32 = dajet::Jet<f32>;
