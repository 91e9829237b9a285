//! Temporal knowledge consistency for instance-discrimination representation
//! learning, at desk scale.

pub mod autodiff;
pub mod bank;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod ema;
pub mod eval;
pub mod io;
pub mod losses;
pub mod nn;
pub mod rng;
pub mod trainer;
