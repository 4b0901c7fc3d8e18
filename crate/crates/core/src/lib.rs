pub mod config;
pub mod env;
pub mod error;
pub mod experiment;
pub mod filter;
pub mod geodesic;
pub mod nn;
pub mod planner;
pub mod seed;
pub mod ssm;
pub mod trackability;

pub use error::{Error, Result};
