pub mod cli;
pub mod config;
pub mod deadlock;
pub mod diffnet;
pub mod dynamics;
pub mod environment;
pub mod error;
pub mod learn;
pub mod linalg;
pub mod qp;
pub mod safety;
pub mod simulator;

pub use error::{Error, Result};
