//! Passivity-based perimeter control of multi-region urban traffic networks
//! described by macroscopic fundamental diagrams.

pub mod cli;
pub mod controllers;
pub mod error;
pub mod experiments;
pub mod mfd;
pub mod model;
pub mod sim;
pub mod stability;

pub use error::{Error, Result};
