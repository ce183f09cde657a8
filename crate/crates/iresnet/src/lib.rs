//! File formats, data loading and the command-line front end for
//! [`iresnet_core`].

pub mod archfile;
pub mod checkpoint;
pub mod cifar;
pub mod cli;
pub mod config;
pub mod error;
pub mod history;
pub mod report;
pub mod run;

pub use error::{Error, Result};
