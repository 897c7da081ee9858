//! File formats, dataset IO, the remote language-model client and the
//! `zeus` command line on top of `zeus-core`.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod dataset;
pub mod error;
pub mod features;
pub mod pgm;
pub mod remote;
pub mod run;
pub mod zt;

pub use error::{Result, ZeusError};
