//! File formats, process backends, pipeline configuration and the `cspl`
//! command line around [`cspl_core`].

pub mod cli;
pub mod config;
mod error;
pub mod jsonl;
pub mod pipeline;
pub mod protocol;
pub mod report;
pub mod serve;
pub mod tables;
pub mod voc;

pub use error::{Error, Result};
