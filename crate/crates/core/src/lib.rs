pub mod analysis;
pub mod backend;
pub mod data;
pub mod harness;
mod error;
pub mod objectives;
pub mod prompting;
pub mod scoring;

pub use error::{Error, Result};

#[cfg(test)]
mod testutil;
