//! Importance-based allocation of transformer neurons into general and
//! language-specific sets for multilingual translation.

pub mod allocation;
pub mod analysis;
pub mod cli;
pub mod config;
pub mod data;
pub mod decode;
pub mod error;
pub mod importance;
pub mod mask;
pub mod model;
pub mod persist;
pub mod pipeline;

pub use error::{Error, Result};
