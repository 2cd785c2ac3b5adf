//! Joint key-value pair extraction from line-level OCR.

pub mod baseline_serre;
pub mod corpus;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod evalkit;
pub mod link_parser;
pub mod model;
pub mod numerics;
pub mod train;

pub use error::{Error, Result};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");
