//! Multi-property information extraction toolkit.

pub mod decoding;
pub mod error;
pub mod exec;
pub mod gradsuite;
pub mod metrics;
pub mod model;
pub mod recycler;
pub mod synth;
pub mod tensor;
pub mod text;
pub mod tokenize;

pub use error::{Error, Result};
