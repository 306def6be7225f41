pub mod config;
pub mod data;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod http;
pub mod knowledge;
pub mod model;
pub mod nn;
pub mod numerics;
pub mod pipeline;
pub mod query;
pub mod text;
pub mod training;

pub use error::{Error, Result};
