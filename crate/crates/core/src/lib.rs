pub mod cache;
pub mod checkpoint;
pub mod config;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod frontend;
pub mod model;
pub mod nn;
pub mod paging;
pub mod session;
pub mod targets;
pub mod tokenizer;
pub mod train;
pub mod wav;
pub mod weights;

pub use error::{Error, Result};
