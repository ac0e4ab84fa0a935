pub mod autograd;
pub mod config;
pub mod error;
pub mod geometry;
pub mod grounding;
pub mod harness;
pub mod labeling;
pub mod synthdata;
pub mod toymodel;
pub mod training;

pub use error::{Error, Result};
