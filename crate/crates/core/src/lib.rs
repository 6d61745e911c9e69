pub mod autodiff;
pub mod error;
pub mod linalg;
pub mod prior;
pub mod nn;
pub mod inference;
pub mod generative;
pub mod data;
pub mod model;
pub mod objective;
pub mod oracle;
pub mod trainer;
pub mod image;
pub mod eval;
pub mod selftest;
pub mod cli;

pub use error::{Error, Result};
