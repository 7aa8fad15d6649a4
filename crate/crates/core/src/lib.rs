pub mod config;
pub mod data;
pub mod error;
pub mod experiment;
pub mod linalg;
pub mod mlp;
pub mod optim;
pub mod qn;
pub mod verify;

pub use error::{Error, Result};
