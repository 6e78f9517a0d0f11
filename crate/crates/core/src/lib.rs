pub mod archive;
pub mod dist;
pub mod env;
pub mod diversity;
pub mod error;
pub mod kernels;
pub mod linalg;
pub mod nn;
pub mod normalizer;
pub mod optim;
pub mod policy;
pub mod rl;
pub mod trainers;

pub use error::{Error, Result};
