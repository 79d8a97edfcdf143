//! Blind super-resolution with kernel-aware back-projection networks.

pub mod autograd;
pub mod blocks;
pub mod checkpoint;
pub mod config;
pub mod degradation;
pub mod error;
pub mod eval;
pub mod exec;
pub mod experiments;
pub mod gradcheck;
pub mod imaging;
pub mod kernels;
pub mod losses;
pub mod model;
pub mod networks;
pub mod optim;
pub mod selfcheck;
pub mod synthetic;
pub mod tensor;
pub mod training;
pub mod viz;

pub use error::{Error, Result};
