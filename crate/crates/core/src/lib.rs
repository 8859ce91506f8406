#![no_std]

extern crate alloc;

pub mod autograd;
pub mod dataset;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod evalkit;
pub mod model;
pub mod nn;
pub mod objective;
pub mod optim;
pub mod params;
pub mod tensor;
pub mod trainer;
pub mod vocab;

pub use error::{Error, Result};
