#![no_std]
#![deny(unsafe_code)]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod agents;
pub mod autodiff;
pub mod checkpoint;
pub mod diagnostics;
pub mod envs;
pub mod error;
pub mod expansion;
pub mod models;
pub mod nets;
pub mod replay;
pub mod rng;

pub use error::{Error, Result};
