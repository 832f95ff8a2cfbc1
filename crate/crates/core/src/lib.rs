pub mod adapt;
pub mod checkpoint;
pub mod config;
pub mod error;
pub mod gaussian;
pub mod gqvae;
pub mod harness;
pub mod maze;
pub mod meta;
pub mod numerics;
pub mod par;
pub mod rng;
pub mod skills;

pub use error::{Error, Result};
