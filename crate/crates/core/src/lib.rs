pub mod autodiff;
pub mod channel;
pub mod cli;
pub mod data;
pub mod error;
pub mod ibloss;
pub mod model;
pub mod numerics;
pub mod quantizer;
pub mod runtime;
pub mod sweep;
pub mod train;
pub mod verify;

pub use error::{Error, Result};
