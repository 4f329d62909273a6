//! Spatially structured recurrent modules.

mod error;
pub mod tensorcore;

pub use error::{Error, Result};
pub mod geometry;
mod init;
pub mod attention;
pub mod codec;
pub mod recurrent;
pub mod worldsim;
pub mod trainer;
pub mod gradsuite;
pub mod evalsuite;
