//! File formats and the `ccam` command line on top of `ccam-core`.

pub mod checkpoint;
pub mod cli;
pub mod error;
pub mod nbt;
pub mod pnm;
pub mod scene_io;

pub use error::{CliError, CliResult};
