//! Stage implementations behind the `fatq` binary.

pub mod artifacts;
pub mod error;
pub mod stages;

pub use artifacts::Work;
pub use error::{CliError, Result};
