//! Configuration, checkpoint format and commands behind the `ptl` binary.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod error;

pub use checkpoint::Checkpoint;
pub use commands::{cmd_distill, cmd_eval, cmd_gradcheck, cmd_inspect_state, cmd_train, Invocation};
pub use config::RunConfig;
pub use error::{CliError, Result};
