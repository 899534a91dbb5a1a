//! Pipeline runner for the `obsr` binary: config parsing, stage orchestration,
//! artifact emission and the invariant self-test.

pub mod artifacts;
pub mod bundled;
pub mod config;
pub mod error;
pub mod oracles;
pub mod pipeline;
pub mod selftest;

pub use config::{PipelineConfig, Task};
pub use error::{CliError, Stage};
pub use pipeline::Pipeline;
