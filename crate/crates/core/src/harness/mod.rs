//! End-to-end benchmark: pretraining, statistics, adaptation, task
//! identification, incremental evaluation with baselines, streams and
//! report files.

mod config;
mod pipeline;
mod report;
mod stream;

pub use config::*;
pub use pipeline::*;
pub use report::*;
pub use stream::*;
