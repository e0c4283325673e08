//! Dataset ingestion, configuration, the end-to-end retargeting pipeline,
//! the toy training loop, and helpers shared with the `svr` binary.

pub mod config;
pub mod dataset;
pub mod imageio;
pub mod pipeline;
pub mod synthetic;
