//! User-facing experiment surface: a TOML config describing a plant, a cost,
//! constraints and an ambiguity band (or a standalone semi-infinite SDP),
//! and a runner that solves it and serializes plot-ready artifacts.
//!
//! - [`config`]: the schema, parsing, validation and builders into the solver
//!   types.
//! - [`run`]: orchestration and the on-disk artifact formats.

pub mod config;
pub mod run;

pub use config::{load_config, parse_config, write_config, ConfigError, ExperimentConfig, Mode};
pub use run::{run, RunArtifacts, RunError, Summary};
