//! Configuration files, checkpoints, the synthetic dataset on disk and the
//! six commands of the `act` tool.
//!
//! A config is a sectioned `key = value` file. Anything left out takes its
//! default, unknown keys are rejected, and [`RunConfig::canonical`] renders
//! the fully resolved config that checkpoints store and digest.
//!
//! ```
//! use act_core::pipeline::RunConfig;
//! let cfg = RunConfig::parse("[run]\nseed = 3\n[model]\nwidth = 64\n").unwrap();
//! assert_eq!(cfg.seed, 3);
//! assert_eq!(RunConfig::parse(&cfg.canonical()).unwrap(), cfg);
//! ```

mod checkpoint;
mod commands;
mod config;
mod dataset;
mod probe;

pub use checkpoint::{load_params, Checkpoint, FORMAT_VERSION, MAGIC};
pub use commands::*;
pub use config::{
    augmentation_name, parse_augmentation, DataConfig, ProbeKind, ProbeProtocol, RawConfig, RunConfig,
};
pub use dataset::{
    generate, in_memory, load_dataset, load_split, manifest_path, split_sizes, write_dataset, Dataset, Generated,
    N_CLASSES, SPLITS,
};
pub use probe::{global_features, probe, ProbeReport, PROBE_CSV_HEADER};
