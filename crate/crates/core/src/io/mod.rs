//! Persistence and configuration.
//!
//! Every binary artifact is a single file: a 4-byte little-endian header
//! length, a canonical-JSON header (sorted keys, so hashes are stable),
//! then the raw payload. Occupancy payloads are bytes; SDF, value
//! function, and checkpoint payloads are little-endian f32 arrays.
//! Writes go through a temp file and rename, so partial files never
//! appear under the final name.

mod config;
mod container;
mod dataset;

pub use config::{
    parse_mode_name, ConfigError, EnvSection, McSection, MpcSection, ReachSection, RunConfig,
    SimSection,
};
pub use container::{
    canonical_json, load_checkpoint, load_occupancy, load_report, load_sdf, load_value_function,
    read_artifact, save_checkpoint, save_occupancy, save_report, save_sdf, save_value_function,
    write_artifact, write_episodes_csv, write_metrics_csv, write_summary_csv, write_trace_csv,
    ArtifactError, ArtifactMeta, FORMAT_VERSION,
};
pub use dataset::{
    generate_dataset, label_dataset, load_dataset, load_manifest, DatasetError, DatasetManifest,
    SampleEntry,
};

/// Version string stamped into every artifact header.
pub fn tool_version() -> &'static str {
    env!("CARGO_PKG_VERSION")
}
