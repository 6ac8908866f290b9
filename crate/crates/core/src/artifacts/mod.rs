//! Experiment configs (JSON), binary checkpoints, routing dumps and result
//! tables.

mod checkpoint;
mod config;
mod reports;

pub use checkpoint::{
    decode, encode, load_checkpoint, load_model, restore_params, save_checkpoint, save_model, FORMAT_VERSION, MAGIC,
};
pub use config::{load_config, load_config_file, ExperimentConfig};
pub use reports::{
    results_csv, routing_csv, routing_summary_json, write_results_table, write_routing_dump, ResultRow,
    ROUTING_CSV, ROUTING_SUMMARY_JSON,
};
