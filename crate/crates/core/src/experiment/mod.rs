pub mod config;
pub mod metrics;
pub mod sweep;

pub use config::{
    apply_override, load_task, parse_override, read_config_document, run, validate_config,
    validate_value, ClipConfig, RunConfig, TaskConfig, Validated,
};
pub use metrics::{metrics_csv_string, metrics_json, write_metrics_csv, write_run_outputs, METRICS_HEADER};
pub use sweep::{run_sweep, SweepSpec, SweepSummary};
