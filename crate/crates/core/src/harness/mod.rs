//! Task streams, persistence, run configuration and reporting.

pub mod config;
pub mod io;
pub mod metrics;
pub mod report;
pub mod stream;

pub use config::RunConfig;
pub use io::{decode_space, encode_space, load_space, load_task, save_space, save_task};
pub use metrics::{average_accuracy, backward_transfer, compute_metrics, MetricsReport};
pub use stream::{generate_stream, StreamKind, TaskStreamSpec};
