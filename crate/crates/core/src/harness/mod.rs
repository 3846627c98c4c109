//! Configuration, datasets, checkpoints, metrics and experiment drivers.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod experiment;
pub mod metrics;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use config::{DataSource, ExperimentConfig};
pub use data::{load_splits, Dataset, Normalization, RawSet, Splits};
pub use experiment::{ablation_grid, run_ablation, run_training, summarize, summary_table, AblationCell, RunOutcome, SummaryRow};
pub use metrics::{histograms, read_metrics, HistogramRow, MetricRecord};
