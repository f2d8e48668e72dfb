//! Experiment runner: synthetic data, training, zero-shot evaluation, ablations, exports.

pub mod ablate;
pub mod classes;
pub mod config;
pub mod dataset;
pub mod model;
pub mod report;
pub mod train;

pub use ablate::{cross_product, loss_preset, module_preset, run_ablation_matrix, workers_from_env, AblationCell, AblationTable};
pub use config::{Architecture, ExperimentConfig, Splitting};
pub use dataset::{build_dataset, Dataset, Split};
pub use model::Model;
pub use train::{baseline_predictions, evaluate_zero_shot, train, train_model, MetricsRecord, TrainOutcome, ZeroShotResult};
