//! Data handling, training, and imputation on top of the model.

pub mod baselines;
pub mod data;
pub mod impute;
pub mod interp;
pub mod metrics;
pub mod optim;
pub mod train;

pub use baselines::{impute_baseline, node_means, Baseline};
pub use data::{Grid, Normalizer, Split};
pub use impute::{impute, ImputationResult};
pub use interp::linear_interpolate;
pub use metrics::{metrics, Metrics, MetricsRecord};
pub use optim::{Adam, AdamConfig, LrSchedule};
pub use train::{train, TrainConfig, TrainOutcome, Trainer, TrainingSet};
