//! Configuration, the training loop, checkpoints, evaluation and the
//! decoder sweep.

pub mod checkpoint;
pub mod config;
pub mod eval;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod preview;
pub mod schedule;
pub mod sweep;
pub mod train;

pub use checkpoint::{checkpoint_path, Checkpoint};
pub use config::{CropWarmup, EvalMode, TrainConfig};
pub use eval::{evaluate, linear_probe, EvalReport};
pub use metrics::{MetricsLog, Record};
pub use model::{CmaeModel, ForwardOut, LossSettings, StepInputs};
pub use optim::AdamW;
pub use preview::crop_preview;
pub use schedule::LrSchedule;
pub use sweep::{run_sweep, SweepRow};
pub use train::{open_split, PreparedBatch, Trainer};
