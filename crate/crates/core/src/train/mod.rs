//! Optimisation, the joint loss, checkpoints and the stage runner.

pub mod checkpoint;
pub mod config;
pub mod gradcheck;
pub mod loss;
pub mod metrics;
pub mod optim;
pub mod stage;

pub use checkpoint::{load_checkpoint, peek_header, save_checkpoint, Checkpoint, CheckpointHeader};
pub use config::{Corpus, CorpusConfig, TrainConfig};
pub use loss::{joint_step_loss, prepare_batch, JointLoss, PrepareOptions, PreparedBatch, TaskCounts};
pub use metrics::{read_metrics, write_metrics, LossValues, MetricRow};
pub use optim::{learning_rate, optimizer_step, AdamConfig, AdamState};
pub use stage::{fresh_checkpoint, recon_finetune, run_stage, stage_name, RunOptions, StageOutput};
