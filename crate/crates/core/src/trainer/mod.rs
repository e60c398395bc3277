//! Training loop with gradient accumulation, validation, checkpointing and
//! run logs, plus offline evaluation.

pub mod config;
pub mod eval;
pub mod log;
pub mod run;
pub mod tasks;

pub use config::{Task, TrainConfig};
pub use eval::{evaluate_generation, evaluate_retrieval, gold_ranks};
pub use log::{select_best_checkpoint, RunLog, RunRow};
pub use run::{train, TrainOutcome, BEST_CHECKPOINT, LAST_CHECKPOINT, RUN_LOG};
pub use tasks::{generator_token_loss, GeneratorTask, RetrieverTask, Trainable};
