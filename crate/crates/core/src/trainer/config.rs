use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::AdamWConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Retriever,
    Generator,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub task: Task,
    pub epochs: usize,
    /// Effective batch size: `per_device_batch * accumulation`.
    pub batch_size: usize,
    pub per_device_batch: usize,
    pub accumulation: usize,
    pub eval_batch: usize,
    pub optimizer: AdamWConfig,
    pub warmup_steps: usize,
    /// Optimizer steps between validation passes and checkpoints.
    pub eval_interval: usize,
    /// Optimizer steps between train-loss rows.
    pub log_interval: usize,
    /// Number of most recent training samples averaged into `train_loss`.
    pub log_window: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::retriever()
    }
}

impl TrainConfig {
    pub fn retriever() -> Self {
        TrainConfig {
            task: Task::Retriever,
            epochs: 10,
            batch_size: 16,
            per_device_batch: 16,
            accumulation: 1,
            eval_batch: 16,
            optimizer: AdamWConfig::default(),
            warmup_steps: 0,
            eval_interval: 100,
            log_interval: 10,
            log_window: 100,
            seed: 0,
        }
    }

    pub fn generator() -> Self {
        TrainConfig {
            task: Task::Generator,
            epochs: 3,
            eval_batch: 4,
            eval_interval: 500,
            log_window: 500,
            ..Self::retriever()
        }
    }

    pub fn for_task(task: Task) -> Self {
        match task {
            Task::Retriever => Self::retriever(),
            Task::Generator => Self::generator(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.per_device_batch == 0 || self.accumulation == 0 || self.eval_batch == 0 {
            return Err(Error::invalid("batch sizes and accumulation steps must be positive"));
        }
        if self.batch_size != self.per_device_batch * self.accumulation {
            return Err(Error::invalid(format!(
                "batch_size {} != per_device_batch {} x accumulation {}",
                self.batch_size, self.per_device_batch, self.accumulation
            )));
        }
        if self.eval_interval == 0 || self.log_interval == 0 || self.log_window == 0 {
            return Err(Error::invalid("intervals and log window must be positive"));
        }
        Ok(())
    }
}
