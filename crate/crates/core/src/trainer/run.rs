use std::collections::VecDeque;
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::info;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numerics::{AdamW, Checkpoint, Gradients, LinearSchedule};

use super::config::TrainConfig;
use super::log::{RunLog, RunRow};
use super::tasks::{chunks_with_min, Trainable};

pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const LAST_CHECKPOINT: &str = "last.ckpt";
pub const RUN_LOG: &str = "run.jsonl";

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub log: RunLog,
    pub total_steps: usize,
    /// Step of the lowest validation loss (the final step without a
    /// validation set).
    pub best_step: usize,
    pub best: Checkpoint,
    /// Paths written when an output directory was given.
    pub best_path: Option<PathBuf>,
    pub last_path: Option<PathBuf>,
}

struct Window {
    cap: usize,
    items: VecDeque<(f64, usize)>,
    count: usize,
}

impl Window {
    fn push(&mut self, loss: f64, n: usize) {
        self.items.push_back((loss, n));
        self.count += n;
        while self.count - self.items.front().map_or(0, |f| f.1) >= self.cap && self.items.len() > 1 {
            let (_, k) = self.items.pop_front().unwrap();
            self.count -= k;
        }
    }

    fn mean(&self) -> Option<f64> {
        if self.count == 0 {
            return None;
        }
        Some(self.items.iter().map(|&(l, n)| l * n as f64).sum::<f64>() / self.count as f64)
    }
}

/// Run the configured number of epochs over `train`, validating on `eval`
/// every `eval_interval` optimizer steps and at the end. With `out`, the
/// best and last checkpoints and the run log are written there.
pub fn train<M: Trainable>(
    model: &mut M,
    train_set: &[M::Sample],
    eval_set: &[M::Sample],
    cfg: &TrainConfig,
    out: Option<&Path>,
) -> Result<TrainOutcome>
where
    M::Sample: Clone,
{
    cfg.validate()?;
    if let Some(dir) = out {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let min = model.min_batch();
    let effective: Vec<usize> = chunks_with_min(&(0..train_set.len()).collect::<Vec<_>>(), cfg.batch_size, min)
        .iter()
        .filter(|c| c.len() >= min)
        .map(|c| c.len())
        .collect();
    let steps_per_epoch = effective.len();
    let total = cfg.epochs * steps_per_epoch;
    let schedule = LinearSchedule {
        base_lr: cfg.optimizer.lr,
        total_steps: total,
        warmup_steps: cfg.warmup_steps,
    };
    let mut opt = AdamW::new(model.params(), cfg.optimizer);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut log = RunLog::default();
    let mut window = Window {
        cap: cfg.log_window,
        items: VecDeque::new(),
        count: 0,
    };
    let started = Instant::now();
    let mut best: Option<(usize, f64)> = None;
    let mut best_ckpt = model.checkpoint();
    let mut best_step = 0;
    let mut step = 0;
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let save = |ckpt: &Checkpoint, name: &str| -> Result<Option<PathBuf>> {
        match out {
            Some(dir) => {
                let p = dir.join(name);
                ckpt.save(&p)?;
                Ok(Some(p))
            }
            None => Ok(None),
        }
    };

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut start = 0;
        for &len in &effective {
            let idx = &order[start..start + len];
            start += len;
            let batch: Vec<M::Sample> = idx.iter().map(|&i| train_set[i].clone()).collect();
            let lr = schedule.lr(step);
            let loss = accumulate_and_step(model, &mut opt, &batch, cfg, lr, step + 1)?;
            step += 1;
            window.push(loss, len);
            let eval_now = step % cfg.eval_interval == 0 || step == total;
            if eval_now || step % cfg.log_interval == 0 {
                let eval_loss = if eval_now && !eval_set.is_empty() {
                    Some(model.eval_loss(eval_set, cfg.eval_batch)?)
                } else {
                    None
                };
                log.rows.push(RunRow {
                    step,
                    train_loss: window.mean(),
                    eval_loss,
                    lr,
                    wall_ms: started.elapsed().as_millis() as u64,
                });
                if eval_now {
                    let ckpt = model.checkpoint();
                    let improved = match (eval_loss, best) {
                        (Some(l), Some((_, b))) => l < b,
                        (Some(_), None) => true,
                        (None, _) => true,
                    };
                    if improved {
                        best = eval_loss.map(|l| (step, l));
                        best_step = step;
                        save(&ckpt, BEST_CHECKPOINT)?;
                        best_ckpt = ckpt.clone();
                    }
                    save(&ckpt, LAST_CHECKPOINT)?;
                    let fmt = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.4}"));
                    info!(
                        "epoch {epoch} step {step}/{total} train {} eval {}",
                        fmt(window.mean()),
                        fmt(eval_loss)
                    );
                }
            }
        }
    }
    if total == 0 {
        save(&best_ckpt, BEST_CHECKPOINT)?;
        save(&best_ckpt, LAST_CHECKPOINT)?;
    }
    if let Some(dir) = out {
        log.write(&dir.join(RUN_LOG))?;
    }
    Ok(TrainOutcome {
        log,
        total_steps: total,
        best_step,
        best: best_ckpt,
        best_path: out.map(|d| d.join(BEST_CHECKPOINT)),
        last_path: out.map(|d| d.join(LAST_CHECKPOINT)),
    })
}

fn accumulate_and_step<M: Trainable>(
    model: &mut M,
    opt: &mut AdamW,
    batch: &[M::Sample],
    cfg: &TrainConfig,
    lr: f64,
    step: usize,
) -> Result<f64> {
    let ids = |model: &M| batch.iter().map(|s| model.sample_id(s)).collect::<Vec<_>>();
    let micro = chunks_with_min(batch, cfg.per_device_batch, model.min_batch());
    let mut grads = Gradients::empty(model.params().len());
    let mut loss = 0.0;
    for m in &micro {
        let (l, g) = match model.micro_batch(m, batch, micro.len()) {
            Ok(r) => r,
            Err(Error::NonFinite { .. }) => {
                return Err(Error::NonFiniteLoss {
                    step,
                    batch_ids: ids(model),
                })
            }
            Err(e) => return Err(e),
        };
        loss += l;
        grads.accumulate(g);
    }
    if !loss.is_finite() {
        return Err(Error::NonFiniteLoss {
            step,
            batch_ids: ids(model),
        });
    }
    opt.step(model.params_mut(), &grads, lr)?;
    model.after_step();
    Ok(loss)
}
