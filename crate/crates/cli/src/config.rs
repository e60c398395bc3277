//! Training configuration files. Keys left out of a file take the preset
//! of the selected task.

use std::path::Path;

use anyhow::{bail, Context};
use serde::{Deserialize, Serialize};

use mmchat_core::generator::GeneratorConfig;
use mmchat_core::retriever::RetrieverConfig;
use mmchat_core::trainer::{Task, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub retriever: RetrieverConfig,
    pub generator: GeneratorConfig,
}

impl RunConfig {
    pub fn preset(task: Task) -> Self {
        RunConfig {
            train: TrainConfig::for_task(task),
            retriever: RetrieverConfig::default(),
            generator: GeneratorConfig::default(),
        }
    }

    /// The preset for `task` overlaid with the file at `path`, if any. A
    /// task given on the command line wins over the file's `train.task`.
    pub fn load(path: Option<&Path>, task: Option<Task>) -> anyhow::Result<Self> {
        let overlay = match path {
            Some(p) => Some(read_table(p)?),
            None => None,
        };
        let file_task = overlay
            .as_ref()
            .and_then(|t| t.get("train"))
            .and_then(|t| t.get("task"))
            .map(|v| v.clone().try_into::<Task>())
            .transpose()
            .context("train.task")?;
        let task = match (task, file_task) {
            (Some(t), _) | (None, Some(t)) => t,
            (None, None) => bail!("no task: pass --task or set train.task in the config"),
        };
        let mut base = toml::Value::try_from(Self::preset(task))?;
        if let Some(over) = overlay {
            merge(&mut base, over);
        }
        let mut cfg: RunConfig = base.try_into().context("invalid configuration")?;
        cfg.train.task = task;
        cfg.train.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("configuration serializes")
    }
}

fn read_table(path: &Path) -> anyhow::Result<toml::Value> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let value = if path.extension().is_some_and(|e| e == "json") {
        let json: serde_json::Value =
            serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        toml::Value::try_from(json)?
    } else {
        toml::Value::Table(toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?)
    };
    Ok(value)
}

fn merge(base: &mut toml::Value, over: toml::Value) {
    match (base, over) {
        (toml::Value::Table(b), toml::Value::Table(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}
