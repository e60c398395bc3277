use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRow {
    pub step: usize,
    pub train_loss: Option<f64>,
    pub eval_loss: Option<f64>,
    pub lr: f64,
    pub wall_ms: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunLog {
    pub rows: Vec<RunRow>,
}

impl RunLog {
    /// One JSON object per line; `wall_ms` is zeroed unless `with_wall`.
    pub fn to_jsonl(&self, with_wall: bool) -> Result<String> {
        let mut out = String::new();
        for r in &self.rows {
            let mut r = r.clone();
            if !with_wall {
                r.wall_ms = 0;
            }
            out.push_str(&serde_json::to_string(&r)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn parse_jsonl(text: &str) -> Result<Self> {
        let rows = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(serde_json::from_str)
            .collect::<std::result::Result<_, _>>()?;
        Ok(RunLog { rows })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_jsonl(true)?).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::parse_jsonl(&std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }

    pub fn eval_rows(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.rows.iter().filter_map(|r| r.eval_loss.map(|l| (r.step, l)))
    }
}

/// Step with the lowest validation loss; the earliest step wins ties.
pub fn select_best_checkpoint(log: &RunLog) -> Result<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (step, loss) in log.eval_rows() {
        if best.is_none_or(|(_, b)| loss < b) {
            best = Some((step, loss));
        }
    }
    best.map(|(s, _)| s)
        .ok_or_else(|| Error::invalid("run log has no evaluation rows"))
}
