use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::engine::ModelTag;
use crate::error::{ChatError, Result};
use crate::session::{session_files, SessionRecord};

/// Per-variant means. Turn metrics average over evaluated bot turns,
/// session metrics over closed sessions; `None` when nothing was rated.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub model_tag: ModelTag,
    pub sessions: usize,
    pub closed_sessions: usize,
    pub evaluated_turns: usize,
    pub fluency: Option<f64>,
    pub coherence: Option<f64>,
    pub image_groundedness: Option<f64>,
    pub engagingness: Option<f64>,
    pub humanness: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub rows: Vec<SummaryRow>,
}

#[derive(Default)]
struct Acc {
    sessions: usize,
    closed: usize,
    turns: usize,
    fluency: Vec<f64>,
    coherence: Vec<f64>,
    grounded: Vec<f64>,
    engaging: Vec<f64>,
    human: Vec<f64>,
}

fn mean(xs: &[f64]) -> Option<f64> {
    (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64)
}

impl Summary {
    pub fn from_records<'a>(records: impl IntoIterator<Item = &'a SessionRecord>) -> Self {
        let mut by_tag: BTreeMap<ModelTag, Acc> = BTreeMap::new();
        for rec in records {
            let acc = by_tag.entry(rec.model_tag).or_default();
            acc.sessions += 1;
            for s in rec.turns.iter().filter_map(|t| t.eval) {
                acc.turns += 1;
                acc.fluency.push(s.fluency as f64);
                acc.coherence.push(s.coherence as f64);
                if let Some(g) = s.image_groundedness {
                    acc.grounded.push(g as f64);
                }
            }
            if let Some(e) = rec.session_eval {
                acc.closed += 1;
                acc.engaging.push(e.engagingness as f64);
                acc.human.push(e.humanness as f64);
            }
        }
        let rows = by_tag
            .into_iter()
            .map(|(tag, a)| SummaryRow {
                model_tag: tag,
                sessions: a.sessions,
                closed_sessions: a.closed,
                evaluated_turns: a.turns,
                fluency: mean(&a.fluency),
                coherence: mean(&a.coherence),
                image_groundedness: mean(&a.grounded),
                engagingness: mean(&a.engaging),
                humanness: mean(&a.human),
            })
            .collect();
        Summary { rows }
    }

    pub fn row(&self, tag: ModelTag) -> Option<&SummaryRow> {
        self.rows.iter().find(|r| r.model_tag == tag)
    }

    /// Fixed-width text table.
    pub fn to_table(&self) -> String {
        let cell = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |x| format!("{x:.3}"));
        let mut out = format!(
            "{:<22} {:>8} {:>6} {:>6} {:>8} {:>9} {:>11} {:>12} {:>9}\n",
            "model", "sessions", "closed", "turns", "fluency", "coherence", "grounded", "engagingness", "humanness"
        );
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{:<22} {:>8} {:>6} {:>6} {:>8} {:>9} {:>11} {:>12} {:>9}",
                r.model_tag.as_str(),
                r.sessions,
                r.closed_sessions,
                r.evaluated_turns,
                cell(r.fluency),
                cell(r.coherence),
                cell(r.image_groundedness),
                cell(r.engagingness),
                cell(r.humanness)
            );
        }
        out
    }
}

/// Aggregate every session file in `dir`.
pub fn aggregate_eval(dir: &Path) -> Result<Summary> {
    let files = session_files(dir)?;
    if files.is_empty() {
        return Err(ChatError::NoResults(dir.to_path_buf()));
    }
    let records = files
        .iter()
        .map(|p| SessionRecord::load(p))
        .collect::<Result<Vec<_>>>()?;
    Ok(Summary::from_records(&records))
}
