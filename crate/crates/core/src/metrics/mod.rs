//! Retrieval and generation metrics plus their report files.

use std::collections::HashMap;
use std::hash::Hash;
use std::path::Path;

use log::debug;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub fn recall_at_k(rank: usize, k: usize) -> Result<f64> {
    if k < 1 {
        return Err(Error::invalid("K must be at least 1"));
    }
    if rank < 1 {
        return Err(Error::invalid("ranks are 1-based"));
    }
    Ok(if rank <= k { 1.0 } else { 0.0 })
}

pub fn reciprocal_rank(rank: usize) -> Result<f64> {
    if rank < 1 {
        return Err(Error::invalid("ranks are 1-based"));
    }
    Ok(1.0 / rank as f64)
}

pub fn mean_recall_at_k(ranks: &[usize], k: usize) -> Result<f64> {
    mean(ranks.iter().map(|&r| recall_at_k(r, k)))
}

pub fn mrr(ranks: &[usize]) -> Result<f64> {
    mean(ranks.iter().map(|&r| reciprocal_rank(r)))
}

fn mean(xs: impl Iterator<Item = Result<f64>>) -> Result<f64> {
    let (mut sum, mut n) = (0.0, 0usize);
    for x in xs {
        sum += x?;
        n += 1;
    }
    if n == 0 {
        return Err(Error::invalid("mean of an empty set"));
    }
    Ok(sum / n as f64)
}

/// `exp` of the token-weighted mean of per-token losses.
pub fn perplexity(token_losses: &[f64]) -> Result<f64> {
    if token_losses.is_empty() {
        return Err(Error::invalid("perplexity needs at least one scored token"));
    }
    Ok(perplexity_from_sum(token_losses.iter().sum(), token_losses.len()))
}

pub fn perplexity_from_sum(loss_sum: f64, tokens: usize) -> f64 {
    (loss_sum / tokens as f64).exp()
}

fn ngram_counts<T: Hash + Eq>(tokens: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut m = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

/// Sentence-level cumulative BLEU-n: geometric mean of clipped n-gram
/// precisions for orders 1..=n times the brevity penalty. Any zero
/// precision gives 0.
pub fn bleu_n<T: Hash + Eq>(candidate: &[T], reference: &[T], n: usize) -> f64 {
    if candidate.is_empty() {
        debug!("BLEU of an empty candidate");
        return 0.0;
    }
    let mut log_sum = 0.0;
    for k in 1..=n {
        let total = candidate.len().saturating_sub(k - 1);
        if total == 0 {
            return 0.0;
        }
        let refc = ngram_counts(reference, k);
        let clipped: usize = ngram_counts(candidate, k)
            .iter()
            .map(|(g, &c)| c.min(refc.get(g).copied().unwrap_or(0)))
            .sum();
        if clipped == 0 {
            return 0.0;
        }
        log_sum += (clipped as f64 / total as f64).ln();
    }
    let bp = (1.0 - reference.len() as f64 / candidate.len() as f64).exp().min(1.0);
    bp * (log_sum / n as f64).exp()
}

/// Unique n-grams over total n-grams in one response; 0 when the response
/// is shorter than n.
pub fn distinct_n<T: Hash + Eq>(tokens: &[T], n: usize) -> f64 {
    if n == 0 || tokens.len() < n {
        debug!("distinct-{n} of a response with {} tokens", tokens.len());
        return 0.0;
    }
    let total = tokens.len() - n + 1;
    ngram_counts(tokens, n).len() as f64 / total as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrievalReport {
    /// `(K, recall)` in ascending K.
    pub recall: Vec<(usize, f64)>,
    pub mrr: f64,
    pub candidates: usize,
    pub samples: usize,
    pub config_fingerprint: String,
}

impl RetrievalReport {
    pub fn from_ranks(
        ranks: &[usize],
        ks: &[usize],
        candidates: usize,
        config_fingerprint: impl Into<String>,
    ) -> Result<Self> {
        let mut ks = ks.to_vec();
        ks.sort_unstable();
        ks.dedup();
        Ok(RetrievalReport {
            recall: ks
                .iter()
                .map(|&k| Ok((k, mean_recall_at_k(ranks, k)?)))
                .collect::<Result<_>>()?,
            mrr: mrr(ranks)?,
            candidates,
            samples: ranks.len(),
            config_fingerprint: config_fingerprint.into(),
        })
    }

    pub fn recall_at(&self, k: usize) -> Option<f64> {
        self.recall.iter().find(|(kk, _)| *kk == k).map(|(_, r)| *r)
    }

    pub fn csv_header(&self) -> String {
        let mut cols: Vec<String> = self.recall.iter().map(|(k, _)| format!("recall@{k}")).collect();
        cols.extend(["mrr", "candidates", "samples"].map(String::from));
        cols.join(",")
    }

    pub fn csv_row(&self) -> String {
        let mut cols: Vec<String> = self.recall.iter().map(|(_, r)| format!("{r:.6}")).collect();
        cols.push(format!("{:.6}", self.mrr));
        cols.push(self.candidates.to_string());
        cols.push(self.samples.to_string());
        cols.join(",")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerationReport {
    pub ppl: f64,
    pub bleu1: f64,
    pub bleu2: f64,
    pub distinct1: f64,
    pub distinct2: f64,
    pub samples: usize,
    pub config_fingerprint: String,
}

impl GenerationReport {
    pub fn csv_header(&self) -> &'static str {
        "ppl,bleu1,bleu2,distinct1,distinct2,samples"
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{:.6},{:.6},{:.6},{:.6},{:.6},{}",
            self.ppl, self.bleu1, self.bleu2, self.distinct1, self.distinct2, self.samples
        )
    }
}

/// Write `report.json` and `report.csv` into `dir`.
pub fn write_report<R: Serialize>(dir: &Path, report: &R, csv_header: &str, csv_row: &str) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let json = dir.join("report.json");
    std::fs::write(&json, serde_json::to_string_pretty(report)? + "\n").map_err(|e| Error::io(&json, e))?;
    let csv = dir.join("report.csv");
    std::fs::write(&csv, format!("{csv_header}\n{csv_row}\n")).map_err(|e| Error::io(&csv, e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(s: &str) -> Vec<&str> {
        s.split_whitespace().collect()
    }

    #[test]
    fn anchors() {
        assert_eq!(reciprocal_rank(4).unwrap(), 0.25);
        assert_eq!(mrr(&[1, 2]).unwrap(), 0.75);
        assert_eq!(recall_at_k(7, 5).unwrap(), 0.0);
        assert_eq!(recall_at_k(1, 1).unwrap(), 1.0);
        assert!(recall_at_k(1, 0).is_err());
        assert_eq!(distinct_n(&toks("a b a b"), 1), 0.5);
        assert_eq!(distinct_n(&toks("a a a"), 2), 0.5);
        assert_eq!(distinct_n(&toks("a"), 2), 0.0);
        assert!((perplexity(&[2f64.ln(), 8f64.ln()]).unwrap() - 4.0).abs() < 1e-12);
        assert!(perplexity(&[]).is_err());
        assert!((bleu_n(&toks("a a b"), &toks("a b c"), 1) - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(bleu_n(&toks("x y"), &toks("a b"), 1), 0.0);
        assert_eq!(bleu_n(&toks("a b c"), &toks("a b c"), 2), 1.0);
        assert_eq!(bleu_n::<&str>(&[], &toks("a"), 1), 0.0);
    }

    #[test]
    fn brevity_penalty_applies_to_short_candidates() {
        let b = bleu_n(&toks("a b"), &toks("a b c d"), 1);
        assert!((b - (1.0f64 - 2.0).exp()).abs() < 1e-12);
    }

    #[test]
    fn report_csv_shape() {
        let r = RetrievalReport::from_ranks(&[1, 3, 12], &[10, 1, 5], 20, "x").unwrap();
        assert_eq!(r.csv_header(), "recall@1,recall@5,recall@10,mrr,candidates,samples");
        assert_eq!(r.recall_at(5), Some(2.0 / 3.0));
        assert_eq!(r.csv_row().split(',').count(), 6);
    }
}
