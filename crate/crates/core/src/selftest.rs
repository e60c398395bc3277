//! Built-in verification: finite-difference gradient checks for every
//! layer and both training losses, and brute-force recounts of every
//! metric. The rendered report is deterministic.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::collate::{GeneratorBatch, ImageBatch, TokenBatch};
use crate::error::Result;
use crate::generator::{Decoder, GeneratorConfig, GeneratorMode};
use crate::metrics;
use crate::numerics::layers::{Block, BlockShape, FeedForward, LayerNorm, Linear, MultiHeadAttention};
use crate::numerics::{finite_diff_check, Graph, Mask, ParamId, ParamStore, Tensor, Var, IGNORE_INDEX};
use crate::retriever::model::{DualEncoder, RetrieverConfig};

pub const GRAD_TOL: f64 = 1e-3;
pub const GRAD_EPS: f64 = 1e-3;
pub const ORACLE_CASES: usize = 200;
/// Tolerance for metrics computed in floating point.
pub const ORACLE_TOL: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq)]
pub struct Check {
    pub name: String,
    /// Worst observed error (0 for exact matches).
    pub error: f64,
    pub tolerance: f64,
    pub cases: usize,
}

impl Check {
    pub fn passed(&self) -> bool {
        if self.tolerance == 0.0 {
            self.error == 0.0
        } else {
            self.error < self.tolerance
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct SelftestReport {
    pub checks: Vec<Check>,
}

impl SelftestReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(Check::passed)
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        for c in &self.checks {
            let _ = writeln!(
                s,
                "{} {:<36} error={:.3e} tol={:.0e} cases={}",
                if c.passed() { "PASS" } else { "FAIL" },
                c.name,
                c.error,
                c.tolerance,
                c.cases
            );
        }
        let _ = writeln!(
            s,
            "{}/{} checks passed",
            self.checks.iter().filter(|c| c.passed()).count(),
            self.checks.len()
        );
        s
    }
}

pub fn run() -> Result<SelftestReport> {
    let mut checks = gradient_checks()?;
    checks.extend(metric_oracles(ORACLE_CASES, 7));
    Ok(SelftestReport { checks })
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], scale: f32) -> Tensor<f32> {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.random_range(-scale..scale)).collect(),
    )
    .expect("shape")
}

/// Replace every parameter with uniform noise so gradients are far from
/// the degenerate near-zero regime of a fresh initialisation.
fn randomize(ps: &mut ParamStore, seed: u64, scale: f32) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ids: Vec<ParamId> = ps.ids().collect();
    for id in ids {
        let shape = ps.get(id).value.shape().to_vec();
        ps.get_mut(id).value = uniform(&mut rng, &shape, scale);
    }
}

fn project(g: &mut Graph<f64>, x: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = g.shape(x).to_vec();
    let w = g.constant(uniform(&mut rng, &shape, 1.0).cast());
    let y = g.mul(x, w)?;
    g.sum(y)
}

fn grad_check<F>(name: &str, ps: &ParamStore, f: F) -> Result<Check>
where
    F: Fn(&mut Graph<f64>, &ParamStore<f64>) -> Result<Var>,
{
    let mut ps64 = ps.cast::<f64>();
    let ids: Vec<ParamId> = ps64.ids().collect();
    let r = finite_diff_check(&mut ps64, &ids, GRAD_EPS, 6, |g, p| {
        let y = f(g, p)?;
        if g.value(y).numel() == 1 {
            Ok(y)
        } else {
            project(g, y, 17)
        }
    })?;
    Ok(Check {
        name: format!("gradient {name}"),
        error: r.max_rel_error,
        tolerance: GRAD_TOL,
        cases: r.entries_checked,
    })
}

fn input(ps: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, shape: &[usize]) -> ParamId {
    ps.add(name, uniform(rng, shape, 1.0), false)
}

pub fn gradient_checks() -> Result<Vec<Check>> {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut out = Vec::new();
    let (b, l, d) = (2, 3, 8);

    let mut ps = ParamStore::new();
    let x = input(&mut ps, &mut rng, "x", &[b, l, d]);
    let lin = Linear::new(&mut ps, &mut rng, "lin", d, 5, true);
    randomize(&mut ps, 1, 0.5);
    out.push(grad_check("linear", &ps, |g, p| {
        let x = g.param(p, x);
        lin.forward(g, p, x)
    })?);

    let mut ps = ParamStore::new();
    let x = input(&mut ps, &mut rng, "x", &[b, l, d]);
    let ln = LayerNorm::new(&mut ps, "ln", d);
    randomize(&mut ps, 2, 1.0);
    out.push(grad_check("layer_norm", &ps, |g, p| {
        let x = g.param(p, x);
        ln.forward(g, p, x)
    })?);

    let mut ps = ParamStore::new();
    let x = input(&mut ps, &mut rng, "x", &[b, l, d]);
    let ff = FeedForward::new(&mut ps, &mut rng, "ff", d, 16);
    randomize(&mut ps, 3, 0.5);
    out.push(grad_check("feedforward_gelu", &ps, |g, p| {
        let x = g.param(p, x);
        ff.forward(g, p, x)
    })?);

    let mut ps = ParamStore::new();
    let table = input(&mut ps, &mut rng, "table", &[7, d]);
    out.push(grad_check("embedding", &ps, |g, p| {
        let t = g.param(p, table);
        g.embedding(t, &[1, 4, 4, 0, 6, 2], &[b, l])
    })?);

    let mut ps = ParamStore::new();
    let x = input(&mut ps, &mut rng, "x", &[b, l, d]);
    let y = input(&mut ps, &mut rng, "y", &[b, 2, d]);
    out.push(grad_check("softmax_concat_mean_pool", &ps, |g, p| {
        let x = g.param(p, x);
        let y = g.param(p, y);
        let c = g.concat(&[x, y], 1)?;
        let s = g.softmax(c)?;
        g.mean_pool(
            s,
            Some(&[true, true, false, true, true, true, false, true, true, false]),
        )
    })?);

    let mut ps = ParamStore::new();
    let x = input(&mut ps, &mut rng, "x", &[b, l, d]);
    let mem = input(&mut ps, &mut rng, "mem", &[b, 4, 6]);
    let attn = MultiHeadAttention::new(&mut ps, &mut rng, "self", d, d, 2);
    let cross = MultiHeadAttention::new(&mut ps, &mut rng, "cross", d, 6, 2);
    randomize(&mut ps, 4, 0.5);
    let padded = Mask::keys(b, l, &[true, true, true, true, true, false]);
    let causal = Mask::causal(b, l, Some(&[true, true, true, true, true, false]));
    out.push(grad_check("self_attention", &ps, |g, p| {
        let x = g.param(p, x);
        attn.forward(g, p, x, x, Some(&padded))
    })?);
    out.push(grad_check("causal_attention", &ps, |g, p| {
        let x = g.param(p, x);
        attn.forward(g, p, x, x, Some(&causal))
    })?);
    out.push(grad_check("cross_attention", &ps, |g, p| {
        let x = g.param(p, x);
        let m = g.param(p, mem);
        cross.forward(g, p, x, m, None)
    })?);

    let mut ps = ParamStore::new();
    let x = input(&mut ps, &mut rng, "x", &[b, l, d]);
    let mem = input(&mut ps, &mut rng, "mem", &[b, 4, d]);
    let shape = BlockShape {
        d_model: d,
        heads: 2,
        d_ff: 16,
        d_memory: Some(d),
    };
    let blocks = [
        Block::new(&mut ps, &mut rng, "b0", shape),
        Block::new(&mut ps, &mut rng, "b1", shape),
    ];
    randomize(&mut ps, 5, 0.4);
    out.push(grad_check("two_block_stack", &ps, |g, p| {
        let mut h = g.param(p, x);
        let m = g.param(p, mem);
        for blk in &blocks {
            h = blk.forward(g, p, h, Some(&causal), Some(m))?;
        }
        Ok(h)
    })?);

    out.push(contrastive_check()?);
    out.push(generation_check(GeneratorMode::Unimodal)?);
    out.push(generation_check(GeneratorMode::Multimodal)?);
    Ok(out)
}

fn tiny_images(seed: u64, n: usize, side: usize) -> ImageBatch {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ImageBatch {
        pixels: (0..n * side * side * 3).map(|_| rng.random_range(-1.0..1.0)).collect(),
        batch: n,
        side,
    }
}

fn contrastive_check() -> Result<Check> {
    let cfg = RetrieverConfig {
        vocab_size: 12,
        image_side: 4,
        patch: 2,
        d_model: 8,
        blocks: 1,
        heads: 2,
        d_ff: 16,
        d_joint: 6,
        max_text_len: 8,
        seed: 3,
    };
    let (net, mut ps) = DualEncoder::new(cfg)?;
    randomize(&mut ps, 6, 0.4);
    ps.get_mut(net.log_scale).value = Tensor::full([1], 1.0);
    let images = tiny_images(8, 3, 4);
    let text = TokenBatch::pad(&[vec![7, 9, 10, 11], vec![7, 8], vec![7, 11, 6, 9, 1]]);
    grad_check("contrastive_loss", &ps, |g, p| net.loss(g, p, &images, &text))
}

fn generation_check(mode: GeneratorMode) -> Result<Check> {
    let cfg = GeneratorConfig {
        mode,
        vocab_size: 12,
        d_model: 8,
        blocks: 1,
        heads: 2,
        d_ff: 16,
        max_positions: 8,
        image_side: 4,
        patch: 2,
        vision_blocks: 1,
        seed: 4,
    };
    let (net, mut ps) = Decoder::new(cfg)?;
    randomize(&mut ps, 7, 0.4);
    let tokens = TokenBatch::pad(&[vec![2, 4, 9, 5, 10, 3], vec![2, 5, 11, 3]]);
    let i = IGNORE_INDEX;
    let mut labels = vec![i, i, i, i, 10, 3];
    labels.extend([i, i, 11, 3, i, i]);
    let batch = GeneratorBatch {
        dialogue_ids: vec!["a".into(), "b".into()],
        tokens,
        labels,
        images: (mode == GeneratorMode::Multimodal).then(|| tiny_images(9, 2, 4)),
    };
    let name = match mode {
        GeneratorMode::Unimodal => "generation_loss_unimodal",
        GeneratorMode::Multimodal => "generation_loss_multimodal",
    };
    grad_check(name, &ps, |g, p| net.loss(g, p, &batch))
}

// Brute-force recounts, deliberately written without hashing or windows.

fn oracle_count(seq: &[u8], gram: &[u8]) -> usize {
    let n = gram.len();
    let mut c = 0;
    let mut i = 0;
    while i + n <= seq.len() {
        if &seq[i..i + n] == gram {
            c += 1;
        }
        i += 1;
    }
    c
}

fn oracle_bleu(cand: &[u8], refr: &[u8], n: usize) -> f64 {
    if cand.is_empty() {
        return 0.0;
    }
    let mut prod = 1.0f64;
    for k in 1..=n {
        if cand.len() < k {
            return 0.0;
        }
        let mut matched = 0;
        let mut seen: Vec<&[u8]> = Vec::new();
        for i in 0..=cand.len() - k {
            let gram = &cand[i..i + k];
            if seen.contains(&gram) {
                continue;
            }
            seen.push(gram);
            matched += oracle_count(cand, gram).min(oracle_count(refr, gram));
        }
        let p = matched as f64 / (cand.len() - k + 1) as f64;
        if p == 0.0 {
            return 0.0;
        }
        prod *= p;
    }
    let bp = if cand.len() >= refr.len() {
        1.0
    } else {
        (1.0 - refr.len() as f64 / cand.len() as f64).exp()
    };
    bp * prod.powf(1.0 / n as f64)
}

fn oracle_distinct(seq: &[u8], n: usize) -> f64 {
    if seq.len() < n {
        return 0.0;
    }
    let mut uniq: Vec<&[u8]> = Vec::new();
    for i in 0..=seq.len() - n {
        if !uniq.contains(&&seq[i..i + n]) {
            uniq.push(&seq[i..i + n]);
        }
    }
    uniq.len() as f64 / (seq.len() - n + 1) as f64
}

fn random_seq(rng: &mut ChaCha8Rng, max_len: usize) -> Vec<u8> {
    let n = rng.random_range(0..=max_len);
    (0..n).map(|_| rng.random_range(0..5u8)).collect()
}

pub fn metric_oracles(cases: usize, seed: u64) -> Vec<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut recall_err, mut mrr_err, mut dist_err, mut bleu_err, mut ppl_err) =
        (0.0f64, 0.0f64, 0.0f64, 0.0f64, 0.0f64);
    for _ in 0..cases {
        let n = rng.random_range(1..=10);
        let ranks: Vec<usize> = (0..n).map(|_| rng.random_range(1..=20)).collect();
        for k in [1, 5, 10] {
            let hits = ranks.iter().filter(|&&r| r <= k).count();
            let oracle = hits as f64 / n as f64;
            recall_err = recall_err.max((metrics::mean_recall_at_k(&ranks, k).unwrap() - oracle).abs());
        }
        let mut inv = 0.0;
        for &r in &ranks {
            inv += 1.0 / r as f64;
        }
        mrr_err = mrr_err.max((metrics::mrr(&ranks).unwrap() - inv / n as f64).abs());

        let cand = random_seq(&mut rng, 8);
        let refr = random_seq(&mut rng, 8);
        for k in [1, 2] {
            dist_err = dist_err.max((metrics::distinct_n(&cand, k) - oracle_distinct(&cand, k)).abs());
            bleu_err = bleu_err.max((metrics::bleu_n(&cand, &refr, k) - oracle_bleu(&cand, &refr, k)).abs());
        }

        let t = rng.random_range(1..=12);
        let losses: Vec<f64> = (0..t).map(|_| rng.random_range(0.0..6.0)).collect();
        let mut log_prod = 0.0;
        for &x in &losses {
            log_prod += x;
        }
        let oracle = (log_prod / t as f64).exp();
        ppl_err = ppl_err.max((metrics::perplexity(&losses).unwrap() - oracle).abs() / oracle);
    }
    let mk = |name: &str, error: f64, tolerance: f64| Check {
        name: format!("oracle {name}"),
        error,
        tolerance,
        cases,
    };
    vec![
        mk("recall_at_k", recall_err, 0.0),
        mk("mrr", mrr_err, 0.0),
        mk("distinct_1_2", dist_err, 0.0),
        mk("bleu_1_2", bleu_err, ORACLE_TOL),
        mk("perplexity", ppl_err, ORACLE_TOL),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn oracles_agree() {
        for c in metric_oracles(50, 1) {
            assert!(c.passed(), "{c:?}");
        }
    }
}
