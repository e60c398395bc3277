use crate::error::{Error, Result};
use crate::numerics::{Graph, Real, Var};

/// Symmetric in-batch contrastive loss over a `[bs, bs]` logit matrix whose
/// diagonal holds the positive pairs: the mean of the row-wise and
/// column-wise cross-entropies.
pub fn contrastive_loss_from_logits<T: Real>(g: &mut Graph<T>, logits: Var) -> Result<Var> {
    let sh = g.shape(logits).to_vec();
    if sh.len() != 2 || sh[0] != sh[1] {
        return Err(Error::shape(
            "contrastive_loss",
            format!("logits {sh:?} are not square"),
        ));
    }
    let bs = sh[0];
    if bs < 2 {
        return Err(Error::invalid("contrastive loss needs a batch of at least 2"));
    }
    let targets: Vec<i64> = (0..bs as i64).collect();
    let row = g.cross_entropy(logits, &targets)?;
    let t = g.transpose(logits)?;
    let col = g.cross_entropy(t, &targets)?;
    let both = g.add(row, col)?;
    g.scale(both, T::from_f64_lossy(0.5))
}

/// Contrastive loss from `[bs, d]` unit-norm embeddings and a `[1]` logit
/// scale variable.
pub fn contrastive_loss<T: Real>(g: &mut Graph<T>, image_embs: Var, text_embs: Var, logit_scale: Var) -> Result<Var> {
    if g.shape(image_embs) != g.shape(text_embs) {
        return Err(Error::shape(
            "contrastive_loss",
            format!("{:?} vs {:?}", g.shape(image_embs), g.shape(text_embs)),
        ));
    }
    let sim = g.matmul(image_embs, text_embs, true)?;
    let logits = g.mul_scalar(sim, logit_scale)?;
    contrastive_loss_from_logits(g, logits)
}
