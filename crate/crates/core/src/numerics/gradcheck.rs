use crate::error::{Error, Result};

use super::graph::{Graph, Var};
use super::params::{ParamId, ParamStore};

/// Result of comparing analytic gradients with central differences.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub entries_checked: usize,
    /// Parameter name and flat index of the worst entry.
    pub worst: Option<(String, usize)>,
}

/// Denominator floor for entries whose true gradient is (near) zero.
const REL_FLOOR: f64 = 1e-6;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Compare the gradient of the scalar built by `loss_fn` against central
/// differences with step `eps`, over the trainable parameters in `subset`.
/// At most `max_entries` evenly spaced entries are probed per parameter.
pub fn finite_diff_check<F>(
    store: &mut ParamStore<f64>,
    subset: &[ParamId],
    eps: f64,
    max_entries: usize,
    loss_fn: F,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &ParamStore<f64>) -> Result<Var>,
{
    let mut g = Graph::new();
    let loss = loss_fn(&mut g, store)?;
    if g.value(loss).numel() != 1 {
        return Err(Error::NonScalarLoss(g.value(loss).shape().to_vec()));
    }
    let grads = g.backward(loss)?;
    let eval = |store: &ParamStore<f64>| -> Result<f64> {
        let mut g = Graph::new();
        let l = loss_fn(&mut g, store)?;
        Ok(g.value(l).item())
    };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        entries_checked: 0,
        worst: None,
    };
    for &id in subset {
        if !store.get(id).trainable {
            continue;
        }
        let numel = store.get(id).value.numel();
        let stride = numel.div_ceil(max_entries.max(1)).max(1);
        for idx in (0..numel).step_by(stride) {
            let analytic = grads.get(id).map_or(0.0, |t| t.data()[idx]);
            let orig = store.get(id).value.data()[idx];
            store.get_mut(id).value.data_mut()[idx] = orig + eps;
            let plus = eval(store)?;
            store.get_mut(id).value.data_mut()[idx] = orig - eps;
            let minus = eval(store)?;
            store.get_mut(id).value.data_mut()[idx] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let err = relative_error(analytic, numeric);
            report.entries_checked += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(err);
                if err >= report.max_rel_error {
                    report.worst = Some((store.get(id).name.clone(), idx));
                }
            }
        }
    }
    Ok(report)
}
