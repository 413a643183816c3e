//! Central-difference verification of tape gradients.

use crate::autodiff::{Tape, Var};
use crate::error::{PhaError, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Parameter name and flat coordinate of the worst disagreement.
    pub worst: Option<(String, usize)>,
    pub coordinates: usize,
}

/// `|a − n| / max(|a|, |n|, 1e-12)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-12)
}

fn evaluate<F>(store: &ParamStore, loss_fn: &F) -> Result<f64>
where
    F: Fn(&ParamStore, &mut Tape) -> Result<Var>,
{
    let mut tape = Tape::new();
    let loss = loss_fn(store, &mut tape)?;
    Ok(tape.value(loss).item())
}

/// Gradients of `loss_fn` with respect to `ids`, from one backward pass.
pub fn analytic_gradients<F>(store: &ParamStore, ids: &[ParamId], loss_fn: &F) -> Result<Vec<Tensor>>
where
    F: Fn(&ParamStore, &mut Tape) -> Result<Var>,
{
    let mut tape = Tape::new();
    let loss = loss_fn(store, &mut tape)?;
    let grads = tape.backward(loss)?;
    let lookup: Vec<(ParamId, Var)> = tape.bound_params().collect();
    Ok(ids
        .iter()
        .map(|id| {
            lookup
                .iter()
                .find(|(pid, _)| pid == id)
                .and_then(|(_, v)| grads.get(*v).cloned())
                .unwrap_or_else(|| Tensor::zeros(store.value(*id).shape()))
        })
        .collect())
}

/// Central differences for every coordinate of `ids`.
pub fn numeric_gradients<F>(
    store: &mut ParamStore,
    ids: &[ParamId],
    eps: f64,
    loss_fn: &F,
) -> Result<Vec<Tensor>>
where
    F: Fn(&ParamStore, &mut Tape) -> Result<Var>,
{
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(PhaError::Contract(format!(
            "finite-difference eps {eps} outside [1e-7, 1e-3]"
        )));
    }
    let base = evaluate(store, loss_fn)?;
    let again = evaluate(store, loss_fn)?;
    if base.to_bits() != again.to_bits() {
        return Err(PhaError::Determinism(format!(
            "two evaluations at the same point gave {base} and {again}"
        )));
    }
    let mut out = Vec::with_capacity(ids.len());
    for &id in ids {
        let n = store.value(id).numel();
        let mut g = Tensor::zeros(store.value(id).shape());
        for i in 0..n {
            let orig = store.value(id).data()[i];
            store.value_mut(id).data_mut()[i] = orig + eps;
            let plus = evaluate(store, loss_fn);
            store.value_mut(id).data_mut()[i] = orig - eps;
            let minus = evaluate(store, loss_fn);
            store.value_mut(id).data_mut()[i] = orig;
            g.data_mut()[i] = (plus? - minus?) / (2.0 * eps);
        }
        out.push(g);
    }
    Ok(out)
}

pub fn compare_gradients(
    store: &ParamStore,
    ids: &[ParamId],
    analytic: &[Tensor],
    numeric: &[Tensor],
) -> GradCheckReport {
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        coordinates: 0,
    };
    for ((id, a), n) in ids.iter().zip(analytic).zip(numeric) {
        for (i, (&av, &nv)) in a.data().iter().zip(n.data()).enumerate() {
            report.coordinates += 1;
            let e = relative_error(av, nv);
            if report.worst.is_none() || e > report.max_rel_error {
                report.max_rel_error = e;
                report.worst = Some((store.get(*id).name.clone(), i));
            }
        }
    }
    report
}

/// Compare reverse-mode gradients against central differences for every
/// coordinate of `ids`. The loss function must bind parameters through
/// [`Tape::bind`] so perturbations are picked up.
pub fn finite_diff_check<F>(
    store: &mut ParamStore,
    ids: &[ParamId],
    eps: f64,
    loss_fn: F,
) -> Result<GradCheckReport>
where
    F: Fn(&ParamStore, &mut Tape) -> Result<Var>,
{
    let numeric = numeric_gradients(store, ids, eps, &loss_fn)?;
    let analytic = analytic_gradients(store, ids, &loss_fn)?;
    Ok(compare_gradients(store, ids, &analytic, &numeric))
}
