//! Central finite-difference verification of tape gradients.

use std::collections::BTreeMap;

use super::matrix::DenseMatrix;
use super::params::ParamStore;
use super::tape::{GradTape, Var};
use crate::error::Result;
use crate::par::{self, Execution};

/// Below this denominator the absolute error is reported instead.
pub const REL_ERR_FLOOR: f64 = 1e-8;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs());
    let diff = (analytic - numeric).abs();
    if denom < REL_ERR_FLOOR {
        diff
    } else {
        diff / denom
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EntryError {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Entry with the largest error.
    pub worst: Option<EntryError>,
    /// Max error per parameter name.
    pub per_param: BTreeMap<String, f64>,
    /// Entries whose perturbed loss was non-finite.
    pub non_finite: Vec<(String, usize)>,
    pub entries_checked: usize,
}

impl GradCheckReport {
    /// Max error grouped by the parameter name's first path segment.
    pub fn per_module(&self) -> BTreeMap<String, f64> {
        let mut out: BTreeMap<String, f64> = BTreeMap::new();
        for (name, err) in &self.per_param {
            let module = name.split('.').next().unwrap_or(name).to_string();
            let slot = out.entry(module).or_insert(0.0);
            *slot = slot.max(*err);
        }
        out
    }

    pub fn passed(&self, tolerance: f64) -> bool {
        self.non_finite.is_empty() && self.max_rel_error < tolerance
    }
}

/// Loss value and tape gradient for every stored parameter.
pub fn analytic_gradients<F>(store: &ParamStore, loss_fn: &F) -> Result<(f64, Vec<DenseMatrix>)>
where
    F: Fn(&ParamStore, &mut GradTape) -> Result<Var>,
{
    let mut tape = GradTape::new();
    let loss = loss_fn(store, &mut tape)?;
    let grads = tape.backward(loss)?;
    Ok((tape.value(loss).item(), grads.for_store(store)))
}

fn eval_loss<F>(store: &ParamStore, loss_fn: &F) -> Result<f64>
where
    F: Fn(&ParamStore, &mut GradTape) -> Result<Var>,
{
    let mut tape = GradTape::new();
    let loss = loss_fn(store, &mut tape)?;
    Ok(tape.value(loss).item())
}

/// Compares `grads` against `(f(θ+h) − f(θ−h)) / 2h` for every entry.
pub fn compare_with_finite_differences<F>(
    store: &ParamStore,
    loss_fn: &F,
    grads: &[DenseMatrix],
    step: f64,
    exec: Execution,
) -> Result<GradCheckReport>
where
    F: Fn(&ParamStore, &mut GradTape) -> Result<Var> + Sync,
{
    let entries: Vec<(usize, usize)> = store
        .ids()
        .enumerate()
        .flat_map(|(p, id)| (0..store.get(id).data().len()).map(move |k| (p, k)))
        .collect();
    let ids: Vec<_> = store.ids().collect();

    let numeric = par::try_map_range(exec, entries.len(), |e| {
        let (p, k) = entries[e];
        let mut local = store.clone();
        let base = store.get(ids[p]).data()[k];
        local.get_mut(ids[p]).data_mut()[k] = base + step;
        let plus = eval_loss(&local, loss_fn)?;
        local.get_mut(ids[p]).data_mut()[k] = base - step;
        let minus = eval_loss(&local, loss_fn)?;
        Ok((plus, minus))
    })?;

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        per_param: BTreeMap::new(),
        non_finite: Vec::new(),
        entries_checked: entries.len(),
    };
    for ((p, k), (plus, minus)) in entries.into_iter().zip(numeric) {
        let name = store.name(ids[p]).to_string();
        if !plus.is_finite() || !minus.is_finite() {
            report.non_finite.push((name, k));
            continue;
        }
        let fd = (plus - minus) / (2.0 * step);
        let analytic = grads[p].data()[k];
        let err = relative_error(analytic, fd);
        let slot = report.per_param.entry(name.clone()).or_insert(0.0);
        *slot = slot.max(err);
        if err > report.max_rel_error || report.worst.is_none() {
            report.max_rel_error = report.max_rel_error.max(err);
            report.worst = Some(EntryError {
                param: name,
                index: k,
                analytic,
                numeric: fd,
                rel_error: err,
            });
        }
    }
    Ok(report)
}

/// Tape gradients versus central differences over every parameter entry.
pub fn grad_check<F>(store: &ParamStore, loss_fn: F, step: f64) -> Result<GradCheckReport>
where
    F: Fn(&ParamStore, &mut GradTape) -> Result<Var> + Sync,
{
    let (_, grads) = analytic_gradients(store, &loss_fn)?;
    compare_with_finite_differences(store, &loss_fn, &grads, step, Execution::Parallel)
}
