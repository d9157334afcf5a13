//! Central-difference gradient checker.

use crate::error::{HwmError, Result};
use crate::numcore::params::{ParamId, ParamStore};
use crate::numcore::tape::{Tape, Var};

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub eps: f64,
    pub tol: f64,
    /// Upper bound on checked entries per storage slot; entries are taken at an even stride.
    pub max_entries_per_param: Option<usize>,
    /// Multiplier applied to analytic gradients. Anything but 1.0 is a deliberate mutation.
    pub analytic_scale: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self { eps: 1e-5, tol: 1e-4, max_entries_per_param: None, analytic_scale: 1.0 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckEntry {
    pub path: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub checked: usize,
    pub worst: Option<GradCheckEntry>,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.worst.as_ref().map_or(0.0, |w| w.rel_err)
    }
}

/// Compares tape gradients of `f` against central differences for every
/// (sampled) entry of every storage slot in `store`.
///
/// `f` records a scalar loss on the tape it is given and must be deterministic.
pub fn grad_check<F>(store: &ParamStore<f64>, f: F, opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&ParamStore<f64>, &mut Tape<f64>) -> Result<Var>,
{
    let mut tape = Tape::new();
    let loss = f(store, &mut tape)?;
    let grads = tape.backward(loss)?.into_params();
    let mut work = store.clone();
    let mut report = GradCheckReport { checked: 0, worst: None };
    for id in store.ids() {
        let n = store.get(id).numel();
        let stride = opts.max_entries_per_param.map_or(1, |m| n.div_ceil(m.max(1)).max(1));
        for index in (0..n).step_by(stride) {
            let numeric = central_difference(&mut work, id, index, opts.eps, &f)?;
            let analytic = grads.get(id).map_or(0.0, |g| g.data()[index]) * opts.analytic_scale;
            let rel_err = (analytic - numeric).abs() / numeric.abs().max(1.0);
            report.checked += 1;
            if report.worst.as_ref().is_none_or(|w| rel_err > w.rel_err) {
                report.worst = Some(GradCheckEntry {
                    path: store.layout().spec(id).name.clone(),
                    index,
                    analytic,
                    numeric,
                    rel_err,
                });
            }
        }
    }
    if let Some(w) = &report.worst {
        if w.rel_err > opts.tol {
            return Err(HwmError::GradCheck {
                path: w.path.clone(),
                index: w.index,
                analytic: w.analytic,
                numeric: w.numeric,
                rel_err: w.rel_err,
                tol: opts.tol,
            });
        }
    }
    Ok(report)
}

fn central_difference<F>(work: &mut ParamStore<f64>, id: ParamId, index: usize, eps: f64, f: &F) -> Result<f64>
where
    F: Fn(&ParamStore<f64>, &mut Tape<f64>) -> Result<Var>,
{
    let orig = work.get(id).data()[index];
    let eval = |x: f64, work: &mut ParamStore<f64>| -> Result<f64> {
        work.get_mut(id).data_mut()[index] = x;
        let mut tape = Tape::new();
        let loss = f(work, &mut tape)?;
        Ok(tape.value(loss).item())
    };
    let plus = eval(orig + eps, work)?;
    let minus = eval(orig - eps, work)?;
    work.get_mut(id).data_mut()[index] = orig;
    Ok((plus - minus) / (2.0 * eps))
}
