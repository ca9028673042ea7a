//! Central finite-difference gradient checker.
//!
//! Used by the test-suites and by `raca selftest`. It only evaluates forward
//! values, so it is independent of the adjoint code it checks.

use super::{Graph, ParamStore, Tensor, Var};
use crate::error::Result;

/// Absolute floor of the relative-error denominator, so that entries whose
/// true gradient is ~0 are compared absolutely.
pub const REL_FLOOR: f64 = 1e-6;

#[derive(Clone, Copy, Debug, Default)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub entries: usize,
}

impl GradCheckReport {
    pub fn merge(self, other: GradCheckReport) -> GradCheckReport {
        GradCheckReport {
            max_rel_error: self.max_rel_error.max(other.max_rel_error),
            entries: self.entries + other.entries,
        }
    }
}

pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Compares reverse-mode gradients of the scalar built by `f` against
/// central differences with the given `step`, for every entry of every input.
pub fn check<F>(inputs: &[Tensor], step: f64, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = values.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        Ok(g.value(out).item())
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs
        .iter()
        .enumerate()
        .map(|(i, t)| g.param(&format!("in{i}"), t))
        .collect();
    let loss = f(&mut g, &vars)?;
    let grads = g.backward(loss)?;

    let mut report = GradCheckReport::default();
    let mut perturbed = inputs.to_vec();
    for (i, v) in vars.iter().enumerate() {
        let analytic = grads.wrt(&g, *v);
        for j in 0..inputs[i].len() {
            let orig = inputs[i].data()[j];
            perturbed[i].data_mut()[j] = orig + step;
            let plus = eval(&perturbed)?;
            perturbed[i].data_mut()[j] = orig - step;
            let minus = eval(&perturbed)?;
            perturbed[i].data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            let err = rel_error(analytic.data()[j], numeric);
            report.max_rel_error = report.max_rel_error.max(err);
            report.entries += 1;
        }
    }
    Ok(report)
}

/// Like [`check`], but differentiates a network that reads its weights
/// from a [`ParamStore`]. At most `per_tensor` entries of each tensor are
/// probed, spread evenly across the tensor.
pub fn check_store<F>(
    store: &ParamStore,
    step: f64,
    per_tensor: usize,
    f: F,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
{
    let eval = |s: &ParamStore| -> Result<f64> {
        let mut g = Graph::new();
        let out = f(&mut g, s)?;
        Ok(g.value(out).item())
    };
    let mut g = Graph::new();
    let loss = f(&mut g, store)?;
    let grads = g.backward(loss)?.by_name(&g);

    let mut report = GradCheckReport::default();
    let mut perturbed = store.clone();
    for (name, t) in store.iter() {
        let n = t.len();
        let stride = n.div_ceil(per_tensor.max(1)).max(1);
        for j in (0..n).step_by(stride) {
            let orig = t.data()[j];
            let at = |x: f64, s: &mut ParamStore| {
                s.get_mut(name).expect("present").data_mut()[j] = x;
            };
            at(orig + step, &mut perturbed);
            let plus = eval(&perturbed)?;
            at(orig - step, &mut perturbed);
            let minus = eval(&perturbed)?;
            at(orig, &mut perturbed);
            let numeric = (plus - minus) / (2.0 * step);
            let analytic = grads.get(name).map_or(0.0, |g| g.data()[j]);
            report.max_rel_error = report.max_rel_error.max(rel_error(analytic, numeric));
            report.entries += 1;
        }
    }
    Ok(report)
}
