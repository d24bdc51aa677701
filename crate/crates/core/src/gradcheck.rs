//! Central finite-difference checks of objective gradients under common
//! random numbers.

use crate::error::{Error, Result};
use crate::model::{ModelState, ParamGroup};
use crate::objectives::{elbo_estimate, loo_estimate, Batch, McConfig, ObjectiveEstimate};

/// Which objective to differentiate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CheckedObjective {
    Elbo { n_total: usize },
    Loo,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradcheckOptions {
    pub step: f64,
    pub rel_tol: f64,
    pub abs_floor: f64,
    /// Perturbs the analytic gradient of this group; used to test that the
    /// checker notices broken gradients.
    pub corrupt: Option<ParamGroup>,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        GradcheckOptions {
            step: 1e-4,
            rel_tol: 1e-4,
            abs_floor: 1e-6,
            corrupt: None,
        }
    }
}

/// Worst disagreement within one parameter group.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupReport {
    pub group: ParamGroup,
    pub num_params: usize,
    /// `|analytic − numeric| / max(|analytic|, |numeric|, abs_floor / rel_tol)`.
    pub worst_error: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub passed: bool,
}

fn evaluate(
    objective: CheckedObjective,
    batch: &Batch<'_>,
    state: &ModelState,
    mc: &McConfig,
    groups: &[ParamGroup],
) -> Result<ObjectiveEstimate> {
    match objective {
        CheckedObjective::Elbo { n_total } => elbo_estimate(batch, state, mc, n_total, groups),
        CheckedObjective::Loo => loo_estimate(batch, state, mc, groups),
    }
}

/// Compares analytic gradients of every listed group with central
/// differences; the same random stream is used for every evaluation.
pub fn check_gradients(
    objective: CheckedObjective,
    batch: &Batch<'_>,
    state: &ModelState,
    mc: &McConfig,
    groups: &[ParamGroup],
    opts: &GradcheckOptions,
) -> Result<Vec<GroupReport>> {
    let est = evaluate(objective, batch, state, mc, groups)?;
    let scale_floor = opts.abs_floor / opts.rel_tol;
    let mut reports = Vec::with_capacity(groups.len());
    for &group in groups {
        let mut analytic = est
            .gradients
            .get(&group)
            .cloned()
            .ok_or_else(|| Error::invalid(format!("objective returned no gradient for group {group}")))?;
        if opts.corrupt == Some(group) {
            for (i, g) in analytic.iter_mut().enumerate() {
                *g = *g * 1.01 + 1e-3 * (1.0 + i as f64);
            }
        }
        let base = state.params(group);
        let mut report = GroupReport {
            group,
            num_params: base.len(),
            worst_error: 0.0,
            worst_index: 0,
            analytic: 0.0,
            numeric: 0.0,
            passed: true,
        };
        let mut probe = state.clone();
        for i in 0..base.len() {
            let mut shifted = base.clone();
            shifted[i] = base[i] + opts.step;
            probe.set_params(group, &shifted)?;
            let plus = evaluate(objective, batch, &probe, mc, &[])?.value;
            shifted[i] = base[i] - opts.step;
            probe.set_params(group, &shifted)?;
            let minus = evaluate(objective, batch, &probe, mc, &[])?.value;
            let numeric = (plus - minus) / (2.0 * opts.step);
            let a = analytic[i];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(scale_floor);
            if !(err <= report.worst_error) {
                report.worst_error = err;
                report.worst_index = i;
                report.analytic = a;
                report.numeric = numeric;
            }
        }
        report.passed = report.worst_error <= opts.rel_tol;
        reports.push(report);
    }
    Ok(reports)
}
