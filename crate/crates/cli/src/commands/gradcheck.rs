use std::fmt;
use std::path::PathBuf;

use autogp::gradcheck::{check_gradients, CheckedObjective, GradcheckOptions, GroupReport};
use autogp::math::{draw_standard_normals, RandomStream};
use autogp::model::{ModelState, ParamGroup};
use autogp::objectives::{Batch, McConfig};

use crate::config::RunConfig;
use crate::error::{CliError, CliResult, Stage};
use crate::setup::{build_model, load_data};

pub const MAX_POINTS: usize = 50;
pub const MAX_INDUCING: usize = 10;

const PERTURB_STREAM: u64 = 7;
const DRAW_STREAM: u64 = 8;

#[derive(Debug, Clone, Default)]
pub struct GradcheckArgs {
    pub config: PathBuf,
    pub seed: u64,
    /// Test hook: perturb the analytic gradient of this group.
    pub corrupt: Option<ParamGroup>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckEntry {
    pub objective: &'static str,
    pub report: GroupReport,
}

impl fmt::Display for GradcheckEntry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let r = &self.report;
        write!(
            f,
            "{}\t{}\t{}\t{:.3e}\t{}",
            self.objective,
            r.group,
            r.num_params,
            r.worst_error,
            if r.passed { "pass" } else { "FAIL" }
        )
    }
}

pub const REPORT_HEADER: &str = "objective\tgroup\tparams\tworst_rel_error\tstatus";

/// Moves every parameter off its initial value so that no gradient check
/// happens at a symmetric point.
fn perturb(state: &mut ModelState, seed: u64) -> CliResult<()> {
    let mut stream = RandomStream::new(seed, PERTURB_STREAM);
    for group in ParamGroup::ALL {
        let mut p = state.params(group);
        let (noise, next) = draw_standard_normals(&stream, p.len());
        stream = next;
        let scale = if group == ParamGroup::Kernel { 0.2 } else { 0.3 };
        for (v, e) in p.iter_mut().zip(noise) {
            *v += scale * e;
        }
        state.set_params(group, &p).stage("gradcheck")?;
    }
    Ok(())
}

/// Finite-difference checks of the ELBO and leave-one-out gradients for every
/// parameter group at a seeded random parameter setting. Fails with
/// [`CliError::CheckFailed`] naming the groups that disagree.
pub fn run_gradcheck(args: &GradcheckArgs) -> CliResult<Vec<GradcheckEntry>> {
    let config = RunConfig::load(&args.config)?;
    let data = load_data(&config.dataset)?;
    if data.train.len() > MAX_POINTS {
        return Err(CliError::config(
            "dataset",
            format!("gradient checks use at most {MAX_POINTS} points, got {}", data.train.len()),
        ));
    }
    if config.model.num_inducing > MAX_INDUCING {
        return Err(CliError::config(
            "model.num_inducing",
            format!("gradient checks use at most {MAX_INDUCING} inducing points"),
        ));
    }
    let mut state = build_model(&config.model, &data.train, args.seed)?;
    perturb(&mut state, args.seed)?;
    let batch = Batch::full(&data.train).stage("gradcheck")?;
    let mc = McConfig::new(config.training.num_samples, RandomStream::new(args.seed, DRAW_STREAM));
    let opts = GradcheckOptions {
        corrupt: args.corrupt,
        ..Default::default()
    };
    let mut elbo_groups = vec![ParamGroup::Kernel, ParamGroup::Posterior, ParamGroup::Inducing];
    if state.likelihood.num_params() > 0 {
        elbo_groups.push(ParamGroup::Likelihood);
    }
    let loo_groups = [ParamGroup::Kernel, ParamGroup::Inducing];
    let mut entries = Vec::new();
    let runs: [(&'static str, CheckedObjective, &[ParamGroup]); 2] = [
        ("elbo", CheckedObjective::Elbo { n_total: data.train.len() }, &elbo_groups),
        ("loo", CheckedObjective::Loo, &loo_groups),
    ];
    for (name, objective, groups) in runs {
        for report in check_gradients(objective, &batch, &state, &mc, groups, &opts).stage("gradcheck")? {
            entries.push(GradcheckEntry { objective: name, report });
        }
    }
    Ok(entries)
}

/// Turns failed entries into an error naming each failing group.
pub fn verdict(entries: &[GradcheckEntry]) -> CliResult<()> {
    let failed: Vec<String> = entries
        .iter()
        .filter(|e| !e.report.passed)
        .map(|e| format!("{}/{} ({:.3e})", e.objective, e.report.group, e.report.worst_error))
        .collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::CheckFailed {
            stage: "gradcheck".to_string(),
            message: format!("gradient mismatch in {}", failed.join(", ")),
        })
    }
}
