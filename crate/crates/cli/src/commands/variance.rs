use std::io::Write;
use std::path::PathBuf;

use autogp::data::epoch_permutation;
use autogp::math::RandomStream;
use autogp::model::ParamGroup;
use autogp::objectives::{expected_log_likelihood, Batch, GradientEstimator, McConfig};
use log::info;
use rayon::prelude::*;

use super::config_or_echo;
use crate::checkpoint::Checkpoint;
use crate::error::{CliError, CliResult, Stage};
use crate::setup::{build_model, check_compatible, load_data};

const BATCH_STREAM: u64 = 9;
const REPARAM_STREAM: u64 = 100;
const SCORE_STREAM: u64 = 200;

#[derive(Debug, Clone, Default)]
pub struct VarianceArgs {
    pub config: Option<PathBuf>,
    /// Study the gradient at this checkpoint's parameters instead of at the
    /// initial model.
    pub checkpoint: Option<PathBuf>,
    pub seed: Option<u64>,
    /// Per-coordinate table.
    pub out: Option<PathBuf>,
}

/// Per-coordinate mean and variance of one estimator at one sample count.
#[derive(Debug, Clone, PartialEq)]
pub struct EstimatorMoments {
    pub means: Vec<f64>,
    pub variances: Vec<f64>,
}

impl EstimatorMoments {
    fn from_draws(draws: &[Vec<f64>]) -> Self {
        let r = draws.len() as f64;
        let dim = draws[0].len();
        let mut means = vec![0.0; dim];
        for g in draws {
            for (m, v) in means.iter_mut().zip(g) {
                *m += v;
            }
        }
        means.iter_mut().for_each(|m| *m /= r);
        let mut variances = vec![0.0; dim];
        for g in draws {
            for ((s, v), m) in variances.iter_mut().zip(g).zip(&means) {
                *s += (v - m) * (v - m);
            }
        }
        variances.iter_mut().for_each(|s| *s /= r - 1.0);
        EstimatorMoments { means, variances }
    }

    pub fn total_variance(&self) -> f64 {
        self.variances.iter().sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleCountResult {
    pub samples: usize,
    pub reparameterized: EstimatorMoments,
    pub score_function: EstimatorMoments,
    /// Smallest per-coordinate variance ratio score / reparameterized, over
    /// coordinates where both variances are positive.
    pub min_ratio: f64,
    pub median_ratio: f64,
    /// Fraction of coordinates whose two means differ by at most three
    /// combined standard errors.
    pub means_agree: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VarianceStudy {
    pub redraws: usize,
    pub results: Vec<SampleCountResult>,
    /// Least-squares slope of log total variance against log sample count.
    pub reparameterized_slope: f64,
    pub score_function_slope: f64,
}

pub const SUMMARY_HEADER: &str = "samples\treparameterized_variance\tscore_function_variance\tmin_ratio\tmedian_ratio\tmeans_agree";

impl VarianceStudy {
    /// Plot-ready summary: one row per sample count, then the fitted slopes
    /// as a comment line.
    pub fn summary(&self) -> String {
        let mut s = format!("{SUMMARY_HEADER}\n");
        for r in &self.results {
            s.push_str(&format!(
                "{}\t{:.6e}\t{:.6e}\t{:.4}\t{:.4}\t{:.4}\n",
                r.samples,
                r.reparameterized.total_variance(),
                r.score_function.total_variance(),
                r.min_ratio,
                r.median_ratio,
                r.means_agree
            ));
        }
        s.push_str(&format!(
            "# log-log slope: reparameterized {:.4} score_function {:.4}\n",
            self.reparameterized_slope, self.score_function_slope
        ));
        s
    }

    /// One row per sample count, estimator and coordinate.
    pub fn coordinate_table(&self) -> String {
        let mut s = String::from("samples\testimator\tcoordinate\tmean\tvariance\n");
        for r in &self.results {
            for (name, m) in [("reparameterized", &r.reparameterized), ("score_function", &r.score_function)] {
                for (i, (mean, var)) in m.means.iter().zip(&m.variances).enumerate() {
                    s.push_str(&format!("{}\t{name}\t{i}\t{mean:e}\t{var:e}\n", r.samples));
                }
            }
        }
        s
    }
}

fn log_log_slope(samples: &[usize], values: &[f64]) -> f64 {
    let xs: Vec<f64> = samples.iter().map(|&s| (s as f64).ln()).collect();
    let ys: Vec<f64> = values.iter().map(|v| v.ln()).collect();
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    if sxx > 0.0 {
        sxy / sxx
    } else {
        f64::NAN
    }
}

fn compare(samples: usize, rep: EstimatorMoments, score: EstimatorMoments, redraws: usize) -> SampleCountResult {
    let mut ratios: Vec<f64> = rep
        .variances
        .iter()
        .zip(&score.variances)
        .filter(|(r, s)| **r > 0.0 && **s > 0.0)
        .map(|(r, s)| s / r)
        .collect();
    ratios.sort_by(f64::total_cmp);
    let r = redraws as f64;
    let (agree, counted) = rep
        .means
        .iter()
        .zip(&score.means)
        .zip(rep.variances.iter().zip(&score.variances))
        .filter(|(_, (vr, vs))| **vr > 0.0 || **vs > 0.0)
        .fold((0usize, 0usize), |(a, c), ((mr, ms), (vr, vs))| {
            let se = ((vr + vs) / r).sqrt();
            (a + usize::from((mr - ms).abs() <= 3.0 * se), c + 1)
        });
    SampleCountResult {
        samples,
        min_ratio: ratios.first().copied().unwrap_or(f64::NAN),
        median_ratio: ratios.get(ratios.len() / 2).copied().unwrap_or(f64::NAN),
        means_agree: if counted > 0 { agree as f64 / counted as f64 } else { f64::NAN },
        reparameterized: rep,
        score_function: score,
    }
}

/// Redraws the reparameterized and score-function gradients of the expected
/// log-likelihood (posterior parameters, fixed batch) at every configured
/// sample count, with independent draws for the two estimators.
pub fn run_variance_study(args: &VarianceArgs) -> CliResult<VarianceStudy> {
    let ck = args.checkpoint.as_deref().map(Checkpoint::load).transpose()?;
    let config = config_or_echo(args.config.as_deref(), ck.as_ref())?;
    let seed = args.seed.unwrap_or(config.training.seed);
    let data = load_data(&config.dataset)?;
    let state = match ck {
        Some(ck) => ck.model,
        None => build_model(&config.model, &data.train, seed)?,
    };
    check_compatible(&state, &data.train)?;
    let study = &config.variance_study;
    let n = data.train.len();
    let b = study.batch_size.min(n);
    let mut indices = epoch_permutation(n, &RandomStream::new(seed, BATCH_STREAM), 0);
    indices.truncate(b);
    let batch = Batch::from_dataset(&data.train, &indices).stage("variance_study")?;

    let mut results = Vec::new();
    for (si, &s) in study.sample_counts.iter().enumerate() {
        let mut moments = Vec::with_capacity(2);
        for (estimator, stream_id) in [
            (GradientEstimator::Reparameterized, REPARAM_STREAM),
            (GradientEstimator::ScoreFunction, SCORE_STREAM),
        ] {
            let base = RandomStream::new(seed, stream_id + si as u64);
            let draws: Vec<Vec<f64>> = (0..study.redraws)
                .into_par_iter()
                .map(|r| {
                    let mc = McConfig::new(s, base.split(r as u64));
                    let est = expected_log_likelihood(&batch, &state, &mc, n, &[ParamGroup::Posterior], estimator)?;
                    Ok(est.gradients.get(&ParamGroup::Posterior).cloned().unwrap_or_default())
                })
                .collect::<autogp::Result<_>>()
                .stage("variance_study")?;
            moments.push(EstimatorMoments::from_draws(&draws));
        }
        let score = moments.pop().expect("two estimators");
        let rep = moments.pop().expect("two estimators");
        let result = compare(s, rep, score, study.redraws);
        info!(
            "S={s}: variance reparameterized {:.4e} score_function {:.4e}, min ratio {:.3}",
            result.reparameterized.total_variance(),
            result.score_function.total_variance(),
            result.min_ratio
        );
        results.push(result);
    }
    let counts: Vec<usize> = results.iter().map(|r| r.samples).collect();
    let rep_total: Vec<f64> = results.iter().map(|r| r.reparameterized.total_variance()).collect();
    let score_total: Vec<f64> = results.iter().map(|r| r.score_function.total_variance()).collect();
    let out = VarianceStudy {
        redraws: study.redraws,
        reparameterized_slope: log_log_slope(&counts, &rep_total),
        score_function_slope: log_log_slope(&counts, &score_total),
        results,
    };
    if let Some(path) = &args.out {
        let io = |e: std::io::Error| CliError::config("output", format!("{}: {e}", path.display()));
        let mut f = std::fs::File::create(path).map_err(io)?;
        f.write_all(out.coordinate_table().as_bytes()).map_err(io)?;
    }
    Ok(out)
}
