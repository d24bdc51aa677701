//! Optimization: RMSProp, k-means inducing-point initialization, the
//! ELBO / leave-one-out training loop, and evaluation metrics.

use std::time::Instant;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{epoch_permutation, Dataset, Targets};
use crate::error::{Error, Result};
use crate::likelihoods::Prediction;
use crate::math::{DenseMatrix, RandomStream};
use crate::model::{marginals_with, sample_mixture_marginal, ModelState, ParamGroup, ParamSet};
use crate::objectives::{elbo_estimate, loo_estimate, Batch, McConfig};

/// RMSProp with a squared-gradient accumulator per parameter. Updates
/// ascend the objective: `θ ← θ + α g / √(acc + ε)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub learning_rate: f64,
    pub decay: f64,
    pub epsilon: f64,
    pub steps: u64,
    /// Groups skipped because their gradient was not finite.
    pub skipped: u64,
    pub accumulators: ParamSet,
}

impl OptimizerState {
    pub fn new(learning_rate: f64) -> Self {
        OptimizerState {
            learning_rate,
            decay: 0.9,
            epsilon: 1e-8,
            steps: 0,
            skipped: 0,
            accumulators: ParamSet::new(),
        }
    }

    /// Updates `params` in place for every group present in `grads`.
    pub fn step(&mut self, params: &mut ParamSet, grads: &ParamSet) -> Result<()> {
        for (group, g) in grads {
            let p = params
                .get_mut(group)
                .ok_or_else(|| Error::invalid(format!("gradient for unknown parameter group {group}")))?;
            if p.len() != g.len() {
                return Err(Error::dims("gradient length", p.len(), g.len()));
            }
            if g.iter().any(|v| !v.is_finite()) {
                self.skipped += 1;
                log::warn!("skipping update of {group}: non-finite gradient");
                continue;
            }
            let acc = self.accumulators.entry(*group).or_insert_with(|| vec![0.0; g.len()]);
            if acc.len() != g.len() {
                return Err(Error::dims("optimizer accumulator", acc.len(), g.len()));
            }
            for ((pv, gv), av) in p.iter_mut().zip(g).zip(acc.iter_mut()) {
                *av = self.decay * *av + (1.0 - self.decay) * gv * gv;
                *pv += self.learning_rate * gv / (*av + self.epsilon).sqrt();
            }
        }
        self.steps += 1;
        Ok(())
    }

    /// Applies one step to the parameter groups of a model.
    pub fn step_model(&mut self, state: &mut ModelState, grads: &ParamSet) -> Result<()> {
        let mut params: ParamSet = grads.keys().map(|&g| (g, state.params(g))).collect();
        self.step(&mut params, grads)?;
        for (g, v) in params {
            state.set_params(g, &v)?;
        }
        Ok(())
    }
}

/// Which objectives the training loop optimizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    ElboOnly,
    Alternating,
}

/// Training hyperparameters. Missing fields deserialize to their defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSchedule {
    pub mode: TrainMode,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub num_samples: usize,
    pub epochs_per_phase: usize,
    pub max_outer_rounds: usize,
    /// Evaluate every this many epochs; 0 evaluates at phase ends only.
    pub eval_every: usize,
    /// Stop when the mean ELBO of a phase changes by less than this
    /// (relative) from the previous ELBO phase; 0 disables the check.
    pub convergence_tol: f64,
    pub elbo_groups: Vec<ParamGroup>,
    pub loo_groups: Vec<ParamGroup>,
    pub eval_samples: usize,
    pub seed: u64,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        TrainSchedule {
            mode: TrainMode::Alternating,
            learning_rate: 0.003,
            batch_size: 1000,
            num_samples: 100,
            epochs_per_phase: 100,
            max_outer_rounds: 1,
            eval_every: 0,
            convergence_tol: 1e-4,
            elbo_groups: ParamGroup::ALL.to_vec(),
            loo_groups: vec![ParamGroup::Kernel],
            eval_samples: 100,
            seed: 0,
        }
    }
}

impl TrainSchedule {
    pub fn validate(&self) -> Result<()> {
        if self.epochs_per_phase == 0 {
            return Err(Error::invalid("epochs_per_phase must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch size must be at least 1"));
        }
        if self.num_samples == 0 || self.eval_samples == 0 {
            return Err(Error::invalid("sample counts must be at least 1"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid("learning rate must be positive"));
        }
        if self
            .loo_groups
            .iter()
            .any(|g| matches!(g, ParamGroup::Posterior | ParamGroup::Likelihood))
        {
            return Err(Error::invalid("the leave-one-out phase may only train kernel and inducing groups"));
        }
        Ok(())
    }
}

/// Evaluation metrics; regression-only or classification-only entries are `None`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub epoch: u64,
    pub wall_time: f64,
    pub objective: f64,
    pub error_rate: Option<f64>,
    pub mean_nlp: f64,
    pub msse: Option<f64>,
}

impl Metrics {
    pub const LOG_HEADER: &'static str = "epoch\twall_time_s\tobjective\terror_rate\tmean_nlp\tmsse";

    /// One tab-separated metrics-log line; missing values are written as `nan`.
    pub fn log_line(&self) -> String {
        let opt = |v: Option<f64>| v.map_or_else(|| "nan".to_string(), |v| format!("{v}"));
        format!(
            "{}\t{:.3}\t{}\t{}\t{}\t{}",
            self.epoch,
            self.wall_time,
            self.objective,
            opt(self.error_rate),
            self.mean_nlp,
            opt(self.msse)
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PhaseKind {
    Elbo,
    Loo,
}

/// Summary of one completed phase.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseRecord {
    pub round: usize,
    pub kind: PhaseKind,
    pub first_epoch: u64,
    pub epochs: usize,
    pub mean_objective: f64,
    pub groups: Vec<ParamGroup>,
}

/// Resumable position and optimizer state of a training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainerState {
    pub round: usize,
    pub phase: PhaseKind,
    pub epoch_in_phase: usize,
    pub epoch: u64,
    pub step: u64,
    pub phase_objective_sum: f64,
    pub phase_steps: u64,
    /// Groups updated so far in the current phase.
    pub phase_groups: Vec<ParamGroup>,
    pub previous_elbo_mean: Option<f64>,
    pub converged: bool,
    pub elbo_optimizer: OptimizerState,
    pub loo_optimizer: OptimizerState,
    pub phases: Vec<PhaseRecord>,
}

impl TrainerState {
    pub fn new(schedule: &TrainSchedule) -> Self {
        TrainerState {
            round: 0,
            phase: PhaseKind::Elbo,
            epoch_in_phase: 0,
            epoch: 0,
            step: 0,
            phase_objective_sum: 0.0,
            phase_steps: 0,
            phase_groups: Vec::new(),
            previous_elbo_mean: None,
            converged: false,
            elbo_optimizer: OptimizerState::new(schedule.learning_rate),
            loo_optimizer: OptimizerState::new(schedule.learning_rate),
            phases: Vec::new(),
        }
    }

    pub fn is_finished(&self, schedule: &TrainSchedule) -> bool {
        self.converged || self.round >= schedule.max_outer_rounds
    }
}

/// Callbacks from the training loop.
pub trait TrainObserver {
    /// Called after every epoch with the epoch number and mean objective.
    fn on_epoch(&mut self, _epoch: u64, _objective: f64) -> Result<()> {
        Ok(())
    }

    fn on_eval(&mut self, _metrics: &Metrics) -> Result<()> {
        Ok(())
    }

    fn on_phase_end(&mut self, _trainer: &TrainerState, _state: &ModelState) -> Result<()> {
        Ok(())
    }

    fn on_abort(&mut self, _trainer: &TrainerState, _state: &ModelState, _error: &Error) {}
}

/// Observer that ignores every event.
pub struct NoObserver;

impl TrainObserver for NoObserver {}

/// Stream ids of the training loop's random streams.
const PERMUTATION_STREAM: u64 = 1;
const STEP_STREAM: u64 = 2;
const EVAL_STREAM: u64 = 3;

/// Drives training from a [`TrainerState`], so a run can stop at any epoch
/// boundary and resume with identical results.
pub struct Trainer<'a> {
    pub schedule: &'a TrainSchedule,
    pub train: &'a Dataset,
    pub test: Option<&'a Dataset>,
    started: Instant,
}

impl<'a> Trainer<'a> {
    pub fn new(schedule: &'a TrainSchedule, train: &'a Dataset, test: Option<&'a Dataset>) -> Result<Self> {
        schedule.validate()?;
        if train.is_empty() {
            return Err(Error::Empty("training data"));
        }
        Ok(Trainer {
            schedule,
            train,
            test,
            started: Instant::now(),
        })
    }

    fn phase_groups(&self, kind: PhaseKind) -> &[ParamGroup] {
        match kind {
            PhaseKind::Elbo => &self.schedule.elbo_groups,
            PhaseKind::Loo => &self.schedule.loo_groups,
        }
    }

    /// Runs until the schedule finishes or `max_epochs` more epochs have run.
    pub fn run(
        &mut self,
        ts: &mut TrainerState,
        state: &mut ModelState,
        observer: &mut dyn TrainObserver,
        max_epochs: Option<u64>,
    ) -> Result<Vec<Metrics>> {
        let mut history = Vec::new();
        let mut ran = 0u64;
        while !ts.is_finished(self.schedule) && max_epochs.is_none_or(|m| ran < m) {
            let objective = match self.run_epoch(ts, state) {
                Ok(v) => v,
                Err(e) => {
                    observer.on_abort(ts, state, &e);
                    return Err(e);
                }
            };
            ran += 1;
            ts.epoch += 1;
            ts.epoch_in_phase += 1;
            observer.on_epoch(ts.epoch, objective)?;
            let phase_done = ts.epoch_in_phase >= self.schedule.epochs_per_phase;
            let cadence = self.schedule.eval_every > 0 && ts.epoch % self.schedule.eval_every as u64 == 0;
            if cadence || phase_done {
                let m = self.metrics(state, ts.epoch, objective)?;
                observer.on_eval(&m)?;
                history.push(m);
            }
            if phase_done {
                self.end_phase(ts);
                observer.on_phase_end(ts, state)?;
            }
        }
        Ok(history)
    }

    fn metrics(&self, state: &ModelState, epoch: u64, objective: f64) -> Result<Metrics> {
        let data = self.test.unwrap_or(self.train);
        let mc = McConfig::new(
            self.schedule.eval_samples,
            RandomStream::new(self.schedule.seed, EVAL_STREAM),
        );
        Ok(Metrics {
            epoch,
            objective,
            wall_time: self.started.elapsed().as_secs_f64(),
            ..evaluate(state, data, &mc)?
        })
    }

    fn end_phase(&self, ts: &mut TrainerState) {
        let mean = if ts.phase_steps > 0 {
            ts.phase_objective_sum / ts.phase_steps as f64
        } else {
            f64::NAN
        };
        ts.phases.push(PhaseRecord {
            round: ts.round,
            kind: ts.phase,
            first_epoch: ts.epoch - ts.epoch_in_phase as u64,
            epochs: ts.epoch_in_phase,
            mean_objective: mean,
            groups: std::mem::take(&mut ts.phase_groups),
        });
        if ts.phase == PhaseKind::Elbo {
            if let Some(prev) = ts.previous_elbo_mean {
                let tol = self.schedule.convergence_tol;
                if tol > 0.0 && ((mean - prev) / prev.abs().max(f64::MIN_POSITIVE)).abs() < tol {
                    ts.converged = true;
                }
            }
            ts.previous_elbo_mean = Some(mean);
        }
        ts.epoch_in_phase = 0;
        ts.phase_objective_sum = 0.0;
        ts.phase_steps = 0;
        match (self.schedule.mode, ts.phase) {
            (TrainMode::Alternating, PhaseKind::Elbo) if !ts.converged => ts.phase = PhaseKind::Loo,
            _ => {
                ts.phase = PhaseKind::Elbo;
                ts.round += 1;
            }
        }
    }

    /// One pass over the shuffled training set; returns the mean objective.
    fn run_epoch(&self, ts: &mut TrainerState, state: &mut ModelState) -> Result<f64> {
        let n = self.train.len();
        let b = self.schedule.batch_size.min(n);
        let perm = epoch_permutation(n, &RandomStream::new(self.schedule.seed, PERMUTATION_STREAM), ts.epoch);
        let groups = self.phase_groups(ts.phase).to_vec();
        let mut total = 0.0;
        let mut count = 0;
        for chunk in perm.chunks(b) {
            let batch = Batch::from_dataset(self.train, chunk)?;
            let mc = McConfig::new(
                self.schedule.num_samples,
                RandomStream::new(self.schedule.seed, STEP_STREAM).split(ts.step),
            );
            let est = match ts.phase {
                PhaseKind::Elbo => elbo_estimate(&batch, state, &mc, n, &groups)?,
                PhaseKind::Loo => loo_estimate(&batch, state, &mc, &groups)?,
            };
            let mut next = state.clone();
            let opt = match ts.phase {
                PhaseKind::Elbo => &mut ts.elbo_optimizer,
                PhaseKind::Loo => &mut ts.loo_optimizer,
            };
            opt.step_model(&mut next, &est.gradients)?;
            next.validate()?;
            *state = next;
            for g in est.gradients.keys() {
                if !ts.phase_groups.contains(g) {
                    ts.phase_groups.push(*g);
                    ts.phase_groups.sort();
                }
            }
            ts.step += 1;
            ts.phase_objective_sum += est.value;
            ts.phase_steps += 1;
            total += est.value;
            count += 1;
        }
        Ok(total / count as f64)
    }
}

/// Result of [`train`].
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub history: Vec<Metrics>,
    pub trainer: TrainerState,
}

/// Trains `state` on `data` according to `schedule`, evaluating on `test`
/// (or the training data) at the schedule's cadence.
pub fn train(
    data: &Dataset,
    state: &mut ModelState,
    schedule: &TrainSchedule,
    test: Option<&Dataset>,
) -> Result<TrainOutcome> {
    let mut trainer = Trainer::new(schedule, data, test)?;
    let mut ts = TrainerState::new(schedule);
    let history = trainer.run(&mut ts, state, &mut NoObserver, None)?;
    Ok(TrainOutcome { history, trainer: ts })
}

/// Points per marginal computation during evaluation.
const EVAL_CHUNK: usize = 512;

/// Error rate, mean negative log predictive density and MSSE on `data`,
/// from `S` Monte Carlo draws of the mixture marginal at each point.
///
/// MSSE divides each output's mean squared error by the population variance
/// of that output's targets, then averages over outputs.
pub fn evaluate(state: &ModelState, data: &Dataset, mc: &McConfig) -> Result<Metrics> {
    if data.is_empty() {
        return Err(Error::Empty("evaluation data"));
    }
    if mc.num_samples == 0 {
        return Err(Error::invalid("number of Monte Carlo samples must be at least 1"));
    }
    let preds = predict_points(state, &data.x, mc, Some(&data.targets))?;
    let n = data.len() as f64;
    let mean_nlp = -preds.iter().map(|p| p.1.unwrap_or(f64::NAN)).sum::<f64>() / n;
    let (error_rate, msse) = match &data.targets {
        Targets::Classes { labels, .. } => {
            let wrong = preds
                .iter()
                .zip(labels)
                .filter(|((p, _), &y)| matches!(p, Prediction::Classes { label, .. } if *label != y))
                .count();
            (Some(wrong as f64 / n), None)
        }
        Targets::Real(y) => {
            let p = y.cols();
            let mut total = 0.0;
            for out in 0..p {
                let col = y.column(out);
                let mu = col.iter().sum::<f64>() / n;
                let var = col.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n;
                let mse = preds
                    .iter()
                    .zip(&col)
                    .map(|((pred, _), yv)| match pred {
                        Prediction::Real { mean, .. } => (mean[out] - yv).powi(2),
                        _ => f64::NAN,
                    })
                    .sum::<f64>()
                    / n;
                total += mse / var;
            }
            (None, Some(total / p as f64))
        }
    };
    Ok(Metrics {
        epoch: 0,
        wall_time: 0.0,
        objective: f64::NAN,
        error_rate,
        mean_nlp,
        msse,
    })
}

/// Predictive summaries (and, when targets are given, log predictive
/// densities) for every row of `x`. Point `n` draws from `mc.stream.split(n)`.
pub fn predict_points(
    state: &ModelState,
    x: &DenseMatrix,
    mc: &McConfig,
    targets: Option<&Targets>,
) -> Result<Vec<(Prediction, Option<f64>)>> {
    use rayon::prelude::*;
    let priors = state.prior_factors()?;
    let weights = state.posterior.weights();
    let mut out = Vec::with_capacity(x.rows());
    let all: Vec<usize> = (0..x.rows()).collect();
    for chunk in all.chunks(EVAL_CHUNK) {
        let xb = x.select_rows(chunk);
        let marg = marginals_with(&xb, state, &priors)?;
        let part: Vec<(Prediction, Option<f64>)> = (0..chunk.len())
            .into_par_iter()
            .map(|local| -> Result<(Prediction, Option<f64>)> {
                let global = chunk[local];
                let samples =
                    sample_mixture_marginal(&marg, &weights, local, mc.num_samples, &mc.stream.split(global as u64));
                let pred = state.likelihood.predict(&samples)?;
                let lpd = match targets {
                    Some(t) => Some(state.likelihood.log_predictive_density(t.observation(global), &samples)?),
                    None => None,
                };
                Ok((pred, lpd))
            })
            .collect::<Result<_>>()?;
        out.extend(part);
    }
    Ok(out)
}

/// Within-cluster sum of squares of `x` around `centroids`.
pub fn kmeans_objective(x: &DenseMatrix, centroids: &DenseMatrix) -> f64 {
    assign_points(x, centroids).1.iter().sum()
}

fn sq_distances(x: &DenseMatrix, c: &DenseMatrix) -> DenseMatrix {
    let cross = x.matmul_nt(c);
    let xn = x.row_sq_norms();
    let cn = c.row_sq_norms();
    DenseMatrix::from_fn(x.rows(), c.rows(), |i, k| (xn[i] + cn[k] - 2.0 * cross[(i, k)]).max(0.0))
}

fn assign_points(x: &DenseMatrix, c: &DenseMatrix) -> (Vec<usize>, Vec<f64>) {
    let d = sq_distances(x, c);
    let mut assign = vec![0; x.rows()];
    let mut best = vec![0.0; x.rows()];
    for i in 0..x.rows() {
        let row = d.row(i);
        let mut k_best = 0;
        for k in 1..row.len() {
            if row[k] < row[k_best] {
                k_best = k;
            }
        }
        assign[i] = k_best;
        best[i] = row[k_best];
    }
    (assign, best)
}

/// Centroids from [`kmeans`] plus the within-cluster sum of squares after
/// seeding and after each Lloyd iteration.
#[derive(Debug, Clone)]
pub struct KMeans {
    pub centroids: DenseMatrix,
    pub objective_trace: Vec<f64>,
}

/// Inducing inputs from [`kmeans`].
pub fn kmeans_init(x: &DenseMatrix, m: usize, stream: &RandomStream) -> Result<DenseMatrix> {
    Ok(kmeans(x, m, stream)?.centroids)
}

/// Lloyd's algorithm with k-means++ seeding: at most 50 iterations, stopping
/// once no centroid moves more than 1e-6. Empty clusters are reseeded at
/// the point farthest from its centroid.
pub fn kmeans(x: &DenseMatrix, m: usize, stream: &RandomStream) -> Result<KMeans> {
    let n = x.rows();
    if m == 0 {
        return Err(Error::invalid("number of inducing points must be at least 1"));
    }
    if m > n {
        return Err(Error::invalid(format!("cannot pick {m} centroids from {n} points")));
    }
    let d = x.cols();
    let mut rng = stream.rng();
    let mut chosen = vec![rng.random_range(0..n)];
    let mut nearest: Vec<f64> = (0..n)
        .map(|i| {
            let c = x.row(chosen[0]);
            x.row(i).iter().zip(c).map(|(a, b)| (a - b) * (a - b)).sum()
        })
        .collect();
    while chosen.len() < m {
        let total: f64 = nearest.iter().sum();
        let next = if total > 0.0 {
            let target = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut pick = n - 1;
            for (i, v) in nearest.iter().enumerate() {
                acc += v;
                if acc > target && *v > 0.0 {
                    pick = i;
                    break;
                }
            }
            pick
        } else {
            // all remaining points coincide with chosen centroids
            (0..n).find(|i| !chosen.contains(i)).unwrap_or(0)
        };
        chosen.push(next);
        let c = x.row(next).to_vec();
        for (i, v) in nearest.iter_mut().enumerate() {
            let dist: f64 = x.row(i).iter().zip(&c).map(|(a, b)| (a - b) * (a - b)).sum();
            *v = v.min(dist);
        }
    }
    let mut centroids = x.select_rows(&chosen);
    let mut trace = Vec::new();
    for _ in 0..50 {
        let (assign, dist) = assign_points(x, &centroids);
        trace.push(dist.iter().sum());
        let mut sums = DenseMatrix::zeros(m, d);
        let mut counts = vec![0usize; m];
        for i in 0..n {
            counts[assign[i]] += 1;
            crate::math::axpy(1.0, x.row(i), sums.row_mut(assign[i]));
        }
        let mut taken = vec![false; n];
        let mut next = DenseMatrix::zeros(m, d);
        for k in 0..m {
            if counts[k] > 0 {
                for (v, s) in next.row_mut(k).iter_mut().zip(sums.row(k)) {
                    *v = s / counts[k] as f64;
                }
            } else {
                let far = (0..n)
                    .filter(|&i| !taken[i])
                    .max_by(|&a, &b| dist[a].total_cmp(&dist[b]).then(b.cmp(&a)))
                    .unwrap_or(0);
                taken[far] = true;
                next.row_mut(k).copy_from_slice(x.row(far));
            }
        }
        let shift = (0..m)
            .map(|k| {
                next.row(k)
                    .iter()
                    .zip(centroids.row(k))
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                    .sqrt()
            })
            .fold(0.0, f64::max);
        centroids = next;
        if shift < 1e-6 {
            break;
        }
    }
    trace.push(kmeans_objective(x, &centroids));
    Ok(KMeans {
        centroids,
        objective_trace: trace,
    })
}
