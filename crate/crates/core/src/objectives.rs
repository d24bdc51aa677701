//! Training objectives with hand-derived gradients: the mini-batch
//! reparameterized ELBO, the leave-one-out predictive objective, and a
//! score-function estimator of the expected log-likelihood gradient.
//!
//! Both objectives are maximized. Noise for datapoint `n` comes from the
//! child stream `mc.stream.split(n)` (global index), drawn in `(k, i, j)`
//! order, so results do not depend on batch composition or worker count.

use rayon::prelude::*;

use crate::data::{Dataset, Targets};
use crate::error::{Error, Result};
use crate::likelihoods::Observation;
use crate::math::{logsumexp_nonempty, DenseMatrix, RandomStream};
use crate::model::{
    backprop_marginals, kl_bound_with_grad, marginals_with, pick_component, point_noise, prior_adjoint_to_params,
    MarginalBatch, ModelState, ParamGroup, ParamSet, PriorAdjoint, PriorFactor,
};

/// Per-point `−log p` values above this are clamped before the log-sum-exp
/// of the leave-one-out estimator; clamped samples carry no gradient.
pub const LOO_CLAMP: f64 = 700.0;

/// Points per parallel work unit. Fixed so reductions have a fixed order.
const CHUNK: usize = 16;

/// Monte Carlo settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct McConfig {
    pub num_samples: usize,
    pub stream: RandomStream,
}

impl McConfig {
    pub fn new(num_samples: usize, stream: RandomStream) -> Self {
        McConfig { num_samples, stream }
    }
}

/// A mini-batch: selected inputs plus global indices into the targets.
#[derive(Debug, Clone)]
pub struct Batch<'a> {
    pub x: DenseMatrix,
    pub targets: &'a Targets,
    pub indices: Vec<usize>,
}

impl<'a> Batch<'a> {
    pub fn new(x: &DenseMatrix, targets: &'a Targets, indices: &[usize]) -> Result<Self> {
        if indices.is_empty() {
            return Err(Error::Empty("batch"));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= x.rows() || i >= targets.len()) {
            return Err(Error::invalid(format!("batch index {bad} out of range")));
        }
        Ok(Batch {
            x: x.select_rows(indices),
            targets,
            indices: indices.to_vec(),
        })
    }

    pub fn from_dataset(d: &'a Dataset, indices: &[usize]) -> Result<Self> {
        Batch::new(&d.x, &d.targets, indices)
    }

    pub fn full(d: &'a Dataset) -> Result<Self> {
        let all: Vec<usize> = (0..d.len()).collect();
        Batch::new(&d.x, &d.targets, &all)
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    fn observation(&self, b: usize) -> Observation<'a> {
        self.targets.observation(self.indices[b])
    }
}

/// Objective value, gradients for the requested groups, and diagnostics.
#[derive(Debug, Clone)]
pub struct ObjectiveEstimate {
    pub value: f64,
    pub gradients: ParamSet,
    pub mc_samples_used: usize,
    pub batch_indices: Vec<usize>,
    /// Unscaled per-point terms: the expected log-likelihood for the ELBO,
    /// the leave-one-out log predictive density for the LOO objective.
    pub point_values: Vec<f64>,
    /// Leave-one-out samples clamped at [`LOO_CLAMP`].
    pub clamped: usize,
}

/// How the expected log-likelihood gradient is estimated.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GradientEstimator {
    Reparameterized,
    ScoreFunction,
}

struct PointPass {
    point_values: Vec<f64>,
    dmean: Vec<f64>,
    dvar: Vec<f64>,
    /// `∂/∂π_k` of the summed (unscaled) term.
    dweights: Vec<f64>,
    dlik: Vec<f64>,
    clamped: usize,
}

struct ChunkResult {
    start: usize,
    values: Vec<f64>,
    dmean: Vec<f64>,
    dvar: Vec<f64>,
    dweights: Vec<f64>,
    dlik: Vec<f64>,
    clamped: usize,
}

fn check_inputs(batch: &Batch<'_>, state: &ModelState, mc: &McConfig) -> Result<()> {
    if batch.is_empty() {
        return Err(Error::Empty("batch"));
    }
    if mc.num_samples == 0 {
        return Err(Error::invalid("number of Monte Carlo samples must be at least 1"));
    }
    if batch.x.cols() != state.input_dim() {
        return Err(Error::dims("batch input dimension", state.input_dim(), batch.x.cols()));
    }
    for b in 0..batch.len() {
        state.likelihood.check_observation(batch.observation(b))?;
    }
    Ok(())
}

fn nonfinite_density(index: usize) -> Error {
    Error::NonFinite {
        context: "log density",
        index,
    }
}

/// Runs `point` over fixed-size chunks in parallel and gathers the results
/// in chunk order.
fn over_chunks<F>(b: usize, kq: usize, nw: usize, nl: usize, point: F) -> Result<PointPass>
where
    F: Fn(usize, &mut ChunkResult, usize) -> Result<()> + Sync,
{
    let starts: Vec<usize> = (0..b).step_by(CHUNK).collect();
    let chunks: Vec<ChunkResult> = starts
        .par_iter()
        .map(|&start| -> Result<ChunkResult> {
            let len = CHUNK.min(b - start);
            let mut c = ChunkResult {
                start,
                values: vec![0.0; len],
                dmean: vec![0.0; len * kq],
                dvar: vec![0.0; len * kq],
                dweights: vec![0.0; nw],
                dlik: vec![0.0; nl],
                clamped: 0,
            };
            for local in 0..len {
                point(start + local, &mut c, local)?;
            }
            Ok(c)
        })
        .collect::<Result<_>>()?;
    let mut pass = PointPass {
        point_values: vec![0.0; b],
        dmean: vec![0.0; b * kq],
        dvar: vec![0.0; b * kq],
        dweights: vec![0.0; nw],
        dlik: vec![0.0; nl],
        clamped: 0,
    };
    for c in chunks {
        let len = c.values.len();
        pass.point_values[c.start..c.start + len].copy_from_slice(&c.values);
        pass.dmean[c.start * kq..(c.start + len) * kq].copy_from_slice(&c.dmean);
        pass.dvar[c.start * kq..(c.start + len) * kq].copy_from_slice(&c.dvar);
        pass.dweights.iter_mut().zip(&c.dweights).for_each(|(a, v)| *a += v);
        pass.dlik.iter_mut().zip(&c.dlik).for_each(|(a, v)| *a += v);
        pass.clamped += c.clamped;
    }
    Ok(pass)
}

/// Reorders point-major `[n][k][j]` adjoints into the `[k][n][j]` marginal layout.
fn to_marginal_layout(point_major: &[f64], kc: usize, b: usize, q: usize) -> Vec<f64> {
    let mut out = vec![0.0; point_major.len()];
    for n in 0..b {
        for k in 0..kc {
            let src = (n * kc + k) * q;
            let dst = (k * b + n) * q;
            out[dst..dst + q].copy_from_slice(&point_major[src..src + q]);
        }
    }
    out
}

fn expected_loglik_pass(
    batch: &Batch<'_>,
    state: &ModelState,
    marg: &MarginalBatch,
    mc: &McConfig,
    estimator: GradientEstimator,
    want_lik: bool,
) -> Result<PointPass> {
    let (kc, q, s) = (state.num_components(), state.num_latent(), mc.num_samples);
    let weights = state.posterior.weights();
    let nl = if want_lik { state.likelihood.num_params() } else { 0 };
    let lik = &state.likelihood;
    let inv_s = 1.0 / s as f64;
    let pass = over_chunks(batch.len(), kc * q, kc, nl, |n, c, local| {
        let y = batch.observation(n);
        let global = batch.indices[n];
        let mut eps = vec![0.0; kc * s * q];
        point_noise(&mc.stream, global as u64, &mut eps);
        let mut f = vec![0.0; q];
        let mut df = vec![0.0; q];
        let mut dp = vec![0.0; nl];
        let mut total = 0.0;
        for k in 0..kc {
            let w = weights[k] * inv_s;
            let mu: Vec<f64> = (0..q).map(|j| marg.mean(k, n, j)).collect();
            let var: Vec<f64> = (0..q).map(|j| marg.variance(k, n, j)).collect();
            let sd: Vec<f64> = var.iter().map(|v| v.sqrt()).collect();
            let off = (local * kc + k) * q;
            for i in 0..s {
                let e = &eps[(k * s + i) * q..(k * s + i + 1) * q];
                for j in 0..q {
                    f[j] = mu[j] + sd[j] * e[j];
                }
                dp.iter_mut().for_each(|v| *v = 0.0);
                let lp = match estimator {
                    GradientEstimator::Reparameterized => {
                        lik.eval(y, &f, Some(&mut df), want_lik.then_some(&mut dp[..]))
                    }
                    GradientEstimator::ScoreFunction => lik.eval(y, &f, None, None),
                };
                if !lp.is_finite() {
                    return Err(nonfinite_density(global));
                }
                total += w * lp;
                c.dweights[k] += lp * inv_s;
                match estimator {
                    GradientEstimator::Reparameterized => {
                        for j in 0..q {
                            c.dmean[off + j] += w * df[j];
                            c.dvar[off + j] += w * df[j] * e[j] / (2.0 * sd[j]);
                        }
                        for (a, v) in c.dlik.iter_mut().zip(&dp) {
                            *a += w * v;
                        }
                    }
                    GradientEstimator::ScoreFunction => {
                        for j in 0..q {
                            c.dmean[off + j] += w * lp * e[j] / sd[j];
                            c.dvar[off + j] += w * lp * (e[j] * e[j] - 1.0) / (2.0 * var[j]);
                        }
                    }
                }
            }
        }
        c.values[local] = total;
        Ok(())
    })?;
    Ok(pass)
}

fn softmax_chain(weights: &[f64], dweights: &[f64]) -> Vec<f64> {
    let mean: f64 = weights.iter().zip(dweights).map(|(p, g)| p * g).sum();
    weights.iter().zip(dweights).map(|(p, g)| p * (g - mean)).collect()
}

struct GroupWants {
    kernel: bool,
    posterior: bool,
    inducing: bool,
    likelihood: bool,
}

impl GroupWants {
    fn from(groups: &[ParamGroup]) -> Self {
        GroupWants {
            kernel: groups.contains(&ParamGroup::Kernel),
            posterior: groups.contains(&ParamGroup::Posterior),
            inducing: groups.contains(&ParamGroup::Inducing),
            likelihood: groups.contains(&ParamGroup::Likelihood),
        }
    }

    fn prior(&self) -> bool {
        self.kernel || self.inducing
    }
}

#[allow(clippy::too_many_arguments)]
fn finish(
    state: &ModelState,
    priors: &[PriorFactor],
    x: &DenseMatrix,
    wants: &GroupWants,
    mut adjoints: Vec<PriorAdjoint>,
    kl_kzz: Option<Vec<DenseMatrix>>,
    posterior: Option<Vec<f64>>,
    likelihood: Option<Vec<f64>>,
) -> Result<ParamSet> {
    if let Some(kl_kzz) = kl_kzz {
        for (a, g) in adjoints.iter_mut().zip(&kl_kzz) {
            a.kzz.add_scaled(-1.0, g);
        }
    }
    let (kernel, inducing) = prior_adjoint_to_params(state, priors, Some(x), &adjoints, wants.kernel, wants.inducing)?;
    let mut out = ParamSet::new();
    if let Some(g) = kernel {
        out.insert(ParamGroup::Kernel, g);
    }
    if let Some(g) = posterior {
        out.insert(ParamGroup::Posterior, g);
    }
    if let Some(g) = inducing {
        out.insert(ParamGroup::Inducing, g);
    }
    if let Some(g) = likelihood {
        out.insert(ParamGroup::Likelihood, g);
    }
    Ok(out)
}

/// `(N_total / B) Σₙ (1/S) Σ_k π_k Σ_i log p(yₙ | fₙ⁽ᵏⁱ⁾)` with gradients
/// from the chosen estimator.
///
/// The score-function estimator only produces posterior gradients; other
/// requested groups are rejected.
pub fn expected_log_likelihood(
    batch: &Batch<'_>,
    state: &ModelState,
    mc: &McConfig,
    n_total: usize,
    groups: &[ParamGroup],
    estimator: GradientEstimator,
) -> Result<ObjectiveEstimate> {
    check_inputs(batch, state, mc)?;
    if n_total < batch.len() {
        return Err(Error::invalid(format!(
            "total size {n_total} smaller than batch size {}",
            batch.len()
        )));
    }
    let wants = GroupWants::from(groups);
    if estimator == GradientEstimator::ScoreFunction && (wants.prior() || wants.likelihood) {
        return Err(Error::invalid("the score-function estimator only covers posterior parameters"));
    }
    let priors = state.prior_factors()?;
    let marg = marginals_with(&batch.x, state, &priors)?;
    let (value, gradients, pass) = data_term(batch, state, &priors, &marg, mc, n_total, &wants, estimator)?;
    let gradients = finish(state, &priors, &batch.x, &wants, gradients.0, None, gradients.1, gradients.2)?;
    Ok(ObjectiveEstimate {
        value,
        gradients,
        mc_samples_used: mc.num_samples,
        batch_indices: batch.indices.clone(),
        point_values: pass.point_values,
        clamped: 0,
    })
}

type DataGradients = (Vec<PriorAdjoint>, Option<Vec<f64>>, Option<Vec<f64>>);

#[allow(clippy::too_many_arguments)]
fn data_term(
    batch: &Batch<'_>,
    state: &ModelState,
    priors: &[PriorFactor],
    marg: &MarginalBatch,
    mc: &McConfig,
    n_total: usize,
    wants: &GroupWants,
    estimator: GradientEstimator,
) -> Result<(f64, DataGradients, PointPass)> {
    let (kc, q, b) = (state.num_components(), state.num_latent(), batch.len());
    let mut pass = expected_loglik_pass(batch, state, marg, mc, estimator, wants.likelihood)?;
    let scale = n_total as f64 / b as f64;
    let value = scale * pass.point_values.iter().sum::<f64>();
    let mut dmean = to_marginal_layout(&pass.dmean, kc, b, q);
    let mut dvar = to_marginal_layout(&pass.dvar, kc, b, q);
    dmean.iter_mut().for_each(|v| *v *= scale);
    dvar.iter_mut().for_each(|v| *v *= scale);
    let (mut post, adjoints) = backprop_marginals(state, priors, marg, &dmean, &dvar, wants.posterior, wants.prior())?;
    if let Some(pg) = post.as_mut() {
        pass.dweights.iter_mut().for_each(|v| *v *= scale);
        let dl = softmax_chain(&state.posterior.weights(), &pass.dweights);
        pg[..kc].iter_mut().zip(&dl).for_each(|(a, v)| *a += v);
    }
    let lik = wants.likelihood.then(|| pass.dlik.iter().map(|v| v * scale).collect());
    Ok((value, (adjoints, post, lik), pass))
}

/// Mini-batch ELBO estimate `−KL + (N_total/B) Σₙ E_q[log p(yₙ | fₙ)]` with
/// reparameterized gradients for the requested parameter groups.
pub fn elbo_estimate(
    batch: &Batch<'_>,
    state: &ModelState,
    mc: &McConfig,
    n_total: usize,
    groups: &[ParamGroup],
) -> Result<ObjectiveEstimate> {
    check_inputs(batch, state, mc)?;
    if n_total < batch.len() {
        return Err(Error::invalid(format!(
            "total size {n_total} smaller than batch size {}",
            batch.len()
        )));
    }
    let wants = GroupWants::from(groups);
    let priors = state.prior_factors()?;
    let marg = marginals_with(&batch.x, state, &priors)?;
    let (data_value, (adjoints, post, lik), pass) = data_term(
        batch,
        state,
        &priors,
        &marg,
        mc,
        n_total,
        &wants,
        GradientEstimator::Reparameterized,
    )?;
    let (kl, kl_post, kl_kzz) = kl_bound_with_grad(state, &priors, wants.posterior, wants.prior())?;
    let post = match (post, kl_post) {
        (Some(mut p), Some(k)) => {
            p.iter_mut().zip(&k).for_each(|(a, v)| *a -= v);
            Some(p)
        }
        (p, _) => p,
    };
    let value = data_value - kl;
    if !value.is_finite() {
        return Err(Error::NonFinite {
            context: "objective value",
            index: 0,
        });
    }
    let gradients = finish(
        state,
        &priors,
        &batch.x,
        &wants,
        adjoints,
        wants.prior().then_some(kl_kzz),
        post,
        lik,
    )?;
    Ok(ObjectiveEstimate {
        value,
        gradients,
        mc_samples_used: mc.num_samples,
        batch_indices: batch.indices.clone(),
        point_values: pass.point_values,
        clamped: 0,
    })
}

/// Leave-one-out objective
/// `−(1/B) Σₙ [logsumexp_i(−log p(yₙ | fₙ⁽ⁱ⁾)) − log S]`, with `fₙ⁽ⁱ⁾`
/// drawn from the mixture marginal (component by weight, then Gaussian).
///
/// Gradients are available for kernel parameters and inducing inputs only;
/// the posterior and likelihood are held fixed.
pub fn loo_estimate(
    batch: &Batch<'_>,
    state: &ModelState,
    mc: &McConfig,
    groups: &[ParamGroup],
) -> Result<ObjectiveEstimate> {
    check_inputs(batch, state, mc)?;
    let wants = GroupWants::from(groups);
    if wants.posterior || wants.likelihood {
        return Err(Error::invalid(
            "the leave-one-out objective only trains kernel parameters and inducing inputs",
        ));
    }
    let priors = state.prior_factors()?;
    let marg = marginals_with(&batch.x, state, &priors)?;
    let (kc, q, s, b) = (state.num_components(), state.num_latent(), mc.num_samples, batch.len());
    let weights = state.posterior.weights();
    let lik = &state.likelihood;
    let need_grad = wants.prior();
    let ln_s = (s as f64).ln();
    let pass = over_chunks(b, kc * q, 0, 0, |n, c, local| {
        let y = batch.observation(n);
        let global = batch.indices[n];
        let mut rng = mc.stream.split(global as u64).rng();
        let mut comps = vec![0usize; s];
        let mut eps = vec![0.0; s * q];
        let mut dfs = vec![0.0; if need_grad { s * q } else { 0 }];
        let mut neg = vec![0.0; s];
        let mut f = vec![0.0; q];
        let mut clamped_flags = vec![false; s];
        for i in 0..s {
            let k = pick_component(&weights, &mut rng);
            comps[i] = k;
            let e = &mut eps[i * q..(i + 1) * q];
            crate::math::fill_standard_normals(&mut rng, e);
            for j in 0..q {
                f[j] = marg.mean(k, n, j) + marg.variance(k, n, j).sqrt() * e[j];
            }
            let lp = if need_grad {
                lik.eval(y, &f, Some(&mut dfs[i * q..(i + 1) * q]), None)
            } else {
                lik.eval(y, &f, None, None)
            };
            if lp.is_nan() {
                return Err(nonfinite_density(global));
            }
            let mut v = -lp;
            if v > LOO_CLAMP {
                v = LOO_CLAMP;
                clamped_flags[i] = true;
                c.clamped += 1;
            }
            neg[i] = v;
        }
        let lse = logsumexp_nonempty(&neg);
        c.values[local] = -(lse - ln_s);
        if need_grad {
            for i in 0..s {
                if clamped_flags[i] {
                    continue;
                }
                let w = (neg[i] - lse).exp() / b as f64;
                let k = comps[i];
                let off = (local * kc + k) * q;
                for j in 0..q {
                    let sd = marg.variance(k, n, j).sqrt();
                    let g = w * dfs[i * q + j];
                    c.dmean[off + j] += g;
                    c.dvar[off + j] += g * eps[i * q + j] / (2.0 * sd);
                }
            }
        }
        Ok(())
    })?;
    let value = pass.point_values.iter().sum::<f64>() / b as f64;
    let mut gradients = ParamSet::new();
    if need_grad {
        let dmean = to_marginal_layout(&pass.dmean, kc, b, q);
        let dvar = to_marginal_layout(&pass.dvar, kc, b, q);
        let (_, adjoints) = backprop_marginals(state, &priors, &marg, &dmean, &dvar, false, true)?;
        gradients = finish(state, &priors, &batch.x, &wants, adjoints, None, None, None)?;
    }
    Ok(ObjectiveEstimate {
        value,
        gradients,
        mc_samples_used: s,
        batch_indices: batch.indices.clone(),
        point_values: pass.point_values,
        clamped: pass.clamped,
    })
}

/// Score-function (log-derivative) estimate of the expected log-likelihood
/// gradient with respect to the posterior parameters, using the same draws
/// as the reparameterized estimator. No variance reduction is applied.
pub fn score_function_gradient(
    batch: &Batch<'_>,
    state: &ModelState,
    mc: &McConfig,
    n_total: usize,
) -> Result<ObjectiveEstimate> {
    expected_log_likelihood(
        batch,
        state,
        mc,
        n_total,
        &[ParamGroup::Posterior],
        GradientEstimator::ScoreFunction,
    )
}
