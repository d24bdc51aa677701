//! The augmented sparse GP: inducing inputs, the mixture posterior over
//! inducing values, per-point conditional marginals, the KL bound and the
//! full posterior over latent values.

use std::collections::BTreeMap;
use std::fmt;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::KernelParams;
use crate::likelihoods::LikelihoodConfig;
use crate::math::{cholesky, dot, jittered_cholesky, DenseMatrix, LowerTriangular, RandomStream};

/// Marginal variances are floored here; gradients through floored entries are zero.
pub const VARIANCE_FLOOR: f64 = 1e-12;

/// Largest input count [`full_posterior`] will build dense covariances for.
pub const FULL_POSTERIOR_MAX_POINTS: usize = 10_000;

/// Default base jitter for inducing Gram matrices, relative to their mean diagonal.
pub const DEFAULT_RELATIVE_JITTER: f64 = 1e-6;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Inducing inputs: one `M × D` matrix shared by every latent process, or one per process.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InducingSet {
    pub shared: bool,
    sets: Vec<DenseMatrix>,
}

impl InducingSet {
    pub fn shared(z: DenseMatrix) -> Result<Self> {
        let s = InducingSet {
            shared: true,
            sets: vec![z],
        };
        s.validate()?;
        Ok(s)
    }

    pub fn per_latent(sets: Vec<DenseMatrix>) -> Result<Self> {
        let s = InducingSet { shared: false, sets };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        let first = self.sets.first().ok_or(Error::Empty("inducing set"))?;
        if first.rows() == 0 {
            return Err(Error::Empty("inducing points"));
        }
        if self.shared && self.sets.len() != 1 {
            return Err(Error::dims("shared inducing sets", 1, self.sets.len()));
        }
        for z in &self.sets {
            if z.rows() != first.rows() || z.cols() != first.cols() {
                return Err(Error::dims("inducing set shape", first.rows() * first.cols(), z.rows() * z.cols()));
            }
            if let Some(index) = z.as_slice().iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFinite {
                    context: "inducing inputs",
                    index,
                });
            }
        }
        Ok(())
    }

    /// Inducing inputs of latent process `j`.
    pub fn for_latent(&self, j: usize) -> &DenseMatrix {
        if self.shared {
            &self.sets[0]
        } else {
            &self.sets[j]
        }
    }

    fn set_index(&self, j: usize) -> usize {
        if self.shared {
            0
        } else {
            j
        }
    }

    pub fn sets(&self) -> &[DenseMatrix] {
        &self.sets
    }

    pub fn num_inducing(&self) -> usize {
        self.sets[0].rows()
    }

    pub fn input_dim(&self) -> usize {
        self.sets[0].cols()
    }
}

fn tri_len(m: usize) -> usize {
    m * (m + 1) / 2
}

#[inline]
fn tri_index(i: usize, c: usize) -> usize {
    i * (i + 1) / 2 + c
}

/// Mixture of K factorized Gaussians over the inducing values of Q processes.
///
/// Weights are the softmax of `logits`. Each covariance is `L Lᵀ` with `L`
/// lower triangular, stored packed by rows with the diagonal as logs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixturePosterior {
    num_components: usize,
    num_latent: usize,
    num_inducing: usize,
    logits: Vec<f64>,
    means: Vec<f64>,
    factors: Vec<f64>,
}

impl MixturePosterior {
    /// Zero means, identity covariances, equal weights.
    pub fn new(num_components: usize, num_latent: usize, num_inducing: usize) -> Result<Self> {
        if num_components == 0 || num_latent == 0 || num_inducing == 0 {
            return Err(Error::invalid("posterior needs K, Q and M all at least 1"));
        }
        Ok(MixturePosterior {
            num_components,
            num_latent,
            num_inducing,
            logits: vec![0.0; num_components],
            means: vec![0.0; num_components * num_latent * num_inducing],
            factors: vec![0.0; num_components * num_latent * tri_len(num_inducing)],
        })
    }

    pub fn num_components(&self) -> usize {
        self.num_components
    }

    pub fn num_latent(&self) -> usize {
        self.num_latent
    }

    pub fn num_inducing(&self) -> usize {
        self.num_inducing
    }

    pub fn logits(&self) -> &[f64] {
        &self.logits
    }

    pub fn set_logits(&mut self, logits: &[f64]) -> Result<()> {
        if logits.len() != self.num_components {
            return Err(Error::dims("component logits", self.num_components, logits.len()));
        }
        self.logits.copy_from_slice(logits);
        Ok(())
    }

    /// Mixture weights `softmax(logits)`.
    pub fn weights(&self) -> Vec<f64> {
        let max = self.logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = self.logits.iter().map(|l| (l - max).exp()).collect();
        let total: f64 = e.iter().sum();
        e.into_iter().map(|v| v / total).collect()
    }

    fn block(&self, k: usize, j: usize) -> usize {
        k * self.num_latent + j
    }

    pub fn mean(&self, k: usize, j: usize) -> &[f64] {
        let m = self.num_inducing;
        let b = self.block(k, j);
        &self.means[b * m..(b + 1) * m]
    }

    pub fn mean_mut(&mut self, k: usize, j: usize) -> &mut [f64] {
        let m = self.num_inducing;
        let b = self.block(k, j);
        &mut self.means[b * m..(b + 1) * m]
    }

    fn raw_factor(&self, k: usize, j: usize) -> &[f64] {
        let t = tri_len(self.num_inducing);
        let b = self.block(k, j);
        &self.factors[b * t..(b + 1) * t]
    }

    /// Covariance factor `L_kj`.
    pub fn factor(&self, k: usize, j: usize) -> LowerTriangular {
        let m = self.num_inducing;
        let raw = self.raw_factor(k, j);
        let dense = DenseMatrix::from_fn(m, m, |i, c| match c.cmp(&i) {
            std::cmp::Ordering::Less => raw[tri_index(i, c)],
            std::cmp::Ordering::Equal => raw[tri_index(i, i)].exp(),
            std::cmp::Ordering::Greater => 0.0,
        });
        LowerTriangular::from_lower(&dense).expect("square")
    }

    /// Sets `L_kj`; its diagonal must be strictly positive.
    pub fn set_factor(&mut self, k: usize, j: usize, l: &LowerTriangular) -> Result<()> {
        let m = self.num_inducing;
        if l.dim() != m {
            return Err(Error::dims("covariance factor", m, l.dim()));
        }
        if let Some(i) = (0..m).find(|&i| !(l.get(i, i) > 0.0)) {
            return Err(Error::invalid(format!("covariance factor diagonal entry {i} is not positive")));
        }
        let t = tri_len(m);
        let b = self.block(k, j);
        let raw = &mut self.factors[b * t..(b + 1) * t];
        for i in 0..m {
            for c in 0..i {
                raw[tri_index(i, c)] = l.get(i, c);
            }
            raw[tri_index(i, i)] = l.get(i, i).ln();
        }
        Ok(())
    }

    /// `S_kj = L_kj L_kjᵀ`.
    pub fn covariance(&self, k: usize, j: usize) -> DenseMatrix {
        self.factor(k, j).reconstruct()
    }

    pub fn num_params(&self) -> usize {
        self.logits.len() + self.means.len() + self.factors.len()
    }

    /// `[logits | means | packed factors]`, with factor diagonals as logs.
    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.num_params());
        v.extend_from_slice(&self.logits);
        v.extend_from_slice(&self.means);
        v.extend_from_slice(&self.factors);
        v
    }

    pub fn set_from_slice(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.num_params() {
            return Err(Error::dims("posterior parameters", self.num_params(), values.len()));
        }
        let (a, rest) = values.split_at(self.logits.len());
        let (b, c) = rest.split_at(self.means.len());
        self.logits.copy_from_slice(a);
        self.means.copy_from_slice(b);
        self.factors.copy_from_slice(c);
        Ok(())
    }

    /// Offsets of the means and factor blocks in [`MixturePosterior::to_vec`].
    pub fn layout(&self) -> (usize, usize) {
        let means = self.logits.len();
        (means, means + self.means.len())
    }
}

/// Named groups of trainable parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    Kernel,
    Posterior,
    Inducing,
    Likelihood,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 4] = [
        ParamGroup::Kernel,
        ParamGroup::Posterior,
        ParamGroup::Inducing,
        ParamGroup::Likelihood,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ParamGroup::Kernel => "kernel",
            ParamGroup::Posterior => "posterior",
            ParamGroup::Inducing => "inducing",
            ParamGroup::Likelihood => "likelihood",
        }
    }

    pub fn parse(s: &str) -> Option<ParamGroup> {
        ParamGroup::ALL.into_iter().find(|g| g.name() == s)
    }
}

impl fmt::Display for ParamGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Flat parameter (or gradient) vectors keyed by group.
pub type ParamSet = BTreeMap<ParamGroup, Vec<f64>>;

/// Everything needed to evaluate the model: kernels, inducing inputs,
/// variational posterior and likelihood.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelState {
    pub kernels: Vec<KernelParams>,
    pub inducing: InducingSet,
    pub posterior: MixturePosterior,
    pub likelihood: LikelihoodConfig,
    /// Base jitter for inducing Gram matrices relative to their mean
    /// diagonal; zero disables jitter.
    pub relative_jitter: f64,
}

impl ModelState {
    /// Builds a state with the default posterior initialization.
    pub fn new(
        kernels: Vec<KernelParams>,
        inducing: InducingSet,
        likelihood: LikelihoodConfig,
        num_components: usize,
    ) -> Result<Self> {
        let posterior = MixturePosterior::new(num_components, kernels.len(), inducing.num_inducing())?;
        let state = ModelState {
            kernels,
            inducing,
            posterior,
            likelihood,
            relative_jitter: DEFAULT_RELATIVE_JITTER,
        };
        state.validate()?;
        Ok(state)
    }

    pub fn validate(&self) -> Result<()> {
        self.likelihood.validate()?;
        self.inducing.validate()?;
        let q = self.likelihood.num_latent();
        if self.kernels.len() != q {
            return Err(Error::dims("kernel count vs likelihood latent count", q, self.kernels.len()));
        }
        if self.posterior.num_latent != q {
            return Err(Error::dims("posterior latent count", q, self.posterior.num_latent));
        }
        if self.posterior.num_inducing != self.inducing.num_inducing() {
            return Err(Error::dims(
                "posterior inducing count",
                self.inducing.num_inducing(),
                self.posterior.num_inducing,
            ));
        }
        if !self.inducing.shared && self.inducing.sets.len() != q {
            return Err(Error::dims("per-latent inducing sets", q, self.inducing.sets.len()));
        }
        let d = self.inducing.input_dim();
        for k in &self.kernels {
            if let Some(kd) = k.input_dim() {
                if kd != d {
                    return Err(Error::dims("kernel input dimension", d, kd));
                }
            }
            if k.to_vec().iter().any(|v| !v.is_finite()) {
                return Err(Error::invalid("kernel parameters must be finite"));
            }
        }
        if self.posterior.to_vec().iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("posterior parameters must be finite"));
        }
        if !(self.relative_jitter >= 0.0) {
            return Err(Error::invalid("relative jitter must be non-negative"));
        }
        Ok(())
    }

    pub fn num_latent(&self) -> usize {
        self.kernels.len()
    }

    pub fn num_inducing(&self) -> usize {
        self.inducing.num_inducing()
    }

    pub fn num_components(&self) -> usize {
        self.posterior.num_components
    }

    pub fn input_dim(&self) -> usize {
        self.inducing.input_dim()
    }

    pub fn param_count(&self, group: ParamGroup) -> usize {
        match group {
            ParamGroup::Kernel => self.kernels.iter().map(|k| k.num_params()).sum(),
            ParamGroup::Posterior => self.posterior.num_params(),
            ParamGroup::Inducing => self.inducing.sets.iter().map(|z| z.rows() * z.cols()).sum(),
            ParamGroup::Likelihood => self.likelihood.num_params(),
        }
    }

    pub fn params(&self, group: ParamGroup) -> Vec<f64> {
        match group {
            ParamGroup::Kernel => self.kernels.iter().flat_map(|k| k.to_vec()).collect(),
            ParamGroup::Posterior => self.posterior.to_vec(),
            ParamGroup::Inducing => self.inducing.sets.iter().flat_map(|z| z.as_slice().to_vec()).collect(),
            ParamGroup::Likelihood => self.likelihood.params(),
        }
    }

    pub fn set_params(&mut self, group: ParamGroup, values: &[f64]) -> Result<()> {
        let expected = self.param_count(group);
        if values.len() != expected {
            return Err(Error::dims("parameter group size", expected, values.len()));
        }
        match group {
            ParamGroup::Kernel => {
                let mut offset = 0;
                for k in &mut self.kernels {
                    let n = k.num_params();
                    k.set_from_slice(&values[offset..offset + n])?;
                    offset += n;
                }
            }
            ParamGroup::Posterior => self.posterior.set_from_slice(values)?,
            ParamGroup::Inducing => {
                let mut offset = 0;
                for z in &mut self.inducing.sets {
                    let n = z.rows() * z.cols();
                    z.as_mut_slice().copy_from_slice(&values[offset..offset + n]);
                    offset += n;
                }
            }
            ParamGroup::Likelihood => self.likelihood.set_params(values)?,
        }
        Ok(())
    }

    /// Jittered Cholesky factorizations of every inducing Gram matrix.
    pub fn prior_factors(&self) -> Result<Vec<PriorFactor>> {
        (0..self.num_latent())
            .into_par_iter()
            .map(|j| PriorFactor::new(&self.kernels[j], self.inducing.for_latent(j), self.relative_jitter))
            .collect()
    }
}

/// Factorized inducing prior covariance `K_zz + jitter·I` of one latent process.
#[derive(Debug, Clone)]
pub struct PriorFactor {
    pub kzz: DenseMatrix,
    pub chol: LowerTriangular,
    pub jitter: f64,
    /// `∂jitter/∂(K_zz)_ii`: the jitter scales with the mean diagonal.
    jitter_slope: f64,
}

impl PriorFactor {
    pub fn new(kernel: &KernelParams, z: &DenseMatrix, relative_jitter: f64) -> Result<Self> {
        let mut kzz = kernel.gram_sym(z)?;
        let m = kzz.rows();
        let mean_diag = kzz.trace() / m as f64;
        let base = relative_jitter * mean_diag.abs();
        let (chol, jitter) = jittered_cholesky(&kzz, base)?;
        kzz.add_diagonal(jitter);
        let jitter_slope = if base > 0.0 { jitter / (m as f64 * mean_diag) } else { 0.0 };
        Ok(PriorFactor {
            kzz,
            chol,
            jitter,
            jitter_slope,
        })
    }
}

/// Per-point, per-latent, per-component marginal means and variances of a batch.
#[derive(Debug, Clone)]
pub struct MarginalBatch {
    pub num_points: usize,
    pub num_components: usize,
    pub num_latent: usize,
    /// Indexed `(k·B + n)·Q + j`.
    pub means: Vec<f64>,
    pub variances: Vec<f64>,
    /// `A_j = K_xz K_zz⁻¹`, one `B × M` matrix per latent process.
    pub projections: Vec<DenseMatrix>,
    /// Diagonal of `K̃_j = K_xx − A_j K_zx`, clamped at zero.
    pub conditional_variances: Vec<Vec<f64>>,
    /// `A_j L_kj`, indexed `k·Q + j`.
    scaled: Vec<DenseMatrix>,
    ktilde_clamped: Vec<Vec<bool>>,
    floored: Vec<bool>,
}

impl MarginalBatch {
    #[inline]
    pub fn index(&self, k: usize, n: usize, j: usize) -> usize {
        (k * self.num_points + n) * self.num_latent + j
    }

    pub fn mean(&self, k: usize, n: usize, j: usize) -> f64 {
        self.means[self.index(k, n, j)]
    }

    pub fn variance(&self, k: usize, n: usize, j: usize) -> f64 {
        self.variances[self.index(k, n, j)]
    }
}

/// Marginals `q(f_jn)` of every component for the rows of `x`.
pub fn conditional_marginals(x: &DenseMatrix, state: &ModelState) -> Result<MarginalBatch> {
    let priors = state.prior_factors()?;
    marginals_with(x, state, &priors)
}

struct LatentMarginals {
    a: DenseMatrix,
    ktilde: Vec<f64>,
    clamped: Vec<bool>,
    per_component: Vec<(Vec<f64>, Vec<f64>, DenseMatrix)>,
}

pub(crate) fn marginals_with(x: &DenseMatrix, state: &ModelState, priors: &[PriorFactor]) -> Result<MarginalBatch> {
    let b = x.rows();
    if b == 0 {
        return Err(Error::Empty("batch"));
    }
    if x.cols() != state.input_dim() {
        return Err(Error::dims("batch input dimension", state.input_dim(), x.cols()));
    }
    let q = state.num_latent();
    let kc = state.num_components();
    let per_latent: Vec<LatentMarginals> = (0..q)
        .into_par_iter()
        .map(|j| -> Result<LatentMarginals> {
            let kernel = &state.kernels[j];
            let z = state.inducing.for_latent(j);
            let kxz = kernel.gram(x, z)?;
            let a = priors[j].chol.solve_product(&kxz.transpose())?.transpose();
            let kdiag = kernel.gram_diag(x)?;
            let mut clamped = vec![false; b];
            let ktilde: Vec<f64> = (0..b)
                .map(|n| {
                    let v = kdiag[n] - dot(kxz.row(n), a.row(n));
                    if v < 0.0 {
                        clamped[n] = true;
                        0.0
                    } else {
                        v
                    }
                })
                .collect();
            let per_component = (0..kc)
                .map(|k| {
                    let m = state.posterior.mean(k, j);
                    let l = state.posterior.factor(k, j);
                    let t = a.matmul(l.as_dense());
                    let means = a.matvec(m);
                    let vars: Vec<f64> = (0..b).map(|n| ktilde[n] + dot(t.row(n), t.row(n))).collect();
                    (means, vars, t)
                })
                .collect();
            Ok(LatentMarginals {
                a,
                ktilde,
                clamped,
                per_component,
            })
        })
        .collect::<Result<_>>()?;

    let mut means = vec![0.0; kc * b * q];
    let mut variances = vec![0.0; kc * b * q];
    let mut floored = vec![false; kc * b * q];
    let mut scaled = Vec::with_capacity(kc * q);
    for k in 0..kc {
        for (j, lm) in per_latent.iter().enumerate() {
            let (mu, var, _) = &lm.per_component[k];
            for n in 0..b {
                let idx = (k * b + n) * q + j;
                means[idx] = mu[n];
                if var[n] < VARIANCE_FLOOR || !var[n].is_finite() {
                    variances[idx] = VARIANCE_FLOOR;
                    floored[idx] = true;
                } else {
                    variances[idx] = var[n];
                }
            }
        }
    }
    let mut projections = Vec::with_capacity(q);
    let mut conditional_variances = Vec::with_capacity(q);
    let mut ktilde_clamped = Vec::with_capacity(q);
    let mut per_component_t: Vec<Vec<DenseMatrix>> = Vec::with_capacity(q);
    for lm in per_latent {
        projections.push(lm.a);
        conditional_variances.push(lm.ktilde);
        ktilde_clamped.push(lm.clamped);
        per_component_t.push(lm.per_component.into_iter().map(|(_, _, t)| t).collect());
    }
    for k in 0..kc {
        for ts in per_component_t.iter_mut() {
            scaled.push(std::mem::replace(&mut ts[k], DenseMatrix::zeros(0, 0)));
        }
    }
    if let Some(index) = means.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            context: "marginal means",
            index,
        });
    }
    Ok(MarginalBatch {
        num_points: b,
        num_components: kc,
        num_latent: q,
        means,
        variances,
        projections,
        conditional_variances,
        scaled,
        ktilde_clamped,
        floored,
    })
}

/// Reparameterized latent samples `f = mean + sqrt(var)·ε` and the `ε` used.
#[derive(Debug, Clone)]
pub struct LatentSamples {
    pub num_components: usize,
    pub num_samples: usize,
    pub num_points: usize,
    pub num_latent: usize,
    /// Indexed `((k·S + i)·B + n)·Q + j`.
    pub values: Vec<f64>,
    pub noise: Vec<f64>,
}

impl LatentSamples {
    #[inline]
    pub fn index(&self, k: usize, i: usize, n: usize, j: usize) -> usize {
        ((k * self.num_samples + i) * self.num_points + n) * self.num_latent + j
    }
}

/// Standard normal draws for one datapoint, in `(k, i, j)` order, from the
/// child stream keyed by the point's index.
pub(crate) fn point_noise(stream: &RandomStream, point: u64, out: &mut [f64]) {
    let mut rng = stream.split(point).rng();
    crate::math::fill_standard_normals(&mut rng, out);
}

/// Draws `S` samples per component for every point. Point `n` uses the
/// child stream `stream.split(n)`.
pub fn sample_latents(marg: &MarginalBatch, num_samples: usize, stream: &RandomStream) -> Result<LatentSamples> {
    if num_samples == 0 {
        return Err(Error::invalid("number of samples must be at least 1"));
    }
    let (kc, b, q, s) = (marg.num_components, marg.num_points, marg.num_latent, num_samples);
    let mut out = LatentSamples {
        num_components: kc,
        num_samples: s,
        num_points: b,
        num_latent: q,
        values: vec![0.0; kc * s * b * q],
        noise: vec![0.0; kc * s * b * q],
    };
    let mut eps = vec![0.0; kc * s * q];
    for n in 0..b {
        point_noise(stream, n as u64, &mut eps);
        for k in 0..kc {
            for i in 0..s {
                for j in 0..q {
                    let e = eps[(k * s + i) * q + j];
                    let idx = out.index(k, i, n, j);
                    let mi = marg.index(k, n, j);
                    out.noise[idx] = e;
                    out.values[idx] = marg.means[mi] + marg.variances[mi].sqrt() * e;
                }
            }
        }
    }
    Ok(out)
}

/// One mixture component of the posterior over latent values at a set of inputs.
#[derive(Debug, Clone)]
pub struct ComponentPosterior {
    pub weight: f64,
    /// Per latent process.
    pub means: Vec<Vec<f64>>,
    pub covariances: Vec<DenseMatrix>,
}

/// Mixture posterior over all latent values at `x`, with dense covariances
/// `K̃_j + A_j S_kj A_jᵀ`.
pub fn full_posterior(x: &DenseMatrix, state: &ModelState) -> Result<Vec<ComponentPosterior>> {
    let n = x.rows();
    if n > FULL_POSTERIOR_MAX_POINTS {
        return Err(Error::invalid(format!(
            "full posterior limited to {FULL_POSTERIOR_MAX_POINTS} points, got {n}"
        )));
    }
    if n == 0 {
        return Err(Error::Empty("full posterior inputs"));
    }
    if x.cols() != state.input_dim() {
        return Err(Error::dims("input dimension", state.input_dim(), x.cols()));
    }
    let priors = state.prior_factors()?;
    let q = state.num_latent();
    let per_latent: Vec<(DenseMatrix, DenseMatrix)> = (0..q)
        .map(|j| -> Result<(DenseMatrix, DenseMatrix)> {
            let kernel = &state.kernels[j];
            let kxz = kernel.gram(x, state.inducing.for_latent(j))?;
            let a = priors[j].chol.solve_product(&kxz.transpose())?.transpose();
            let mut ktilde = kernel.gram_sym(x)?;
            ktilde.add_scaled(-1.0, &a.matmul_nt(&kxz));
            Ok((a, ktilde))
        })
        .collect::<Result<_>>()?;
    let weights = state.posterior.weights();
    Ok((0..state.num_components())
        .map(|k| {
            let mut means = Vec::with_capacity(q);
            let mut covariances = Vec::with_capacity(q);
            for (j, (a, ktilde)) in per_latent.iter().enumerate() {
                means.push(a.matvec(state.posterior.mean(k, j)));
                let t = a.matmul(state.posterior.factor(k, j).as_dense());
                let mut cov = t.matmul_nt(&t);
                cov.add_scaled(1.0, ktilde);
                cov.symmetrize_from_lower();
                covariances.push(cov);
            }
            ComponentPosterior {
                weight: weights[k],
                means,
                covariances,
            }
        })
        .collect())
}

/// Adjoints of the prior matrices of one latent process.
#[derive(Debug, Clone)]
pub(crate) struct PriorAdjoint {
    pub kzz: DenseMatrix,
    pub kxz: Option<DenseMatrix>,
    pub kdiag: Option<Vec<f64>>,
}

impl PriorAdjoint {
    fn zeros(m: usize) -> Self {
        PriorAdjoint {
            kzz: DenseMatrix::zeros(m, m),
            kxz: None,
            kdiag: None,
        }
    }
}

fn lower_to_raw(dl: &DenseMatrix, l: &LowerTriangular, out: &mut [f64]) {
    let m = l.dim();
    for i in 0..m {
        for c in 0..i {
            out[tri_index(i, c)] += dl[(i, c)];
        }
        out[tri_index(i, i)] += dl[(i, i)] * l.get(i, i);
    }
}

/// Pulls adjoints of marginal means and variances back to the posterior
/// means/factors and to the prior matrices.
///
/// Returns the posterior gradient in [`MixturePosterior::to_vec`] layout
/// (logit entries untouched) and one prior adjoint per latent process.
pub(crate) fn backprop_marginals(
    state: &ModelState,
    priors: &[PriorFactor],
    marg: &MarginalBatch,
    dmean: &[f64],
    dvar: &[f64],
    want_posterior: bool,
    want_prior: bool,
) -> Result<(Option<Vec<f64>>, Vec<PriorAdjoint>)> {
    let (kc, b, q) = (marg.num_components, marg.num_points, marg.num_latent);
    let m = state.num_inducing();
    let post = &state.posterior;
    type LatentResult = (Vec<(Vec<f64>, DenseMatrix)>, PriorAdjoint);
    let per_latent: Vec<LatentResult> = (0..q)
        .into_par_iter()
        .map(|j| -> Result<LatentResult> {
            let a = &marg.projections[j];
            let mut post_grads = Vec::new();
            let mut g_a = if want_prior { Some(DenseMatrix::zeros(b, m)) } else { None };
            let mut g_kt = vec![0.0; b];
            for k in 0..kc {
                let mut dm_k = vec![0.0; b];
                let mut dv_k = vec![0.0; b];
                for n in 0..b {
                    let idx = marg.index(k, n, j);
                    dm_k[n] = dmean[idx];
                    dv_k[n] = if marg.floored[idx] { 0.0 } else { dvar[idx] };
                }
                let t = &marg.scaled[k * q + j];
                let mut dt = t.clone();
                for n in 0..b {
                    dt.row_mut(n).iter_mut().for_each(|v| *v *= dv_k[n]);
                }
                let l = post.factor(k, j);
                if want_posterior {
                    let dm = a.matvec_t(&dm_k);
                    let mut dl = a.matmul_tn(&dt);
                    dl.scale(2.0);
                    post_grads.push((dm, dl));
                }
                if let Some(g_a) = g_a.as_mut() {
                    let mean = post.mean(k, j);
                    for n in 0..b {
                        if dm_k[n] != 0.0 {
                            crate::math::axpy(dm_k[n], mean, g_a.row_mut(n));
                        }
                    }
                    g_a.add_scaled(2.0, &dt.matmul_nt(l.as_dense()));
                    for n in 0..b {
                        if !marg.ktilde_clamped[j][n] {
                            g_kt[n] += dv_k[n];
                        }
                    }
                }
            }
            let adjoint = match g_a {
                Some(g_a) => {
                    // C = K_zz⁻¹ Ḡ_Aᵀ
                    let c = priors[j].chol.solve_product(&g_a.transpose())?;
                    let mut g_kxz = c.transpose();
                    for n in 0..b {
                        crate::math::axpy(-2.0 * g_kt[n], a.row(n), g_kxz.row_mut(n));
                    }
                    let mut ga = a.clone();
                    for n in 0..b {
                        ga.row_mut(n).iter_mut().for_each(|v| *v *= g_kt[n]);
                    }
                    let mut g_kzz = a.matmul_tn(&ga);
                    g_kzz.add_scaled(-1.0, &c.matmul(a));
                    let sym = g_kzz.transpose();
                    g_kzz.add_scaled(1.0, &sym);
                    g_kzz.scale(0.5);
                    PriorAdjoint {
                        kzz: g_kzz,
                        kxz: Some(g_kxz),
                        kdiag: Some(g_kt),
                    }
                }
                None => PriorAdjoint::zeros(m),
            };
            Ok((post_grads, adjoint))
        })
        .collect::<Result<_>>()?;

    let mut post_grad = if want_posterior { Some(vec![0.0; post.num_params()]) } else { None };
    let mut adjoints = Vec::with_capacity(q);
    let (mean_off, factor_off) = post.layout();
    let t = tri_len(m);
    for (j, (grads, adjoint)) in per_latent.into_iter().enumerate() {
        if let Some(pg) = post_grad.as_mut() {
            for (k, (dm, dl)) in grads.into_iter().enumerate() {
                let blk = k * q + j;
                for (g, v) in pg[mean_off + blk * m..mean_off + (blk + 1) * m].iter_mut().zip(&dm) {
                    *g += v;
                }
                let l = post.factor(k, j);
                lower_to_raw(&dl, &l, &mut pg[factor_off + blk * t..factor_off + (blk + 1) * t]);
            }
        }
        adjoints.push(adjoint);
    }
    Ok((post_grad, adjoints))
}

/// Upper bound on `KL[q(u) ‖ p(u)]`.
///
/// The cross-entropy term is exact. The mixture entropy is bounded below by
/// the pairwise-distance bound with Bhattacharyya distances between
/// components, which is exact for a single component and for duplicated
/// components.
pub fn kl_bound(state: &ModelState) -> Result<f64> {
    let priors = state.prior_factors()?;
    Ok(kl_bound_with_grad(state, &priors, false, false)?.0)
}

struct PairTerms {
    beta: Vec<f64>,
    sbar_inv: DenseMatrix,
}

/// KL bound value, its gradient in posterior-parameter layout, and the
/// adjoint of each `K_zz`.
pub(crate) fn kl_bound_with_grad(
    state: &ModelState,
    priors: &[PriorFactor],
    want_posterior: bool,
    want_prior: bool,
) -> Result<(f64, Option<Vec<f64>>, Vec<DenseMatrix>)> {
    let post = &state.posterior;
    let (kc, q, m) = (post.num_components, post.num_latent, post.num_inducing);
    let pi = post.weights();
    let factors: Vec<LowerTriangular> = (0..kc * q).map(|b| post.factor(b / q, b % q)).collect();
    let mut grad = vec![0.0; post.num_params()];
    let (mean_off, factor_off) = post.layout();
    let t = tri_len(m);

    // cross-entropy term E_q[log p(u)], per latent process
    type CrossTerms = (Vec<f64>, Vec<(Vec<f64>, DenseMatrix)>, DenseMatrix);
    let cross: Vec<CrossTerms> = (0..q)
        .into_par_iter()
        .map(|j| {
            let kinv = priors[j].chol.inverse_of_product();
            let logdet = priors[j].chol.log_det();
            let mut values = Vec::with_capacity(kc);
            let mut grads = Vec::with_capacity(kc);
            let mut g_k = DenseMatrix::zeros(m, m);
            for k in 0..kc {
                let mean = post.mean(k, j);
                let l = &factors[k * q + j];
                let kinv_m = kinv.matvec(mean);
                let kinv_l = kinv.matmul(l.as_dense());
                let quad = dot(mean, &kinv_m);
                let trace: f64 = kinv_l.as_slice().iter().zip(l.as_dense().as_slice()).map(|(a, b)| a * b).sum();
                values.push(-0.5 * quad - 0.5 * trace - 0.5 * (m as f64 * LN_2PI + logdet));
                if want_prior {
                    // ½π_k [K⁻¹(mmᵀ + S)K⁻¹ − K⁻¹]
                    let mut g = kinv_l.matmul_nt(&kinv_l);
                    for r in 0..m {
                        for c in 0..m {
                            g[(r, c)] += kinv_m[r] * kinv_m[c] - kinv[(r, c)];
                        }
                    }
                    g_k.add_scaled(0.5 * pi[k], &g);
                }
                if want_posterior {
                    grads.push((kinv_m, kinv_l));
                }
            }
            (values, grads, g_k)
        })
        .collect();

    let mut cross_total = 0.0;
    let mut d_pi = vec![0.0; kc];
    let mut g_kzz = Vec::with_capacity(q);
    for (j, (values, grads, g_k)) in cross.into_iter().enumerate() {
        for k in 0..kc {
            cross_total += pi[k] * values[k];
            // KL = −H − E, so ∂KL/∂π_k gets −e_kj
            d_pi[k] -= values[k];
        }
        if want_posterior {
            for (k, (kinv_m, kinv_l)) in grads.into_iter().enumerate() {
                let blk = k * q + j;
                for (g, v) in grad[mean_off + blk * m..mean_off + (blk + 1) * m].iter_mut().zip(&kinv_m) {
                    *g += pi[k] * v;
                }
                let mut dl = kinv_l;
                dl.scale(pi[k]);
                lower_to_raw(&dl, &factors[blk], &mut grad[factor_off + blk * t..factor_off + (blk + 1) * t]);
            }
        }
        let mut g = g_k;
        g.scale(-1.0);
        g_kzz.push(g);
    }

    // component entropies
    let log_dets: Vec<f64> = factors.iter().map(|l| l.log_det()).collect();
    let h: Vec<f64> = (0..kc)
        .map(|k| (0..q).map(|j| 0.5 * (m as f64 * (1.0 + LN_2PI) + log_dets[k * q + j])).sum())
        .collect();

    // pairwise Bhattacharyya distances
    let mut dist = vec![0.0; kc * kc];
    let mut pairs: BTreeMap<(usize, usize, usize), PairTerms> = BTreeMap::new();
    for k in 0..kc {
        for l in k + 1..kc {
            let mut d = 0.0;
            for j in 0..q {
                let mut sbar = factors[k * q + j].reconstruct();
                sbar.add_scaled(1.0, &factors[l * q + j].reconstruct());
                sbar.scale(0.5);
                let chol = cholesky(&sbar)?;
                let delta: Vec<f64> = post.mean(k, j).iter().zip(post.mean(l, j)).map(|(a, b)| a - b).collect();
                let beta = chol.solve_product(&DenseMatrix::column_vector(&delta))?.into_vec();
                d += 0.125 * dot(&delta, &beta) + 0.5 * chol.log_det()
                    - 0.25 * log_dets[k * q + j]
                    - 0.25 * log_dets[l * q + j];
                if want_posterior {
                    pairs.insert(
                        (k, l, j),
                        PairTerms {
                            beta,
                            sbar_inv: chol.inverse_of_product(),
                        },
                    );
                }
            }
            dist[k * kc + l] = d;
            dist[l * kc + k] = d;
        }
    }
    let e: Vec<f64> = dist.iter().map(|d| (-d).exp()).collect();
    let c: Vec<f64> = (0..kc).map(|k| (0..kc).map(|l| pi[l] * e[k * kc + l]).sum()).collect();
    let entropy: f64 = (0..kc).map(|k| pi[k] * (h[k] - c[k].ln())).sum();
    let value = -entropy - cross_total;

    if want_posterior {
        for a in 0..kc {
            let spread: f64 = (0..kc).map(|k| pi[k] * e[k * kc + a] / c[k]).sum();
            d_pi[a] -= h[a] - c[a].ln() - spread;
        }
        // entropy of each component: ∂H_k/∂(log L_ii) = 1
        for k in 0..kc {
            for j in 0..q {
                let blk = k * q + j;
                for i in 0..m {
                    grad[factor_off + blk * t + tri_index(i, i)] -= pi[k];
                }
            }
        }
        for ((k, l, j), terms) in &pairs {
            let (k, l, j) = (*k, *l, *j);
            let w = pi[k] * pi[l] * e[k * kc + l] * (1.0 / c[k] + 1.0 / c[l]);
            // ∂KL/∂D_kl = −w
            let beta = &terms.beta;
            for (side, sign) in [(k, 1.0), (l, -1.0)] {
                let blk = side * q + j;
                for (g, b) in grad[mean_off + blk * m..mean_off + (blk + 1) * m].iter_mut().zip(beta) {
                    *g -= w * sign * 0.25 * b;
                }
                let lf = &factors[blk];
                let mut gmat = terms.sbar_inv.clone();
                gmat.scale(0.25);
                for r in 0..m {
                    for s in 0..m {
                        gmat[(r, s)] -= beta[r] * beta[s] / 16.0;
                    }
                }
                let mut dl = gmat.matmul(lf.as_dense());
                dl.scale(2.0);
                for i in 0..m {
                    dl[(i, i)] -= 0.5 / lf.get(i, i);
                }
                dl.scale(-w);
                lower_to_raw(&dl, lf, &mut grad[factor_off + blk * t..factor_off + (blk + 1) * t]);
            }
        }
        let mean_dpi: f64 = (0..kc).map(|k| pi[k] * d_pi[k]).sum();
        for a in 0..kc {
            grad[a] += pi[a] * (d_pi[a] - mean_dpi);
        }
    }
    Ok((value, want_posterior.then_some(grad), g_kzz))
}

/// Kernel-parameter and inducing-input gradients implied by prior-matrix
/// adjoints, including the dependence of the jitter on the Gram diagonal.
pub(crate) fn prior_adjoint_to_params(
    state: &ModelState,
    priors: &[PriorFactor],
    x: Option<&DenseMatrix>,
    adjoints: &[PriorAdjoint],
    want_kernel: bool,
    want_inducing: bool,
) -> Result<(Option<Vec<f64>>, Option<Vec<f64>>)> {
    if !want_kernel && !want_inducing {
        return Ok((None, None));
    }
    let q = state.num_latent();
    let per_latent: Vec<(Vec<f64>, Option<DenseMatrix>)> = (0..q)
        .into_par_iter()
        .map(|j| -> Result<(Vec<f64>, Option<DenseMatrix>)> {
            let kernel = &state.kernels[j];
            let z = state.inducing.for_latent(j);
            let adj = &adjoints[j];
            let mut g_kzz = adj.kzz.clone();
            let slope = priors[j].jitter_slope;
            if slope != 0.0 {
                g_kzz.add_diagonal(slope * adj.kzz.trace());
            }
            let v = kernel.gram_sym_vjp(z, &g_kzz, want_inducing)?;
            let mut params = v.params;
            let mut gz = v.x1;
            if let (Some(x), Some(g_kxz)) = (x, adj.kxz.as_ref()) {
                let v = kernel.gram_vjp(x, z, g_kxz, false, want_inducing)?;
                params.iter_mut().zip(&v.params).for_each(|(a, b)| *a += b);
                if let (Some(gz), Some(g2)) = (gz.as_mut(), v.x2.as_ref()) {
                    gz.add_scaled(1.0, g2);
                }
            }
            if let (Some(x), Some(g_kd)) = (x, adj.kdiag.as_ref()) {
                let v = kernel.diag_vjp(x, g_kd, false)?;
                params.iter_mut().zip(&v.params).for_each(|(a, b)| *a += b);
            }
            Ok((params, gz))
        })
        .collect::<Result<_>>()?;
    let kernel_grad = want_kernel.then(|| per_latent.iter().flat_map(|(p, _)| p.iter().copied()).collect());
    let inducing_grad = if want_inducing {
        let sets = state.inducing.sets();
        let mut sums: Vec<DenseMatrix> = sets.iter().map(|z| DenseMatrix::zeros(z.rows(), z.cols())).collect();
        for (j, (_, gz)) in per_latent.iter().enumerate() {
            if let Some(gz) = gz {
                sums[state.inducing.set_index(j)].add_scaled(1.0, gz);
            }
        }
        Some(sums.into_iter().flat_map(|s| s.into_vec()).collect())
    } else {
        None
    };
    Ok((kernel_grad, inducing_grad))
}

/// Closed-form `KL[N(mean, S) ‖ N(0, K)]`.
pub fn gaussian_kl(mean: &[f64], s: &DenseMatrix, k: &DenseMatrix) -> Result<f64> {
    let m = mean.len();
    let lk = cholesky(k)?;
    let ls = cholesky(s)?;
    let kinv_s = lk.solve_product(s)?;
    let kinv_m = lk.solve_product(&DenseMatrix::column_vector(mean))?.into_vec();
    Ok(0.5 * (kinv_s.trace() + dot(mean, &kinv_m) - m as f64 + lk.log_det() - ls.log_det()))
}

/// Draws `S` latent vectors at point `n` of a batch from the full mixture
/// marginal: each sample picks a component by weight, then draws within it.
pub fn sample_mixture_marginal(
    marg: &MarginalBatch,
    weights: &[f64],
    n: usize,
    num_samples: usize,
    stream: &RandomStream,
) -> DenseMatrix {
    let q = marg.num_latent;
    let mut rng = stream.rng();
    let mut out = DenseMatrix::zeros(num_samples, q);
    let mut eps = vec![0.0; q];
    for i in 0..num_samples {
        let k = pick_component(weights, &mut rng);
        crate::math::fill_standard_normals(&mut rng, &mut eps);
        for j in 0..q {
            let idx = marg.index(k, n, j);
            out[(i, j)] = marg.means[idx] + marg.variances[idx].sqrt() * eps[j];
        }
    }
    out
}

/// Component index drawn with probability `weights[k]`; no draw is consumed
/// when there is a single component.
pub(crate) fn pick_component(weights: &[f64], rng: &mut rand_chacha::ChaCha8Rng) -> usize {
    use rand::Rng;
    if weights.len() == 1 {
        return 0;
    }
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (k, w) in weights.iter().enumerate() {
        acc += w;
        if u < acc {
            return k;
        }
    }
    weights.len() - 1
}
