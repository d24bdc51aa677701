//! Conditional likelihoods `p(yₙ | fₙ)` over the Q latent values of one
//! datapoint.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{logsumexp_nonempty, DenseMatrix};

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

/// Likelihood family and its shape. Noise variances are stored as logs.
///
/// For the regression network the latent vector of a point is laid out as
/// `[v₁ … v_Q, W₁₁ … W₁Q, W₂₁ … W_PQ]`: node values first, then the
/// `P × Q` weight matrix in row-major order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LikelihoodConfig {
    Gaussian { log_noise_variances: Vec<f64> },
    Logistic,
    Softmax { num_classes: usize },
    Gprn {
        outputs: usize,
        nodes: usize,
        log_noise_variance: f64,
    },
}

/// One target: a real vector for regression, a class index otherwise
/// (0 or 1 for the logistic likelihood).
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Observation<'a> {
    Real(&'a [f64]),
    Class(usize),
}

/// Monte Carlo predictive summary for a single input.
#[derive(Debug, Clone, PartialEq)]
pub enum Prediction {
    Classes { probabilities: Vec<f64>, label: usize },
    Real { mean: Vec<f64>, variance: Vec<f64> },
}

/// Log-density with its gradients in `f` and in the likelihood parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct LikelihoodGrad {
    pub value: f64,
    pub df: Vec<f64>,
    pub dparams: Vec<f64>,
}

#[inline]
fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softmax_into(f: &[f64], out: &mut [f64]) {
    let lse = logsumexp_nonempty(f);
    for (o, v) in out.iter_mut().zip(f) {
        *o = (v - lse).exp();
    }
}

impl LikelihoodConfig {
    pub fn gaussian(outputs: usize, log_noise_variance: f64) -> Self {
        LikelihoodConfig::Gaussian {
            log_noise_variances: vec![log_noise_variance; outputs],
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            LikelihoodConfig::Gaussian { log_noise_variances } if log_noise_variances.is_empty() => {
                Err(Error::invalid("gaussian likelihood needs at least one output"))
            }
            LikelihoodConfig::Softmax { num_classes } if *num_classes < 2 => {
                Err(Error::invalid("softmax likelihood needs at least two classes"))
            }
            LikelihoodConfig::Gprn { outputs, nodes, .. } if *outputs == 0 || *nodes == 0 => {
                Err(Error::invalid("gprn likelihood needs at least one output and one node"))
            }
            _ if self.params().iter().any(|p| !p.is_finite()) => {
                Err(Error::invalid("likelihood parameters must be finite"))
            }
            _ => Ok(()),
        }
    }

    /// Number of latent processes Q this likelihood consumes.
    pub fn num_latent(&self) -> usize {
        match self {
            LikelihoodConfig::Gaussian { log_noise_variances } => log_noise_variances.len(),
            LikelihoodConfig::Logistic => 1,
            LikelihoodConfig::Softmax { num_classes } => *num_classes,
            LikelihoodConfig::Gprn { outputs, nodes, .. } => nodes + outputs * nodes,
        }
    }

    pub fn is_classification(&self) -> bool {
        matches!(self, LikelihoodConfig::Logistic | LikelihoodConfig::Softmax { .. })
    }

    /// Class count for classification likelihoods.
    pub fn num_classes(&self) -> Option<usize> {
        match self {
            LikelihoodConfig::Logistic => Some(2),
            LikelihoodConfig::Softmax { num_classes } => Some(*num_classes),
            _ => None,
        }
    }

    /// Dimension of a real-valued observation.
    pub fn output_dim(&self) -> Option<usize> {
        match self {
            LikelihoodConfig::Gaussian { log_noise_variances } => Some(log_noise_variances.len()),
            LikelihoodConfig::Gprn { outputs, .. } => Some(*outputs),
            _ => None,
        }
    }

    pub fn num_params(&self) -> usize {
        match self {
            LikelihoodConfig::Gaussian { log_noise_variances } => log_noise_variances.len(),
            LikelihoodConfig::Gprn { .. } => 1,
            _ => 0,
        }
    }

    /// Log noise variances (empty for classification).
    pub fn params(&self) -> Vec<f64> {
        match self {
            LikelihoodConfig::Gaussian { log_noise_variances } => log_noise_variances.clone(),
            LikelihoodConfig::Gprn { log_noise_variance, .. } => vec![*log_noise_variance],
            _ => Vec::new(),
        }
    }

    pub fn set_params(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.num_params() {
            return Err(Error::dims("likelihood parameters", self.num_params(), values.len()));
        }
        match self {
            LikelihoodConfig::Gaussian { log_noise_variances } => log_noise_variances.copy_from_slice(values),
            LikelihoodConfig::Gprn { log_noise_variance, .. } => *log_noise_variance = values[0],
            _ => {}
        }
        Ok(())
    }

    /// Checks that `y` has the right kind and shape for this likelihood.
    pub fn check_observation(&self, y: Observation<'_>) -> Result<()> {
        match (self, y) {
            (LikelihoodConfig::Gaussian { .. } | LikelihoodConfig::Gprn { .. }, Observation::Real(v)) => {
                let p = self.output_dim().unwrap_or(0);
                if v.len() != p {
                    return Err(Error::dims("regression target", p, v.len()));
                }
                if let Some(index) = v.iter().position(|x| !x.is_finite()) {
                    return Err(Error::NonFinite {
                        context: "regression target",
                        index,
                    });
                }
                Ok(())
            }
            (LikelihoodConfig::Logistic | LikelihoodConfig::Softmax { .. }, Observation::Class(c)) => {
                let classes = self.num_classes().unwrap_or(0);
                if c >= classes {
                    return Err(Error::invalid(format!("class label {c} out of range for {classes} classes")));
                }
                Ok(())
            }
            (_, Observation::Real(_)) => Err(Error::invalid("classification likelihood given a real-valued target")),
            (_, Observation::Class(_)) => Err(Error::invalid("regression likelihood given a class label")),
        }
    }

    fn check_latent(&self, f: &[f64]) -> Result<()> {
        if f.len() != self.num_latent() {
            return Err(Error::dims("latent vector", self.num_latent(), f.len()));
        }
        if let Some(index) = f.iter().position(|v| v.is_nan()) {
            return Err(Error::NonFinite {
                context: "latent vector",
                index,
            });
        }
        Ok(())
    }

    /// `log p(y | f)`.
    pub fn log_density(&self, y: Observation<'_>, f: &[f64]) -> Result<f64> {
        self.check_latent(f)?;
        self.check_observation(y)?;
        Ok(self.eval(y, f, None, None))
    }

    /// `log p(y | f)` with `∂/∂f` and `∂/∂(log σ²)`.
    pub fn log_density_grad(&self, y: Observation<'_>, f: &[f64]) -> Result<LikelihoodGrad> {
        self.check_latent(f)?;
        self.check_observation(y)?;
        let mut df = vec![0.0; f.len()];
        let mut dparams = vec![0.0; self.num_params()];
        let value = self.eval(y, f, Some(&mut df), Some(&mut dparams));
        Ok(LikelihoodGrad { value, df, dparams })
    }

    /// Unchecked evaluation. `df` is overwritten; `dparams` is accumulated into.
    pub(crate) fn eval(
        &self,
        y: Observation<'_>,
        f: &[f64],
        df: Option<&mut [f64]>,
        dparams: Option<&mut [f64]>,
    ) -> f64 {
        match (self, y) {
            (LikelihoodConfig::Gaussian { log_noise_variances }, Observation::Real(y)) => {
                let mut total = 0.0;
                let mut df = df;
                let mut dparams = dparams;
                for p in 0..y.len() {
                    let lv = log_noise_variances[p];
                    let inv = (-lv).exp();
                    let r = y[p] - f[p];
                    total += -HALF_LN_2PI - 0.5 * lv - 0.5 * r * r * inv;
                    if let Some(df) = df.as_deref_mut() {
                        df[p] = r * inv;
                    }
                    if let Some(dp) = dparams.as_deref_mut() {
                        dp[p] += -0.5 + 0.5 * r * r * inv;
                    }
                }
                total
            }
            (LikelihoodConfig::Logistic, Observation::Class(c)) => {
                let x = f[0];
                if let Some(df) = df {
                    df[0] = c as f64 - sigmoid(x);
                }
                if c == 1 {
                    -softplus(-x)
                } else {
                    -softplus(x)
                }
            }
            (LikelihoodConfig::Softmax { .. }, Observation::Class(c)) => {
                let lse = logsumexp_nonempty(f);
                if let Some(df) = df {
                    for (d, v) in df.iter_mut().zip(f) {
                        *d = -(v - lse).exp();
                    }
                    df[c] += 1.0;
                }
                f[c] - lse
            }
            (
                LikelihoodConfig::Gprn {
                    outputs,
                    nodes,
                    log_noise_variance,
                },
                Observation::Real(y),
            ) => {
                let (p_count, q_count) = (*outputs, *nodes);
                let (v, w) = f.split_at(q_count);
                let inv = (-log_noise_variance).exp();
                let mut total = 0.0;
                let mut sq = 0.0;
                let mut df = df;
                if let Some(df) = df.as_deref_mut() {
                    df.iter_mut().for_each(|d| *d = 0.0);
                }
                for p in 0..p_count {
                    let row = &w[p * q_count..(p + 1) * q_count];
                    let mean: f64 = row.iter().zip(v).map(|(a, b)| a * b).sum();
                    let r = y[p] - mean;
                    sq += r * r;
                    total += -HALF_LN_2PI - 0.5 * log_noise_variance - 0.5 * r * r * inv;
                    if let Some(df) = df.as_deref_mut() {
                        let rs = r * inv;
                        let (dv, dw) = df.split_at_mut(q_count);
                        for q in 0..q_count {
                            dv[q] += rs * row[q];
                            dw[p * q_count + q] = rs * v[q];
                        }
                    }
                }
                if let Some(dp) = dparams {
                    dp[0] += -0.5 * p_count as f64 + 0.5 * sq * inv;
                }
                total
            }
            _ => f64::NAN,
        }
    }

    /// Noiseless regression mean for a latent vector.
    fn regression_mean(&self, f: &[f64], out: &mut [f64]) {
        match self {
            LikelihoodConfig::Gaussian { .. } => out.copy_from_slice(&f[..out.len()]),
            LikelihoodConfig::Gprn { outputs, nodes, .. } => {
                let (v, w) = f.split_at(*nodes);
                for p in 0..*outputs {
                    out[p] = w[p * nodes..(p + 1) * nodes].iter().zip(v).map(|(a, b)| a * b).sum();
                }
            }
            _ => {}
        }
    }

    /// Predictive summary from `S × Q` latent samples.
    ///
    /// Class probabilities are averaged over samples; regression variance is
    /// the population (1/S) sample variance of the noiseless mean plus the
    /// noise variance.
    pub fn predict(&self, samples: &DenseMatrix) -> Result<Prediction> {
        let s = samples.rows();
        if s == 0 {
            return Err(Error::Empty("prediction samples"));
        }
        if samples.cols() != self.num_latent() {
            return Err(Error::dims("prediction samples", self.num_latent(), samples.cols()));
        }
        match self {
            LikelihoodConfig::Logistic | LikelihoodConfig::Softmax { .. } => {
                let c = self.num_classes().unwrap_or(2);
                let mut probabilities = vec![0.0; c];
                let mut buf = vec![0.0; c];
                for i in 0..s {
                    let f = samples.row(i);
                    if let LikelihoodConfig::Logistic = self {
                        let p1 = sigmoid(f[0]);
                        buf[0] = 1.0 - p1;
                        buf[1] = p1;
                    } else {
                        softmax_into(f, &mut buf);
                    }
                    for (a, b) in probabilities.iter_mut().zip(&buf) {
                        *a += b;
                    }
                }
                let total: f64 = probabilities.iter().sum();
                probabilities.iter_mut().for_each(|p| *p /= total);
                let mut label = 0;
                for (k, p) in probabilities.iter().enumerate() {
                    if *p > probabilities[label] {
                        label = k;
                    }
                }
                Ok(Prediction::Classes { probabilities, label })
            }
            LikelihoodConfig::Gaussian { .. } | LikelihoodConfig::Gprn { .. } => {
                let p = self.output_dim().unwrap_or(0);
                let mut sum = vec![0.0; p];
                let mut sum_sq = vec![0.0; p];
                let mut buf = vec![0.0; p];
                let means: Vec<Vec<f64>> = (0..s)
                    .map(|i| {
                        self.regression_mean(samples.row(i), &mut buf);
                        buf.clone()
                    })
                    .collect();
                for m in &means {
                    for (a, v) in sum.iter_mut().zip(m) {
                        *a += v;
                    }
                }
                let mean: Vec<f64> = sum.iter().map(|v| v / s as f64).collect();
                for m in &means {
                    for ((a, v), mu) in sum_sq.iter_mut().zip(m).zip(&mean) {
                        *a += (v - mu) * (v - mu);
                    }
                }
                let noise: Vec<f64> = match self {
                    LikelihoodConfig::Gaussian { log_noise_variances } => {
                        log_noise_variances.iter().map(|v| v.exp()).collect()
                    }
                    LikelihoodConfig::Gprn { log_noise_variance, .. } => vec![log_noise_variance.exp(); p],
                    _ => unreachable!(),
                };
                let variance = sum_sq.iter().zip(&noise).map(|(v, n)| v / s as f64 + n).collect();
                Ok(Prediction::Real { mean, variance })
            }
        }
    }

    /// Monte Carlo log predictive density `log (1/S) Σₛ p(y | fₛ)`.
    pub fn log_predictive_density(&self, y: Observation<'_>, samples: &DenseMatrix) -> Result<f64> {
        let s = samples.rows();
        if s == 0 {
            return Err(Error::Empty("prediction samples"));
        }
        self.check_observation(y)?;
        let logs: Vec<f64> = (0..s).map(|i| self.eval(y, samples.row(i), None, None)).collect();
        Ok(logsumexp_nonempty(&logs) - (s as f64).ln())
    }
}

/// `log 𝒩(y; mean, variance)`.
pub fn log_normal_density(y: f64, mean: f64, variance: f64) -> f64 {
    let r = y - mean;
    -0.5 * (2.0 * PI * variance).ln() - 0.5 * r * r / variance
}
