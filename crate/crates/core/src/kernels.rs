//! Covariance functions: squared exponential with automatic relevance
//! determination, and the multi-layer arc-cosine kernel.
//!
//! All hyperparameters live in log space. The squared exponential is
//! `σ² exp(-Σᵢ (xᵢ - x'ᵢ)² / ℓᵢ²)` with no factor ½ in the exponent.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{dot, DenseMatrix};

/// Squared-exponential hyperparameters.
///
/// When `isotropic` the single entry of `log_lengthscales` is shared by all
/// `input_dim` dimensions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RbfArdParams {
    pub log_variance: f64,
    pub log_lengthscales: Vec<f64>,
    pub isotropic: bool,
    pub input_dim: usize,
}

impl RbfArdParams {
    pub fn ard(log_variance: f64, log_lengthscales: Vec<f64>) -> Self {
        let input_dim = log_lengthscales.len();
        RbfArdParams {
            log_variance,
            log_lengthscales,
            isotropic: false,
            input_dim,
        }
    }

    pub fn isotropic(log_variance: f64, log_lengthscale: f64, input_dim: usize) -> Self {
        RbfArdParams {
            log_variance,
            log_lengthscales: vec![log_lengthscale],
            isotropic: true,
            input_dim,
        }
    }

    fn inverse_lengthscales(&self) -> Vec<f64> {
        if self.isotropic {
            vec![(-self.log_lengthscales[0]).exp(); self.input_dim]
        } else {
            self.log_lengthscales.iter().map(|l| (-l).exp()).collect()
        }
    }
}

/// Arc-cosine kernel of a fixed degree (0, 1 or 2) and depth (≥ 1), with a
/// learnable output scale `exp(log_variance)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArcCosineParams {
    pub degree: u32,
    pub depth: u32,
    pub log_variance: f64,
}

impl ArcCosineParams {
    pub fn new(degree: u32, depth: u32, log_variance: f64) -> Result<Self> {
        if degree > 2 {
            return Err(Error::invalid(format!("arc-cosine degree must be 0, 1 or 2, got {degree}")));
        }
        if depth == 0 {
            return Err(Error::invalid("arc-cosine depth must be at least 1"));
        }
        Ok(ArcCosineParams {
            degree,
            depth,
            log_variance,
        })
    }
}

/// Hyperparameters of one latent process.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum KernelParams {
    Rbf(RbfArdParams),
    ArcCosine(ArcCosineParams),
}

/// Vector-Jacobian product of a Gram matrix: `Σ_ab W_ab ∂K_ab/∂·`.
#[derive(Debug, Clone)]
pub struct KernelVjp {
    pub params: Vec<f64>,
    pub x1: Option<DenseMatrix>,
    pub x2: Option<DenseMatrix>,
}

impl KernelParams {
    pub fn input_dim(&self) -> Option<usize> {
        match self {
            KernelParams::Rbf(p) => Some(p.input_dim),
            KernelParams::ArcCosine(_) => None,
        }
    }

    /// Number of unconstrained (optimizable) parameters.
    pub fn num_params(&self) -> usize {
        match self {
            KernelParams::Rbf(p) => 1 + p.log_lengthscales.len(),
            KernelParams::ArcCosine(_) => 1,
        }
    }

    /// Parameters in gradient order: log-variance first, then log-lengthscales.
    pub fn to_vec(&self) -> Vec<f64> {
        match self {
            KernelParams::Rbf(p) => {
                let mut v = vec![p.log_variance];
                v.extend_from_slice(&p.log_lengthscales);
                v
            }
            KernelParams::ArcCosine(p) => vec![p.log_variance],
        }
    }

    pub fn set_from_slice(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.num_params() {
            return Err(Error::dims("kernel parameters", self.num_params(), values.len()));
        }
        match self {
            KernelParams::Rbf(p) => {
                p.log_variance = values[0];
                p.log_lengthscales.copy_from_slice(&values[1..]);
            }
            KernelParams::ArcCosine(p) => p.log_variance = values[0],
        }
        Ok(())
    }

    pub fn log_variance(&self) -> f64 {
        match self {
            KernelParams::Rbf(p) => p.log_variance,
            KernelParams::ArcCosine(p) => p.log_variance,
        }
    }

    fn check_dim(&self, d: usize) -> Result<()> {
        match self.input_dim() {
            Some(expected) if expected != d => Err(Error::dims("kernel input dimension", expected, d)),
            _ => Ok(()),
        }
    }

    /// Kernel value `κ(x, x2)`.
    pub fn eval(&self, x: &[f64], x2: &[f64]) -> Result<f64> {
        if x.len() != x2.len() {
            return Err(Error::dims("kernel inputs", x.len(), x2.len()));
        }
        self.check_dim(x.len())?;
        match self {
            KernelParams::Rbf(p) => {
                let inv = p.inverse_lengthscales();
                let r2: f64 = x
                    .iter()
                    .zip(x2)
                    .zip(&inv)
                    .map(|((a, b), il)| {
                        let d = (a - b) * il;
                        d * d
                    })
                    .sum();
                Ok(p.log_variance.exp() * (-r2).exp())
            }
            KernelParams::ArcCosine(p) => {
                let a = dot(x, x);
                let b = dot(x2, x2);
                if a == 0.0 || b == 0.0 {
                    return Err(Error::invalid("arc-cosine kernel is undefined for zero-norm inputs"));
                }
                let c = dot(x, x2);
                let phi = vector_angle(x, x2, a.sqrt(), b.sqrt());
                Ok(p.log_variance.exp() * arc_forward(p.degree, p.depth, a, b, c, phi))
            }
        }
    }

    /// Gram matrix `K[a, b] = κ(X1[a], X2[b])`.
    pub fn gram(&self, x1: &DenseMatrix, x2: &DenseMatrix) -> Result<DenseMatrix> {
        if x1.cols() != x2.cols() {
            return Err(Error::dims("gram column count", x1.cols(), x2.cols()));
        }
        self.check_dim(x1.cols())?;
        match self {
            KernelParams::Rbf(p) => Ok(rbf_gram(p, x1, x2, false)),
            KernelParams::ArcCosine(p) => arc_gram(p, x1, x2, false),
        }
    }

    /// Gram matrix of a set with itself; exactly symmetric.
    pub fn gram_sym(&self, x: &DenseMatrix) -> Result<DenseMatrix> {
        self.check_dim(x.cols())?;
        match self {
            KernelParams::Rbf(p) => Ok(rbf_gram(p, x, x, true)),
            KernelParams::ArcCosine(p) => arc_gram(p, x, x, true),
        }
    }

    /// `κ(x, x)` for every row.
    pub fn gram_diag(&self, x: &DenseMatrix) -> Result<Vec<f64>> {
        self.check_dim(x.cols())?;
        match self {
            KernelParams::Rbf(p) => Ok(vec![p.log_variance.exp(); x.rows()]),
            KernelParams::ArcCosine(p) => {
                let scale = p.log_variance.exp();
                x.row_sq_norms()
                    .into_iter()
                    .map(|a| {
                        if a == 0.0 {
                            Err(Error::invalid("arc-cosine kernel is undefined for zero-norm inputs"))
                        } else {
                            Ok(scale * arc_self(p.degree, p.depth, a))
                        }
                    })
                    .collect()
            }
        }
    }

    /// `∂K/∂η` for every unconstrained parameter η, in [`KernelParams::to_vec`] order.
    pub fn gram_grad(&self, x1: &DenseMatrix, x2: &DenseMatrix) -> Result<Vec<DenseMatrix>> {
        let k = self.gram(x1, x2)?;
        match self {
            KernelParams::Rbf(p) => {
                let inv = p.inverse_lengthscales();
                let mut out = vec![k.clone()];
                let per_dim: Vec<DenseMatrix> = (0..x1.cols())
                    .map(|i| {
                        DenseMatrix::from_fn(x1.rows(), x2.rows(), |a, b| {
                            let d = (x1[(a, i)] - x2[(b, i)]) * inv[i];
                            2.0 * d * d * k[(a, b)]
                        })
                    })
                    .collect();
                if p.isotropic {
                    let mut total = DenseMatrix::zeros(x1.rows(), x2.rows());
                    for m in &per_dim {
                        total.add_scaled(1.0, m);
                    }
                    out.push(total);
                } else {
                    out.extend(per_dim);
                }
                Ok(out)
            }
            KernelParams::ArcCosine(_) => Ok(vec![k]),
        }
    }

    /// `Σ_ab W_ab ∂K_ab/∂·` for the parameters and optionally both input sets.
    pub fn gram_vjp(
        &self,
        x1: &DenseMatrix,
        x2: &DenseMatrix,
        weights: &DenseMatrix,
        want_x1: bool,
        want_x2: bool,
    ) -> Result<KernelVjp> {
        if x1.cols() != x2.cols() {
            return Err(Error::dims("gram column count", x1.cols(), x2.cols()));
        }
        if weights.rows() != x1.rows() || weights.cols() != x2.rows() {
            return Err(Error::dims("gram_vjp weights", x1.rows() * x2.rows(), weights.rows() * weights.cols()));
        }
        self.check_dim(x1.cols())?;
        match self {
            KernelParams::Rbf(p) => Ok(rbf_vjp(p, x1, x2, weights, want_x1, want_x2, false)),
            KernelParams::ArcCosine(p) => arc_vjp(p, x1, x2, weights, want_x1, want_x2, false),
        }
    }

    /// VJP of [`KernelParams::gram_sym`]; the input gradient accounts for `X`
    /// appearing on both sides.
    pub fn gram_sym_vjp(&self, x: &DenseMatrix, weights: &DenseMatrix, want_x: bool) -> Result<KernelVjp> {
        if weights.rows() != x.rows() || weights.cols() != x.rows() {
            return Err(Error::dims("gram_sym_vjp weights", x.rows() * x.rows(), weights.rows() * weights.cols()));
        }
        self.check_dim(x.cols())?;
        let mut v = match self {
            KernelParams::Rbf(p) => rbf_vjp(p, x, x, weights, want_x, want_x, true),
            KernelParams::ArcCosine(p) => arc_vjp(p, x, x, weights, want_x, want_x, true)?,
        };
        if let (Some(mut a), Some(b)) = (v.x1.take(), v.x2.take()) {
            a.add_scaled(1.0, &b);
            v.x1 = Some(a);
        }
        Ok(v)
    }

    /// VJP of [`KernelParams::gram_diag`].
    pub fn diag_vjp(&self, x: &DenseMatrix, weights: &[f64], want_x: bool) -> Result<KernelVjp> {
        self.check_dim(x.cols())?;
        let diag = self.gram_diag(x)?;
        let mut params = vec![0.0; self.num_params()];
        params[0] = diag.iter().zip(weights).map(|(k, w)| k * w).sum();
        let x_grad = if want_x {
            let mut g = DenseMatrix::zeros(x.rows(), x.cols());
            if let KernelParams::ArcCosine(p) = self {
                let scale = p.log_variance.exp();
                for n in 0..x.rows() {
                    let a = dot(x.row(n), x.row(n));
                    let d = scale * arc_self_derivative(p.degree, p.depth, a) * weights[n];
                    for (gi, xi) in g.row_mut(n).iter_mut().zip(x.row(n)) {
                        *gi = 2.0 * d * xi;
                    }
                }
            }
            Some(g)
        } else {
            None
        };
        Ok(KernelVjp {
            params,
            x1: x_grad,
            x2: None,
        })
    }
}

/// Below this input dimension pairwise differences are formed directly.
const DIRECT_DISTANCE_MAX_DIM: usize = 16;

fn scaled_inputs(x: &DenseMatrix, inv: &[f64]) -> DenseMatrix {
    let mut s = x.clone();
    for i in 0..s.rows() {
        for (v, il) in s.row_mut(i).iter_mut().zip(inv) {
            *v *= il;
        }
    }
    s
}

/// Squared scaled distances `Σᵢ ((x1ᵢ - x2ᵢ)/ℓᵢ)²`.
fn scaled_sq_distances(s1: &DenseMatrix, s2: &DenseMatrix, symmetric: bool) -> DenseMatrix {
    let (n1, n2) = (s1.rows(), s2.rows());
    let mut r2 = if s1.cols() < DIRECT_DISTANCE_MAX_DIM {
        DenseMatrix::from_fn(n1, n2, |a, b| {
            s1.row(a)
                .iter()
                .zip(s2.row(b))
                .map(|(u, v)| (u - v) * (u - v))
                .sum()
        })
    } else {
        let cross = s1.matmul_nt(s2);
        let q1 = s1.row_sq_norms();
        let q2 = if symmetric { q1.clone() } else { s2.row_sq_norms() };
        DenseMatrix::from_fn(n1, n2, |a, b| (q1[a] + q2[b] - 2.0 * cross[(a, b)]).max(0.0))
    };
    if symmetric {
        for a in 0..n1 {
            r2[(a, a)] = 0.0;
        }
        r2.symmetrize_from_lower();
    }
    r2
}

fn rbf_gram(p: &RbfArdParams, x1: &DenseMatrix, x2: &DenseMatrix, symmetric: bool) -> DenseMatrix {
    let inv = p.inverse_lengthscales();
    let s1 = scaled_inputs(x1, &inv);
    let s2 = if symmetric { s1.clone() } else { scaled_inputs(x2, &inv) };
    let mut k = scaled_sq_distances(&s1, &s2, symmetric);
    let var = p.log_variance.exp();
    k.as_mut_slice().iter_mut().for_each(|r| *r = var * (-*r).exp());
    k
}

fn rbf_vjp(
    p: &RbfArdParams,
    x1: &DenseMatrix,
    x2: &DenseMatrix,
    weights: &DenseMatrix,
    want_x1: bool,
    want_x2: bool,
    symmetric: bool,
) -> KernelVjp {
    let d = x1.cols();
    let inv = p.inverse_lengthscales();
    let s1 = scaled_inputs(x1, &inv);
    let s2 = if symmetric { s1.clone() } else { scaled_inputs(x2, &inv) };
    let k = {
        let mut r2 = scaled_sq_distances(&s1, &s2, symmetric);
        let var = p.log_variance.exp();
        r2.as_mut_slice().iter_mut().for_each(|r| *r = var * (-*r).exp());
        r2
    };
    // G = W ∘ K
    let mut g = weights.clone();
    for (gv, kv) in g.as_mut_slice().iter_mut().zip(k.as_slice()) {
        *gv *= kv;
    }
    let row_sums: Vec<f64> = (0..g.rows()).map(|a| g.row(a).iter().sum()).collect();
    let col_sums = g.matvec_t(&vec![1.0; g.rows()]);
    let total: f64 = row_sums.iter().sum();

    // Σ_ab G_ab (s1_ai - s2_bi)² per dimension, and the products needed for inputs.
    let mut per_dim = vec![0.0; d];
    let gs2 = g.matmul(&s2); // n1 × d
    let gts1 = if want_x2 { Some(g.matmul_tn(&s1)) } else { None }; // n2 × d
    if d < DIRECT_DISTANCE_MAX_DIM {
        for a in 0..g.rows() {
            let ga = g.row(a);
            let sa = s1.row(a);
            for (b, gab) in ga.iter().enumerate() {
                if *gab == 0.0 {
                    continue;
                }
                let sb = s2.row(b);
                for i in 0..d {
                    let diff = sa[i] - sb[i];
                    per_dim[i] += gab * diff * diff;
                }
            }
        }
    } else {
        for i in 0..d {
            let mut acc = 0.0;
            for a in 0..g.rows() {
                let v = s1[(a, i)];
                acc += row_sums[a] * v * v - 2.0 * v * gs2[(a, i)];
            }
            for b in 0..g.cols() {
                let v = s2[(b, i)];
                acc += col_sums[b] * v * v;
            }
            per_dim[i] = acc;
        }
    }
    let mut params = vec![total];
    if p.isotropic {
        params.push(2.0 * per_dim.iter().sum::<f64>());
    } else {
        params.extend(per_dim.iter().map(|v| 2.0 * v));
    }

    // ∂K_ab/∂x1_ai = -2 K_ab (x1_ai - x2_bi) / ℓᵢ²  =  -2 K_ab (s1_ai - s2_bi) / ℓᵢ
    let x1_grad = want_x1.then(|| {
        DenseMatrix::from_fn(x1.rows(), d, |a, i| -2.0 * inv[i] * (row_sums[a] * s1[(a, i)] - gs2[(a, i)]))
    });
    let x2_grad = gts1.map(|gts1| {
        DenseMatrix::from_fn(x2.rows(), d, |b, i| 2.0 * inv[i] * (gts1[(b, i)] - col_sums[b] * s2[(b, i)]))
    });
    KernelVjp {
        params,
        x1: x1_grad,
        x2: x2_grad,
    }
}

/// `J_d(φ)` for degrees 0, 1, 2.
fn arc_j(degree: u32, phi: f64) -> f64 {
    let (s, c) = phi.sin_cos();
    match degree {
        0 => PI - phi,
        1 => s + (PI - phi) * c,
        _ => 3.0 * s * c + (PI - phi) * (1.0 + 2.0 * c * c),
    }
}

/// `-J_d'(φ) / sin φ`, the factor relating `dJ/dcos φ`.
fn arc_h(degree: u32, phi: f64) -> f64 {
    match degree {
        0 => {
            let s = phi.sin();
            if s < 1e-12 {
                0.0
            } else {
                1.0 / s
            }
        }
        1 => PI - phi,
        _ => 4.0 * arc_j(1, phi),
    }
}

/// `J_d(0) / π`: the factor in the self-covariance recursion.
fn arc_self_factor(degree: u32) -> f64 {
    match degree {
        0 | 1 => 1.0,
        _ => 3.0,
    }
}

/// Angle between `x` and `y` (with norms `nx`, `ny`) as
/// `2·atan2(‖x̂ − ŷ‖, ‖x̂ + ŷ‖)`, which stays accurate near 0 and π where
/// `acos` of the cosine loses half the digits.
fn vector_angle(x: &[f64], y: &[f64], nx: f64, ny: f64) -> f64 {
    let (mut minus, mut plus) = (0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (u, v) = (a / nx, b / ny);
        minus += (u - v) * (u - v);
        plus += (u + v) * (u + v);
    }
    2.0 * minus.sqrt().atan2(plus.sqrt())
}

fn layer_angle(level: usize, base_angle: f64, rho: f64) -> f64 {
    if level == 0 {
        base_angle
    } else {
        rho.acos()
    }
}

/// Unscaled arc-cosine value from the linear-kernel quantities
/// `a = x·x`, `b = x'·x'`, `c = x·x'` and the input angle; each layer
/// applies `k⁽ˡ⁺¹⁾ = (1/π) (k_xx k_x'x')^{d/2} J_d(φ⁽ˡ⁾)`.
fn arc_forward(degree: u32, depth: u32, mut a: f64, mut b: f64, mut c: f64, base_angle: f64) -> f64 {
    let f = arc_self_factor(degree);
    let d = degree as i32;
    for level in 0..depth as usize {
        let ab = a * b;
        let rho = (c / ab.sqrt()).clamp(-1.0, 1.0);
        let phi = layer_angle(level, base_angle, rho);
        c = ab.powf(0.5 * degree as f64) * arc_j(degree, phi) / PI;
        a = f * a.powi(d);
        b = f * b.powi(d);
    }
    c
}

fn arc_self(degree: u32, depth: u32, mut a: f64) -> f64 {
    let f = arc_self_factor(degree);
    for _ in 0..depth {
        a = f * a.powi(degree as i32);
    }
    a
}

/// `d arc_self / d a₀`.
fn arc_self_derivative(degree: u32, depth: u32, a0: f64) -> f64 {
    let f = arc_self_factor(degree);
    let d = degree as i32;
    let mut a = a0;
    let mut deriv = 1.0;
    for _ in 0..depth {
        deriv *= match degree {
            0 => 0.0,
            _ => f * d as f64 * a.powi(d - 1),
        };
        a = f * a.powi(d);
    }
    deriv
}

/// Gradient of the unscaled pair value w.r.t. `(a₀, b₀, c₀)`.
fn arc_backward(degree: u32, depth: u32, a0: f64, b0: f64, c0: f64, base_angle: f64) -> (f64, f64, f64, f64) {
    let f = arc_self_factor(degree);
    let d = degree as i32;
    let half_d = 0.5 * degree as f64;
    let depth = depth as usize;
    let mut levels = Vec::with_capacity(depth);
    let (mut a, mut b, mut c) = (a0, b0, c0);
    for level in 0..depth {
        levels.push((a, b, c));
        let ab = a * b;
        let rho = (c / ab.sqrt()).clamp(-1.0, 1.0);
        c = ab.powf(half_d) * arc_j(degree, layer_angle(level, base_angle, rho)) / PI;
        a = f * a.powi(d);
        b = f * b.powi(d);
    }
    let value = c;
    // adjoints of (a, b, c) at the current level
    let (mut ga, mut gb, mut gc) = (0.0, 0.0, 1.0);
    for (level, &(a, b, c)) in levels.iter().enumerate().rev() {
        let ab = a * b;
        let sq = ab.sqrt();
        let raw_rho = c / sq;
        let rho = raw_rho.clamp(-1.0, 1.0);
        let phi = layer_angle(level, base_angle, rho);
        let s = ab.powf(half_d) / PI;
        let out = s * arc_j(degree, phi);
        let h = if raw_rho.abs() >= 1.0 { 0.0 } else { arc_h(degree, phi) };
        let dc = s * h / sq;
        let da = half_d * out / a - s * h * rho / (2.0 * a);
        let db = half_d * out / b - s * h * rho / (2.0 * b);
        let self_da = match degree {
            0 => 0.0,
            _ => f * d as f64 * a.powi(d - 1),
        };
        let self_db = match degree {
            0 => 0.0,
            _ => f * d as f64 * b.powi(d - 1),
        };
        let next_ga = gc * da + ga * self_da;
        let next_gb = gc * db + gb * self_db;
        gc *= dc;
        ga = next_ga;
        gb = next_gb;
    }
    (value, ga, gb, gc)
}

fn arc_gram(p: &ArcCosineParams, x1: &DenseMatrix, x2: &DenseMatrix, symmetric: bool) -> Result<DenseMatrix> {
    let a = x1.row_sq_norms();
    let b = if symmetric { a.clone() } else { x2.row_sq_norms() };
    if a.iter().chain(&b).any(|v| *v == 0.0) {
        return Err(Error::invalid("arc-cosine kernel is undefined for zero-norm inputs"));
    }
    let cross = x1.matmul_nt(x2);
    let scale = p.log_variance.exp();
    let mut k = DenseMatrix::from_fn(x1.rows(), x2.rows(), |i, j| {
        if symmetric && i == j {
            scale * arc_self(p.degree, p.depth, a[i])
        } else {
            let phi = vector_angle(x1.row(i), x2.row(j), a[i].sqrt(), b[j].sqrt());
            scale * arc_forward(p.degree, p.depth, a[i], b[j], cross[(i, j)], phi)
        }
    });
    if symmetric {
        k.symmetrize_from_lower();
    }
    Ok(k)
}

fn arc_vjp(
    p: &ArcCosineParams,
    x1: &DenseMatrix,
    x2: &DenseMatrix,
    weights: &DenseMatrix,
    want_x1: bool,
    want_x2: bool,
    symmetric: bool,
) -> Result<KernelVjp> {
    let a = x1.row_sq_norms();
    let b = if symmetric { a.clone() } else { x2.row_sq_norms() };
    if a.iter().chain(&b).any(|v| *v == 0.0) {
        return Err(Error::invalid("arc-cosine kernel is undefined for zero-norm inputs"));
    }
    let cross = x1.matmul_nt(x2);
    let scale = p.log_variance.exp();
    let (n1, n2) = (x1.rows(), x2.rows());
    let mut g_a = vec![0.0; n1];
    let mut g_b = vec![0.0; n2];
    let mut g_c = DenseMatrix::zeros(n1, n2);
    let mut total = 0.0;
    for i in 0..n1 {
        for j in 0..n2 {
            let w = weights[(i, j)];
            if symmetric && i == j {
                let v = arc_self(p.degree, p.depth, a[i]);
                total += w * scale * v;
                // the diagonal entry depends on x_i once; attribute it to x1
                g_a[i] += w * scale * arc_self_derivative(p.degree, p.depth, a[i]);
                continue;
            }
            let phi = vector_angle(x1.row(i), x2.row(j), a[i].sqrt(), b[j].sqrt());
            let (v, da, db, dc) = arc_backward(p.degree, p.depth, a[i], b[j], cross[(i, j)], phi);
            total += w * scale * v;
            if w != 0.0 {
                g_a[i] += w * scale * da;
                g_b[j] += w * scale * db;
                g_c[(i, j)] = w * scale * dc;
            }
        }
    }
    let x1_grad = want_x1.then(|| {
        let mut g = g_c.matmul(x2);
        for i in 0..n1 {
            for (gv, xv) in g.row_mut(i).iter_mut().zip(x1.row(i)) {
                *gv += 2.0 * g_a[i] * xv;
            }
        }
        g
    });
    let x2_grad = want_x2.then(|| {
        let mut g = g_c.matmul_tn(x1);
        for j in 0..n2 {
            for (gv, xv) in g.row_mut(j).iter_mut().zip(x2.row(j)) {
                *gv += 2.0 * g_b[j] * xv;
            }
        }
        g
    });
    Ok(KernelVjp {
        params: vec![total],
        x1: x1_grad,
        x2: x2_grad,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rbf(d: usize) -> KernelParams {
        KernelParams::Rbf(RbfArdParams::ard(0.0, vec![0.0; d]))
    }

    #[test]
    fn rbf_spot_values() {
        let k = rbf(3);
        assert_eq!(k.eval(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]).unwrap(), 1.0);
        let v = k.eval(&[0.0, 0.0, 0.0], &[0.0, 1.0, 0.0]).unwrap();
        assert!((v - (-1.0f64).exp()).abs() < 1e-12);
        let flat = KernelParams::Rbf(RbfArdParams::ard(0.7, vec![1e8f64.ln(); 3]));
        let v = flat.eval(&[5.0, -3.0, 1.0], &[-2.0, 8.0, 0.0]).unwrap();
        assert!((v - 0.7f64.exp()).abs() < 1e-12);
        assert!(k.eval(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn arc_cosine_spot_values() {
        let k0 = KernelParams::ArcCosine(ArcCosineParams::new(0, 1, 0.0).unwrap());
        assert!((k0.eval(&[1.0, 0.0], &[0.0, 2.0]).unwrap() - 0.5).abs() < 1e-12);
        assert!((k0.eval(&[1.0, 2.0], &[1.0, 2.0]).unwrap() - 1.0).abs() < 1e-12);
        let k1 = KernelParams::ArcCosine(ArcCosineParams::new(1, 1, 0.0).unwrap());
        let x = [0.5, -1.5, 2.0];
        let n2 = dot(&x, &x);
        assert!((k1.eval(&x, &x).unwrap() - n2).abs() < 1e-12);
        assert!(k1.eval(&[0.0, 0.0], &[1.0, 0.0]).is_err());
        assert!(ArcCosineParams::new(3, 1, 0.0).is_err());
        assert!(ArcCosineParams::new(1, 0, 0.0).is_err());
    }

    #[test]
    fn arc_cosine_scale_and_depth_recursion() {
        // degree 1, depth 2 by hand: level-1 values then one more layer
        let x = [1.0, 0.0];
        let y = [1.0, 1.0];
        let phi0 = (1.0 / 2f64.sqrt()).acos();
        let kxy = 2f64.sqrt() * arc_j(1, phi0) / PI;
        let kxx = 1.0;
        let kyy = 2.0;
        let phi1 = (kxy / (kxx * kyy as f64).sqrt()).acos();
        let expect = (kxx * kyy as f64).sqrt() * arc_j(1, phi1) / PI;
        let k = KernelParams::ArcCosine(ArcCosineParams::new(1, 2, 0.3).unwrap());
        assert!((k.eval(&x, &y).unwrap() - 0.3f64.exp() * expect).abs() < 1e-12);
    }

    #[test]
    fn gram_single_point_and_diag() {
        let k = KernelParams::Rbf(RbfArdParams::ard(0.4, vec![0.1, -0.2]));
        let x = DenseMatrix::from_rows(&[[0.3, 0.1]]).unwrap();
        let g = k.gram_sym(&x).unwrap();
        assert_eq!(g.as_slice(), &[0.4f64.exp()]);
        assert_eq!(k.gram_diag(&x).unwrap(), vec![0.4f64.exp()]);
        assert!(k.gram(&x, &DenseMatrix::zeros(1, 3)).is_err());
    }

    #[test]
    fn gram_grad_of_log_variance_is_gram() {
        let x = DenseMatrix::from_fn(4, 2, |i, j| (i as f64 * 0.7 - j as f64 * 0.3).sin() + 1.5);
        for k in [
            KernelParams::Rbf(RbfArdParams::ard(0.2, vec![0.1, 0.4])),
            KernelParams::ArcCosine(ArcCosineParams::new(1, 3, -0.2).unwrap()),
        ] {
            let gram = k.gram(&x, &x).unwrap();
            let grads = k.gram_grad(&x, &x).unwrap();
            assert_eq!(grads.len(), k.num_params());
            for (a, b) in grads[0].as_slice().iter().zip(gram.as_slice()) {
                assert!((a - b).abs() < 1e-14);
            }
        }
    }
}
