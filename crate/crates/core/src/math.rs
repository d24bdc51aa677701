//! Dense linear algebra, log-domain reductions and replayable random streams.
//!
//! Everything here is deliberately small: the model only ever needs row-major
//! dense storage, Cholesky factors of kernel matrices, triangular solves and
//! a handful of products. Products go through `matrixmultiply`.

use std::ops::{Index, IndexMut};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Row-major dense matrix of `f64`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl DenseMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        DenseMatrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::dims("DenseMatrix::from_vec", rows * cols, data.len()));
        }
        Ok(DenseMatrix { rows, cols, data })
    }

    /// Builds a matrix from equal-length rows.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::dims("DenseMatrix::from_rows", cols, r.len()));
            }
            data.extend_from_slice(r);
        }
        Ok(DenseMatrix {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        DenseMatrix { rows, cols, data }
    }

    pub fn column_vector(values: &[f64]) -> Self {
        DenseMatrix {
            rows: values.len(),
            cols: 1,
            data: values.to_vec(),
        }
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self[(i, j)]).collect()
    }

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn transpose(&self) -> DenseMatrix {
        let mut t = DenseMatrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        t
    }

    pub fn select_rows(&self, indices: &[usize]) -> DenseMatrix {
        let mut out = DenseMatrix::zeros(indices.len(), self.cols);
        for (r, &i) in indices.iter().enumerate() {
            out.row_mut(r).copy_from_slice(self.row(i));
        }
        out
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.rows.min(self.cols)).map(|i| self[(i, i)]).collect()
    }

    pub fn add_diagonal(&mut self, value: f64) {
        for i in 0..self.rows.min(self.cols) {
            self[(i, i)] += value;
        }
    }

    pub fn trace(&self) -> f64 {
        self.diagonal().iter().sum()
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn scale(&mut self, factor: f64) {
        self.data.iter_mut().for_each(|v| *v *= factor);
    }

    /// `self += factor * other`.
    pub fn add_scaled(&mut self, factor: f64, other: &DenseMatrix) {
        debug_assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += factor * b;
        }
    }

    /// Copies the lower triangle onto the upper one.
    pub fn symmetrize_from_lower(&mut self) {
        for i in 0..self.rows {
            for j in 0..i {
                let v = self.data[i * self.cols + j];
                self.data[j * self.cols + i] = v;
            }
        }
    }

    /// `self · other`
    pub fn matmul(&self, other: &DenseMatrix) -> DenseMatrix {
        gemm(self, false, other, false)
    }

    /// `self · otherᵀ`
    pub fn matmul_nt(&self, other: &DenseMatrix) -> DenseMatrix {
        gemm(self, false, other, true)
    }

    /// `selfᵀ · other`
    pub fn matmul_tn(&self, other: &DenseMatrix) -> DenseMatrix {
        gemm(self, true, other, false)
    }

    pub fn matvec(&self, v: &[f64]) -> Vec<f64> {
        debug_assert_eq!(self.cols, v.len());
        (0..self.rows).map(|i| dot(self.row(i), v)).collect()
    }

    /// `selfᵀ · v`
    pub fn matvec_t(&self, v: &[f64]) -> Vec<f64> {
        debug_assert_eq!(self.rows, v.len());
        let mut out = vec![0.0; self.cols];
        for (i, &w) in v.iter().enumerate() {
            if w != 0.0 {
                axpy(w, self.row(i), &mut out);
            }
        }
        out
    }

    pub fn row_sq_norms(&self) -> Vec<f64> {
        (0..self.rows).map(|i| dot(self.row(i), self.row(i))).collect()
    }
}

impl Index<(usize, usize)> for DenseMatrix {
    type Output = f64;
    #[inline]
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        &self.data[i * self.cols + j]
    }
}

impl IndexMut<(usize, usize)> for DenseMatrix {
    #[inline]
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        &mut self.data[i * self.cols + j]
    }
}

fn gemm(a: &DenseMatrix, ta: bool, b: &DenseMatrix, tb: bool) -> DenseMatrix {
    let (m, k) = if ta { (a.cols, a.rows) } else { (a.rows, a.cols) };
    let (kb, n) = if tb { (b.cols, b.rows) } else { (b.rows, b.cols) };
    assert_eq!(k, kb, "inner dimensions differ in matrix product");
    let mut c = DenseMatrix::zeros(m, n);
    if m == 0 || n == 0 || k == 0 {
        return c;
    }
    let (rsa, csa) = if ta { (1, a.cols) } else { (a.cols, 1) };
    let (rsb, csb) = if tb { (1, b.cols) } else { (b.cols, 1) };
    // SAFETY: strides describe exactly the row-major buffers above, whose
    // lengths are rows * cols; c is freshly allocated with m * n entries.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            rsa as isize,
            csa as isize,
            b.data.as_ptr(),
            rsb as isize,
            csb as isize,
            0.0,
            c.data.as_mut_ptr(),
            n as isize,
            1,
        );
    }
    c
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        let i = 4 * c;
        acc[0] += a[i] * b[i];
        acc[1] += a[i + 1] * b[i + 1];
        acc[2] += a[i + 2] * b[i + 2];
        acc[3] += a[i + 3] * b[i + 3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for i in 4 * chunks..a.len() {
        s += a[i] * b[i];
    }
    s
}

/// `y += alpha * x`
#[inline]
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// Lower-triangular Cholesky factor `L` with `L·Lᵀ = A`.
#[derive(Debug, Clone, PartialEq)]
pub struct LowerTriangular(DenseMatrix);

impl LowerTriangular {
    /// Takes the lower triangle of `m`; the strict upper part is zeroed.
    pub fn from_lower(m: &DenseMatrix) -> Result<Self> {
        if !m.is_square() {
            return Err(Error::dims("LowerTriangular", m.rows(), m.cols()));
        }
        let mut l = m.clone();
        for i in 0..l.rows {
            for j in i + 1..l.cols {
                l[(i, j)] = 0.0;
            }
        }
        Ok(LowerTriangular(l))
    }

    pub fn identity(n: usize) -> Self {
        LowerTriangular(DenseMatrix::identity(n))
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.0.rows
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.0[(i, j)]
    }

    pub fn as_dense(&self) -> &DenseMatrix {
        &self.0
    }

    pub fn into_dense(self) -> DenseMatrix {
        self.0
    }

    /// `L · Lᵀ`
    pub fn reconstruct(&self) -> DenseMatrix {
        let mut m = self.0.matmul_nt(&self.0);
        m.symmetrize_from_lower();
        m
    }

    /// `log |L·Lᵀ|`
    pub fn log_det(&self) -> f64 {
        2.0 * (0..self.dim()).map(|i| self.get(i, i).ln()).sum::<f64>()
    }

    /// `(L·Lᵀ)⁻¹`, exactly symmetric.
    pub fn inverse_of_product(&self) -> DenseMatrix {
        let n = self.dim();
        let linv = tri_solve(self, &DenseMatrix::identity(n), false).expect("square identity");
        let mut m = linv.matmul_tn(&linv);
        m.symmetrize_from_lower();
        m
    }

    /// Solves `(L·Lᵀ) x = b` for a matrix of right-hand sides.
    pub fn solve_product(&self, b: &DenseMatrix) -> Result<DenseMatrix> {
        let y = tri_solve(self, b, false)?;
        tri_solve(self, &y, true)
    }
}

fn check_symmetric(m: &DenseMatrix) -> Result<()> {
    if !m.is_square() {
        return Err(Error::dims("cholesky (square)", m.rows(), m.cols()));
    }
    if let Some(index) = m.as_slice().iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            context: "cholesky input",
            index,
        });
    }
    let scale = m.as_slice().iter().fold(0.0f64, |a, v| a.max(v.abs()));
    let n = m.rows();
    for i in 0..n {
        for j in 0..i {
            if (m[(i, j)] - m[(j, i)]).abs() > 1e-10 * scale.max(f64::MIN_POSITIVE) {
                return Err(Error::invalid(format!(
                    "cholesky input is not symmetric at ({i}, {j})"
                )));
            }
        }
    }
    Ok(())
}

/// Cholesky factorization of a symmetric positive-definite matrix.
///
/// Only the lower triangle is read once symmetry has been checked.
pub fn cholesky(m: &DenseMatrix) -> Result<LowerTriangular> {
    check_symmetric(m)?;
    cholesky_unchecked(m, 0.0)
}

fn cholesky_unchecked(m: &DenseMatrix, diag_shift: f64) -> Result<LowerTriangular> {
    let n = m.rows();
    let mut l = DenseMatrix::zeros(n, n);
    for i in 0..n {
        for j in 0..=i {
            let s = {
                let li = &l.data[i * n..i * n + j];
                let lj = &l.data[j * n..j * n + j];
                dot(li, lj)
            };
            if i == j {
                let pivot = m[(i, i)] + diag_shift - s;
                if pivot <= 0.0 || !pivot.is_finite() {
                    return Err(Error::NotPositiveDefinite { pivot: i, value: pivot });
                }
                l.data[i * n + i] = pivot.sqrt();
            } else {
                l.data[i * n + j] = (m[(i, j)] - s) / l.data[j * n + j];
            }
        }
    }
    Ok(LowerTriangular(l))
}

/// Number of jitter escalations tried by [`jittered_cholesky`].
pub const JITTER_ESCALATIONS: u32 = 7;

/// Cholesky with diagonal jitter `base_jitter · 10^t`, `t = 0, 1, …, 6`.
///
/// Returns the factor together with the jitter that was added. A zero
/// `base_jitter` makes a single unjittered attempt.
pub fn jittered_cholesky(m: &DenseMatrix, base_jitter: f64) -> Result<(LowerTriangular, f64)> {
    if !(base_jitter >= 0.0) {
        return Err(Error::invalid(format!("base jitter must be >= 0, got {base_jitter}")));
    }
    check_symmetric(m)?;
    if base_jitter == 0.0 {
        return cholesky_unchecked(m, 0.0).map(|l| (l, 0.0));
    }
    let mut last = None;
    for t in 0..JITTER_ESCALATIONS {
        let jitter = base_jitter * 10f64.powi(t as i32);
        match cholesky_unchecked(m, jitter) {
            Ok(l) => return Ok((l, jitter)),
            Err(e) => last = Some(e),
        }
    }
    Err(last.expect("at least one attempt"))
}

/// Solves `L x = b` (or `Lᵀ x = b` when `transpose`) column-wise.
pub fn tri_solve(l: &LowerTriangular, b: &DenseMatrix, transpose: bool) -> Result<DenseMatrix> {
    let n = l.dim();
    if b.rows() != n {
        return Err(Error::dims("tri_solve", n, b.rows()));
    }
    let k = b.cols();
    let mut x = b.clone();
    let ld = &l.0.data;
    if !transpose {
        for i in 0..n {
            let (done, rest) = x.data.split_at_mut(i * k);
            let xi = &mut rest[..k];
            for p in 0..i {
                let lip = ld[i * n + p];
                if lip != 0.0 {
                    axpy(-lip, &done[p * k..(p + 1) * k], xi);
                }
            }
            let inv = 1.0 / ld[i * n + i];
            xi.iter_mut().for_each(|v| *v *= inv);
        }
    } else {
        for i in (0..n).rev() {
            let (head, done) = x.data.split_at_mut((i + 1) * k);
            let xi = &mut head[i * k..];
            for p in i + 1..n {
                let lpi = ld[p * n + i];
                if lpi != 0.0 {
                    let off = (p - i - 1) * k;
                    axpy(-lpi, &done[off..off + k], xi);
                }
            }
            let inv = 1.0 / ld[i * n + i];
            xi.iter_mut().for_each(|v| *v *= inv);
        }
    }
    Ok(x)
}

/// `log Σ exp(vᵢ)` via max-shift.
pub fn logsumexp(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::Empty("logsumexp of an empty list"));
    }
    Ok(logsumexp_nonempty(values))
}

#[inline]
pub(crate) fn logsumexp_nonempty(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY || max == f64::INFINITY {
        return max;
    }
    if values.len() == 1 {
        return values[0];
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Counter-based random stream: a ChaCha8 key derived from `seed`, a stream
/// id and a word position. Advancing produces a new value.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RandomStream {
    pub seed: u64,
    pub stream_id: u64,
    #[serde(default)]
    pub position: u64,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl RandomStream {
    pub fn new(seed: u64, stream_id: u64) -> Self {
        RandomStream {
            seed,
            stream_id,
            position: 0,
        }
    }

    /// Child stream keyed by `key`; children of distinct keys are independent.
    pub fn split(&self, key: u64) -> RandomStream {
        let id = splitmix64(self.stream_id ^ splitmix64(key ^ 0xA076_1D64_78BD_642F));
        RandomStream {
            seed: self.seed,
            stream_id: id,
            position: 0,
        }
    }

    /// Generator positioned at this stream's current word.
    pub fn rng(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(self.stream_id);
        rng.set_word_pos(self.position as u128);
        rng
    }

    /// The stream value after the draws made with `rng`.
    pub fn after(&self, rng: &ChaCha8Rng) -> RandomStream {
        RandomStream {
            position: rng.get_word_pos() as u64,
            ..*self
        }
    }

    pub fn uniform(&self) -> (f64, RandomStream) {
        let mut rng = self.rng();
        let u = rng.random::<f64>();
        (u, self.after(&rng))
    }
}

/// `n` i.i.d. standard normal draws, plus the advanced stream.
pub fn draw_standard_normals(stream: &RandomStream, n: usize) -> (Vec<f64>, RandomStream) {
    let mut rng = stream.rng();
    let draws = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    (draws, stream.after(&rng))
}

#[inline]
pub(crate) fn fill_standard_normals(rng: &mut ChaCha8Rng, out: &mut [f64]) {
    for v in out.iter_mut() {
        *v = rng.sample(StandardNormal);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cholesky_of_identity_is_identity() {
        let l = cholesky(&DenseMatrix::identity(3)).unwrap();
        assert_eq!(l.as_dense(), &DenseMatrix::identity(3));
    }

    #[test]
    fn cholesky_two_by_two_by_hand() {
        let m = DenseMatrix::from_rows(&[[4.0, 2.0], [2.0, 3.0]]).unwrap();
        let l = cholesky(&m).unwrap();
        assert!((l.get(0, 0) - 2.0).abs() < 1e-15);
        assert!((l.get(1, 0) - 1.0).abs() < 1e-15);
        assert!((l.get(1, 1) - 2f64.sqrt()).abs() < 1e-15);
        assert_eq!(l.get(0, 1), 0.0);
        let back = l.reconstruct();
        for (a, b) in back.as_slice().iter().zip(m.as_slice()) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn cholesky_rejects_indefinite() {
        let m = DenseMatrix::from_rows(&[[1.0, 2.0], [2.0, 1.0]]).unwrap();
        assert!(matches!(cholesky(&m), Err(Error::NotPositiveDefinite { .. })));
    }

    #[test]
    fn cholesky_rejects_asymmetric() {
        let m = DenseMatrix::from_rows(&[[1.0, 0.5], [0.0, 1.0]]).unwrap();
        assert!(cholesky(&m).is_err());
    }

    #[test]
    fn jitter_on_identity_uses_base() {
        let (l, jitter) = jittered_cholesky(&DenseMatrix::identity(2), 1e-6).unwrap();
        assert_eq!(jitter, 1e-6);
        assert!((l.get(0, 0) - (1.0f64 + 1e-6).sqrt()).abs() < 1e-15);
    }

    #[test]
    fn jitter_escalates_on_rank_one() {
        let v = [0.6, 0.8];
        let m = DenseMatrix::from_fn(2, 2, |i, j| v[i] * v[j]);
        let (l, jitter) = jittered_cholesky(&m, 1e-6).unwrap();
        assert!(jitter <= 1e-3);
        let back = l.reconstruct();
        for i in 0..2 {
            for j in 0..2 {
                let expect = m[(i, j)] + if i == j { jitter } else { 0.0 };
                assert!((back[(i, j)] - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn jitter_rejects_nan() {
        let m = DenseMatrix::from_vec(2, 2, vec![f64::NAN; 4]).unwrap();
        assert!(jittered_cholesky(&m, 1e-6).is_err());
    }

    #[test]
    fn jitter_gives_up_after_seven_escalations() {
        let m = DenseMatrix::from_rows(&[[-10.0, 0.0], [0.0, 1.0]]).unwrap();
        assert!(matches!(
            jittered_cholesky(&m, 1e-6),
            Err(Error::NotPositiveDefinite { .. })
        ));
    }

    #[test]
    fn tri_solve_by_hand() {
        let l = LowerTriangular::from_lower(
            &DenseMatrix::from_rows(&[[2.0, 0.0], [1.0, 1.0]]).unwrap(),
        )
        .unwrap();
        let x = tri_solve(&l, &DenseMatrix::column_vector(&[2.0, 3.0]), false).unwrap();
        assert_eq!(x.as_slice(), &[1.0, 2.0]);
        // Lᵀ x = b  with Lᵀ = [[2, 1], [0, 1]]
        let x = tri_solve(&l, &DenseMatrix::column_vector(&[4.0, 2.0]), true).unwrap();
        assert_eq!(x.as_slice(), &[1.0, 2.0]);
    }

    #[test]
    fn tri_solve_identity_passthrough_and_mismatch() {
        let l = LowerTriangular::identity(3);
        let b = DenseMatrix::from_fn(3, 2, |i, j| (i * 2 + j) as f64 - 1.5);
        assert_eq!(tri_solve(&l, &b, false).unwrap(), b);
        assert_eq!(tri_solve(&l, &b, true).unwrap(), b);
        assert!(tri_solve(&l, &DenseMatrix::zeros(2, 1), false).is_err());
    }

    #[test]
    fn logsumexp_cases() {
        assert!((logsumexp(&[0.0, 0.0]).unwrap() - 2f64.ln()).abs() < 1e-15);
        assert!((logsumexp(&[-1000.0, -1000.0]).unwrap() - (-1000.0 + 2f64.ln())).abs() < 1e-12);
        assert_eq!(logsumexp(&[3.0]).unwrap(), 3.0);
        assert!(logsumexp(&[]).is_err());
        assert_eq!(logsumexp(&[f64::NEG_INFINITY, f64::NEG_INFINITY]).unwrap(), f64::NEG_INFINITY);
    }

    #[test]
    fn normals_replay_and_empty() {
        let s = RandomStream::new(7, 3);
        let (a, s1) = draw_standard_normals(&s, 50);
        let (b, s2) = draw_standard_normals(&s, 50);
        assert_eq!(a, b);
        assert_eq!(s1, s2);
        let (c, _) = draw_standard_normals(&s1, 50);
        assert_ne!(a, c);
        let (e, s3) = draw_standard_normals(&s, 0);
        assert!(e.is_empty());
        assert_eq!(s3, s);
    }

    #[test]
    fn normals_moments() {
        let (x, _) = draw_standard_normals(&RandomStream::new(1, 0), 100_000);
        let mean = x.iter().sum::<f64>() / x.len() as f64;
        let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / x.len() as f64;
        assert!(mean.abs() < 0.02, "mean {mean}");
        assert!((var - 1.0).abs() < 0.02, "var {var}");
    }

    #[test]
    fn gemm_variants_agree() {
        let a = DenseMatrix::from_fn(3, 4, |i, j| (i as f64 + 1.0) * 0.5 - j as f64);
        let b = DenseMatrix::from_fn(4, 2, |i, j| (i * j) as f64 + 0.25);
        let ab = a.matmul(&b);
        let ab2 = a.matmul_nt(&b.transpose());
        let ab3 = a.transpose().matmul_tn(&b);
        for i in 0..3 {
            for j in 0..2 {
                let direct: f64 = (0..4).map(|k| a[(i, k)] * b[(k, j)]).sum();
                assert!((ab[(i, j)] - direct).abs() < 1e-12);
                assert!((ab2[(i, j)] - direct).abs() < 1e-12);
                assert!((ab3[(i, j)] - direct).abs() < 1e-12);
            }
        }
    }
}
