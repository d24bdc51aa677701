use autogp::math::{cholesky, draw_standard_normals, logsumexp, tri_solve, DenseMatrix, RandomStream};
use nalgebra::DMatrix;
use proptest::prelude::*;
use statrs::distribution::{ContinuousCDF, Normal};

fn to_na(m: &DenseMatrix) -> DMatrix<f64> {
    DMatrix::from_row_slice(m.rows(), m.cols(), m.as_slice())
}

/// SPD matrix `Q diag(λ) Qᵀ` with eigenvalues log-spaced over `log10_cond` decades.
fn spd(dim: usize, log10_cond: f64, seed: u64) -> DenseMatrix {
    let (g, _) = draw_standard_normals(&RandomStream::new(seed, 0), dim * dim);
    let q = to_na(&DenseMatrix::from_vec(dim, dim, g).unwrap()).qr().q();
    let lambdas: Vec<f64> = (0..dim)
        .map(|i| 10f64.powf(-log10_cond * i as f64 / (dim.max(2) - 1) as f64))
        .collect();
    let m = &q * DMatrix::from_diagonal(&nalgebra::DVector::from_vec(lambdas)) * q.transpose();
    let mut out = DenseMatrix::from_fn(dim, dim, |i, j| m[(i, j)]);
    out.symmetrize_from_lower();
    out
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn cholesky_reconstructs_spd_matrices(dim in 1usize..=50, log10_cond in 0.0f64..7.9, seed in any::<u64>()) {
        let m = spd(dim, log10_cond, seed);
        let l = cholesky(&m).unwrap();
        let mut diff = l.reconstruct();
        diff.add_scaled(-1.0, &m);
        prop_assert!(diff.frobenius_norm() / m.frobenius_norm() < 1e-10);
        for i in 0..dim {
            prop_assert!(l.get(i, i) > 0.0);
            for j in i + 1..dim {
                prop_assert_eq!(l.get(i, j), 0.0);
            }
        }
    }

    #[test]
    fn triangular_solves_match_dense_inverse(dim in 1usize..=20, cols in 1usize..4, seed in any::<u64>()) {
        let m = spd(dim, 3.0, seed);
        let (bv, _) = draw_standard_normals(&RandomStream::new(seed, 1), dim * cols);
        let b = DenseMatrix::from_vec(dim, cols, bv).unwrap();
        let l = cholesky(&m).unwrap();
        let x = tri_solve(&l, &tri_solve(&l, &b, false).unwrap(), true).unwrap();
        let expect = to_na(&m).try_inverse().unwrap() * to_na(&b);
        let rel = (to_na(&x) - &expect).norm() / expect.norm();
        prop_assert!(rel < 1e-8, "relative error {rel}");
    }

    #[test]
    fn logsumexp_shift_invariance(values in prop::collection::vec(-50.0f64..50.0, 1..20), c in -500.0f64..500.0) {
        let shifted: Vec<f64> = values.iter().map(|v| v + c).collect();
        let a = logsumexp(&shifted).unwrap();
        let b = logsumexp(&values).unwrap() + c;
        prop_assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0));
    }
}

/// Kolmogorov–Smirnov statistic of `samples` against the continuous CDF `cdf`.
fn ks_statistic(mut samples: Vec<f64>, cdf: impl Fn(f64) -> f64) -> f64 {
    samples.sort_by(f64::total_cmp);
    let n = samples.len() as f64;
    samples
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = cdf(x);
            (f - i as f64 / n).abs().max(((i + 1) as f64 / n - f).abs())
        })
        .fold(0.0, f64::max)
}

/// Asymptotic critical value of `√n·D` at significance 0.001.
const KS_CRITICAL_0_001: f64 = 1.9495;

#[test]
fn distinct_streams_look_independent() {
    let n = 10_000;
    let phi = Normal::standard();
    let pairs = [
        (RandomStream::new(7, 1), RandomStream::new(7, 2)),
        (RandomStream::new(7, 1).split(0), RandomStream::new(7, 1).split(1)),
        (RandomStream::new(1, 0), RandomStream::new(2, 0)),
    ];
    for (a, b) in pairs {
        let (xa, _) = draw_standard_normals(&a, n);
        let (xb, _) = draw_standard_normals(&b, n);
        // each stream is standard normal on its own
        for x in [&xa, &xb] {
            let d = ks_statistic(x.clone(), |v| phi.cdf(v));
            assert!(d * (n as f64).sqrt() < KS_CRITICAL_0_001, "marginal KS {d}");
        }
        // under independence the product of the uniformized draws has CDF w(1 − ln w)
        let w: Vec<f64> = xa.iter().zip(&xb).map(|(p, q)| phi.cdf(*p) * phi.cdf(*q)).collect();
        let d = ks_statistic(w, |v| if v <= 0.0 { 0.0 } else { v * (1.0 - v.ln()) });
        assert!(d * (n as f64).sqrt() < KS_CRITICAL_0_001, "independence KS {d}");
    }
}

#[test]
fn identical_streams_fail_the_independence_check() {
    let n = 10_000;
    let phi = Normal::standard();
    let (xa, _) = draw_standard_normals(&RandomStream::new(7, 1), n);
    let w: Vec<f64> = xa.iter().map(|p| phi.cdf(*p).powi(2)).collect();
    let d = ks_statistic(w, |v| if v <= 0.0 { 0.0 } else { v * (1.0 - v.ln()) });
    assert!(d * (n as f64).sqrt() > KS_CRITICAL_0_001);
}

#[test]
fn continuing_a_stream_does_not_replay_it() {
    let (first, next) = draw_standard_normals(&RandomStream::new(3, 4), 100);
    let (second, _) = draw_standard_normals(&next, 100);
    let (both, _) = draw_standard_normals(&RandomStream::new(3, 4), 200);
    assert_ne!(first, second);
    assert_eq!([first, second].concat(), both);
}
