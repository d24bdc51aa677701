mod common;

use autogp::kernels::{KernelParams, RbfArdParams};
use autogp::likelihoods::LikelihoodConfig;
use autogp::math::{draw_standard_normals, DenseMatrix, LowerTriangular, RandomStream};
use autogp::model::{
    conditional_marginals, full_posterior, gaussian_kl, kl_bound, sample_latents, InducingSet, ModelState,
};
use common::random_state;
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;

fn na(m: &DenseMatrix) -> DMatrix<f64> {
    DMatrix::from_row_slice(m.rows(), m.cols(), m.as_slice())
}

fn random_inputs(n: usize, d: usize, seed: u64) -> DenseMatrix {
    let (v, _) = draw_standard_normals(&RandomStream::new(seed, 31), n * d);
    DenseMatrix::from_vec(n, d, v).unwrap()
}

/// Random state without jitter so dense oracles can use `K_zz` as is.
fn exact_state(seed: u64, lik: LikelihoodConfig, k: usize, m: usize, d: usize) -> ModelState {
    let mut s = random_state(seed, lik, k, false, m, d);
    s.relative_jitter = 0.0;
    s
}

/// Per-component, per-latent `(means, covariance)` at `x` via explicit inverses.
fn dense_posterior(state: &ModelState, x: &DenseMatrix) -> Vec<Vec<(DVector<f64>, DMatrix<f64>)>> {
    (0..state.num_components())
        .map(|k| {
            (0..state.num_latent())
                .map(|j| {
                    let kern = &state.kernels[j];
                    let z = state.inducing.for_latent(j);
                    let kzz_inv = na(&kern.gram_sym(z).unwrap()).try_inverse().unwrap();
                    let kxz = na(&kern.gram(x, z).unwrap());
                    let kxx = na(&kern.gram_sym(x).unwrap());
                    let a = &kxz * kzz_inv;
                    let m = DVector::from_column_slice(state.posterior.mean(k, j));
                    let s = na(&state.posterior.covariance(k, j));
                    let mean = &a * m;
                    let cov = &kxx - &a * kxz.transpose() + &a * s * a.transpose();
                    (mean, cov)
                })
                .collect()
        })
        .collect()
}

#[test]
fn marginals_match_dense_inverse_oracle() {
    for seed in 0..5 {
        let state = exact_state(seed, LikelihoodConfig::Softmax { num_classes: 3 }, 2, 3, 2);
        let x = random_inputs(5, 2, seed);
        let marg = conditional_marginals(&x, &state).unwrap();
        let oracle = dense_posterior(&state, &x);
        for k in 0..2 {
            for n in 0..5 {
                for j in 0..3 {
                    let (mean, cov) = &oracle[k][j];
                    assert!((marg.mean(k, n, j) - mean[n]).abs() < 1e-8);
                    assert!((marg.variance(k, n, j) - cov[(n, n)]).abs() < 1e-8);
                }
            }
        }
    }
}

#[test]
fn zero_means_give_zero_marginal_means() {
    let mut state = random_state(3, LikelihoodConfig::gaussian(2, 0.0), 2, false, 4, 3);
    for k in 0..2 {
        for j in 0..2 {
            state.posterior.mean_mut(k, j).iter_mut().for_each(|v| *v = 0.0);
        }
    }
    let marg = conditional_marginals(&random_inputs(6, 3, 1), &state).unwrap();
    assert!(marg.means.iter().all(|v| *v == 0.0));
}

/// State whose single posterior component equals the prior at `z`.
fn prior_matched_state(z: DenseMatrix) -> ModelState {
    let kernel = KernelParams::Rbf(RbfArdParams::ard(0.4, vec![0.3; z.cols()]));
    let mut state = ModelState::new(vec![kernel.clone()], InducingSet::shared(z.clone()).unwrap(), LikelihoodConfig::gaussian(1, 0.0), 1).unwrap();
    state.relative_jitter = 0.0;
    let chol = autogp::math::cholesky(&kernel.gram_sym(&z).unwrap()).unwrap();
    state.posterior.set_factor(0, 0, &chol).unwrap();
    state
}

#[test]
fn prior_posterior_at_the_inducing_inputs_reproduces_the_prior() {
    let z = random_inputs(4, 2, 9);
    let state = prior_matched_state(z.clone());
    let kzz = state.kernels[0].gram_sym(&z).unwrap();
    let marg = conditional_marginals(&z, &state).unwrap();
    for n in 0..4 {
        assert!((marg.variance(0, n, 0) - kzz[(n, n)]).abs() < 1e-10);
    }
    let post = full_posterior(&z, &state).unwrap();
    let diff = na(&post[0].covariances[0]) - na(&kzz);
    assert!(diff.amax() < 1e-10);
    assert!(kl_bound(&state).unwrap().abs() < 1e-10);
}

#[test]
fn full_posterior_matches_oracle_and_marginals() {
    let state = exact_state(4, LikelihoodConfig::gaussian(2, 0.0), 2, 2, 3);
    let x = random_inputs(4, 3, 4);
    let post = full_posterior(&x, &state).unwrap();
    let oracle = dense_posterior(&state, &x);
    let marg = conditional_marginals(&x, &state).unwrap();
    let weights = state.posterior.weights();
    for k in 0..2 {
        assert!((post[k].weight - weights[k]).abs() < 1e-15);
        for j in 0..2 {
            let (mean, cov) = &oracle[k][j];
            for n in 0..4 {
                assert!((post[k].means[j][n] - mean[n]).abs() < 1e-8);
                assert!((post[k].covariances[j][(n, n)] - marg.variance(k, n, j)).abs() < 1e-10);
                for m in 0..4 {
                    assert!((post[k].covariances[j][(n, m)] - cov[(n, m)]).abs() < 1e-8);
                }
            }
        }
    }
}

#[test]
fn full_posterior_refuses_oversized_inputs() {
    let state = random_state(0, LikelihoodConfig::Logistic, 1, false, 2, 1);
    let x = DenseMatrix::zeros(10_001, 1);
    assert!(full_posterior(&x, &state).is_err());
}

#[test]
fn marginal_variances_stay_positive() {
    // inducing inputs coincide with the batch, so the conditional variance is ~0
    let z = random_inputs(5, 2, 2);
    let mut state = prior_matched_state(z.clone());
    let tiny = DenseMatrix::from_fn(5, 5, |i, j| if i == j { 1e-200 } else { 0.0 });
    state.posterior.set_factor(0, 0, &LowerTriangular::from_lower(&tiny).unwrap()).unwrap();
    let marg = conditional_marginals(&z, &state).unwrap();
    assert!(marg.variances.iter().all(|v| *v >= 1e-12));
}

#[test]
fn marginals_are_permutation_equivariant() {
    let state = random_state(8, LikelihoodConfig::Softmax { num_classes: 3 }, 2, false, 5, 2);
    let x = random_inputs(7, 2, 8);
    let perm = [3, 0, 6, 1, 5, 2, 4];
    let a = conditional_marginals(&x, &state).unwrap();
    let b = conditional_marginals(&x.select_rows(&perm), &state).unwrap();
    for k in 0..2 {
        for (pos, &n) in perm.iter().enumerate() {
            for j in 0..3 {
                assert!((a.mean(k, n, j) - b.mean(k, pos, j)).abs() < 1e-12);
                assert!((a.variance(k, n, j) - b.variance(k, pos, j)).abs() < 1e-12);
            }
        }
    }
}

/// Closed-form `KL[N(m, S) ‖ N(0, K)]` via nalgebra.
fn closed_form_kl(m: &DVector<f64>, s: &DMatrix<f64>, k: &DMatrix<f64>) -> f64 {
    let kinv = k.clone().try_inverse().unwrap();
    let dim = m.len() as f64;
    let logdet = |a: &DMatrix<f64>| 2.0 * a.clone().cholesky().unwrap().l().diagonal().map(f64::ln).sum();
    0.5 * ((&kinv * s).trace() + (m.transpose() * &kinv * m)[0] - dim + logdet(k) - logdet(s))
}

#[test]
fn single_component_bound_is_the_exact_gaussian_kl() {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(77);
    for instance in 0..20u64 {
        let m = rng.random_range(1..=6);
        let q = rng.random_range(1..=3);
        let lik = LikelihoodConfig::gaussian(q, 0.0);
        let state = exact_state(instance, lik, 1, m, 2);
        let mut expect = 0.0;
        for j in 0..q {
            let kzz = na(&state.kernels[j].gram_sym(state.inducing.for_latent(j)).unwrap());
            let mean = DVector::from_column_slice(state.posterior.mean(0, j));
            let s = na(&state.posterior.covariance(0, j));
            let exact = closed_form_kl(&mean, &s, &kzz);
            let library = gaussian_kl(state.posterior.mean(0, j), &state.posterior.covariance(0, j), &state.kernels[j].gram_sym(state.inducing.for_latent(j)).unwrap()).unwrap();
            assert!((library - exact).abs() < 1e-8);
            expect += exact;
        }
        let bound = kl_bound(&state).unwrap();
        assert!((bound - expect).abs() < 1e-8, "instance {instance}: {bound} vs {expect}");
        assert!(bound >= 0.0);
    }
}

#[test]
fn duplicated_components_match_the_single_component_bound() {
    for seed in 0..10 {
        let single = random_state(seed, LikelihoodConfig::Softmax { num_classes: 2 }, 1, false, 4, 2);
        let mut double = ModelState::new(single.kernels.clone(), single.inducing.clone(), single.likelihood.clone(), 2).unwrap();
        double.relative_jitter = single.relative_jitter;
        for k in 0..2 {
            for j in 0..2 {
                double.posterior.mean_mut(k, j).copy_from_slice(single.posterior.mean(0, j));
                double.posterior.set_factor(k, j, &single.posterior.factor(0, j)).unwrap();
            }
        }
        let a = kl_bound(&single).unwrap();
        let b = kl_bound(&double).unwrap();
        assert!((a - b).abs() < 1e-10, "seed {seed}: {a} vs {b}");
    }
}

fn log_gaussian(u: &DVector<f64>, mean: &DVector<f64>, chol: &DMatrix<f64>) -> f64 {
    let r = chol.solve_lower_triangular(&(u - mean)).unwrap();
    let logdet: f64 = chol.diagonal().map(f64::ln).sum();
    -0.5 * r.norm_squared() - logdet - 0.5 * u.len() as f64 * (2.0 * std::f64::consts::PI).ln()
}

#[test]
fn mixture_bound_dominates_monte_carlo_kl() {
    let samples = 100_000;
    for seed in 0..5u64 {
        let m = 1 + seed as usize % 3;
        let state = exact_state(100 + seed, LikelihoodConfig::Logistic, 2, m, 1);
        let kzz = na(&state.kernels[0].gram_sym(state.inducing.for_latent(0)).unwrap());
        let prior_chol = kzz.clone().cholesky().unwrap().l();
        let weights = state.posterior.weights();
        let comps: Vec<(DVector<f64>, DMatrix<f64>)> = (0..2)
            .map(|k| (DVector::from_column_slice(state.posterior.mean(k, 0)), na(state.posterior.factor(k, 0).as_dense())))
            .collect();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let (mut sum, mut sum_sq) = (0.0, 0.0);
        for _ in 0..samples {
            let k = if rng.random::<f64>() < weights[0] { 0 } else { 1 };
            let eps = DVector::from_fn(m, |_, _| rand_distr::Distribution::sample(&rand_distr::StandardNormal, &mut rng));
            let u = &comps[k].0 + &comps[k].1 * eps;
            let log_q = (0..2)
                .map(|c| weights[c].ln() + log_gaussian(&u, &comps[c].0, &comps[c].1))
                .fold(f64::NEG_INFINITY, |acc: f64, v| acc.max(v) + ((acc.min(v) - acc.max(v)).exp()).ln_1p());
            let v = log_q - log_gaussian(&u, &DVector::zeros(m), &prior_chol);
            sum += v;
            sum_sq += v * v;
        }
        let mean = sum / samples as f64;
        let se = ((sum_sq / samples as f64 - mean * mean) / samples as f64).sqrt();
        let bound = kl_bound(&state).unwrap();
        assert!(bound >= mean - 3.0 * se, "seed {seed}: bound {bound} vs MC {mean} ± {se}");
    }
}

#[test]
fn sampled_latents_have_the_marginal_moments() {
    let z = DenseMatrix::from_rows(&[[0.5]]).unwrap();
    let mut state = prior_matched_state(z.clone());
    state.posterior.mean_mut(0, 0)[0] = 2.0;
    state.posterior.set_factor(0, 0, &LowerTriangular::from_lower(&DenseMatrix::from_rows(&[[3.0]]).unwrap()).unwrap()).unwrap();
    let marg = conditional_marginals(&z, &state).unwrap();
    assert!((marg.mean(0, 0, 0) - 2.0).abs() < 1e-12);
    assert!((marg.variance(0, 0, 0) - 9.0).abs() < 1e-10);
    let draws = sample_latents(&marg, 100_000, &RandomStream::new(5, 0)).unwrap();
    let n = draws.values.len() as f64;
    let mean = draws.values.iter().sum::<f64>() / n;
    let var = draws.values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    assert!((mean - 2.0).abs() < 0.05, "mean {mean}");
    assert!((var - 9.0).abs() < 0.3, "variance {var}");
    for (f, e) in draws.values.iter().zip(&draws.noise) {
        assert!((f - (2.0 + marg.variance(0, 0, 0).sqrt() * e)).abs() < 1e-12);
    }
    let again = sample_latents(&marg, 100_000, &RandomStream::new(5, 0)).unwrap();
    assert_eq!(draws.values, again.values);
}

#[test]
fn near_zero_variance_samples_sit_on_the_means() {
    let z = random_inputs(3, 2, 6);
    let mut state = prior_matched_state(z.clone());
    let tiny = DenseMatrix::from_fn(3, 3, |i, j| if i == j { 1e-200 } else { 0.0 });
    state.posterior.set_factor(0, 0, &LowerTriangular::from_lower(&tiny).unwrap()).unwrap();
    state.posterior.mean_mut(0, 0).copy_from_slice(&[0.3, -0.2, 1.0]);
    let marg = conditional_marginals(&z, &state).unwrap();
    let draws = sample_latents(&marg, 50, &RandomStream::new(1, 1)).unwrap();
    for i in 0..50 {
        for n in 0..3 {
            let f = draws.values[draws.index(0, i, n, 0)];
            assert!((f - marg.mean(0, n, 0)).abs() < 1e-5);
        }
    }
}
