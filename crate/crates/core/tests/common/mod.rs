//! Shared builders for randomized model instances.
#![allow(dead_code)]

use autogp::data::{Dataset, Targets};
use autogp::kernels::{ArcCosineParams, KernelParams, RbfArdParams};
use autogp::likelihoods::LikelihoodConfig;
use autogp::math::{DenseMatrix, LowerTriangular};
use autogp::model::{InducingSet, ModelState};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;

pub fn random_state(seed: u64, lik: LikelihoodConfig, k: usize, arc: bool, m: usize, d: usize) -> ModelState {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let q = lik.num_latent();
    let z = DenseMatrix::from_fn(m, d, |_, _| rng.random_range(-1.5..1.5) + if arc { 0.3 } else { 0.0 });
    let kernels = (0..q)
        .map(|_| {
            if arc {
                KernelParams::ArcCosine(ArcCosineParams::new(1, 2, rng.random_range(-0.3..0.3)).unwrap())
            } else {
                KernelParams::Rbf(RbfArdParams::ard(
                    rng.random_range(-0.3..0.3),
                    (0..d).map(|_| rng.random_range(-0.2..0.4)).collect(),
                ))
            }
        })
        .collect();
    let mut state = ModelState::new(kernels, InducingSet::shared(z).unwrap(), lik, k).unwrap();
    let logits: Vec<f64> = (0..k).map(|_| rng.random_range(-0.5..0.5)).collect();
    state.posterior.set_logits(&logits).unwrap();
    for kk in 0..k {
        for j in 0..q {
            for v in state.posterior.mean_mut(kk, j) {
                *v = rng.random_range(-1.0..1.0);
            }
            let l = DenseMatrix::from_fn(m, m, |r, c| {
                if r == c {
                    rng.random_range(0.3..0.9)
                } else if c < r {
                    rng.random_range(-0.2..0.2)
                } else {
                    0.0
                }
            });
            state.posterior.set_factor(kk, j, &LowerTriangular::from_lower(&l).unwrap()).unwrap();
        }
    }
    state
}

pub fn random_data(seed: u64, lik: &LikelihoodConfig, n: usize, d: usize) -> Dataset {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed ^ 0xdead);
    let x = DenseMatrix::from_fn(n, d, |_, _| rng.random_range(-2.0..2.0));
    let targets = match lik {
        LikelihoodConfig::Gaussian { .. } | LikelihoodConfig::Gprn { .. } => {
            let p = lik.output_dim().unwrap();
            Targets::Real(DenseMatrix::from_fn(n, p, |_, _| rng.random_range(-1.5..1.5)))
        }
        _ => {
            let c = lik.num_classes().unwrap();
            Targets::Classes {
                labels: (0..n).map(|_| rng.random_range(0..c)).collect(),
                num_classes: c,
            }
        }
    };
    Dataset::new("check", x, targets).unwrap()
}

pub fn liks() -> Vec<LikelihoodConfig> {
    vec![
        LikelihoodConfig::Gaussian { log_noise_variances: vec![-0.7, 0.2] },
        LikelihoodConfig::Logistic,
        LikelihoodConfig::Softmax { num_classes: 3 },
        LikelihoodConfig::Gprn { outputs: 2, nodes: 1, log_noise_variance: -0.5 },
    ]
}
