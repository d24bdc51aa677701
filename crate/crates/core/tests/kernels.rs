use autogp::kernels::{ArcCosineParams, KernelParams, RbfArdParams};
use autogp::math::{draw_standard_normals, DenseMatrix, RandomStream};
use nalgebra::DMatrix;
use proptest::prelude::*;

fn random_inputs(n: usize, d: usize, seed: u64) -> DenseMatrix {
    let (v, _) = draw_standard_normals(&RandomStream::new(seed, 11), n * d);
    DenseMatrix::from_vec(n, d, v).unwrap()
}

fn min_eigenvalue(k: &DenseMatrix) -> f64 {
    let m = DMatrix::from_fn(k.rows(), k.cols(), |i, j| 0.5 * (k[(i, j)] + k[(j, i)]));
    m.symmetric_eigenvalues().min()
}

fn kernel_zoo(d: usize, seed: u64) -> Vec<KernelParams> {
    let (r, _) = draw_standard_normals(&RandomStream::new(seed, 12), d + 1);
    let mut out = vec![KernelParams::Rbf(RbfArdParams::ard(0.3 * r[0], r[1..].iter().map(|v| 0.5 * v).collect()))];
    for degree in 0..=2 {
        for depth in 1..=3 {
            out.push(KernelParams::ArcCosine(ArcCosineParams::new(degree, depth, 0.2 * r[0]).unwrap()));
        }
    }
    out
}

#[test]
fn unit_distance_rbf_is_exp_minus_one() {
    let k = KernelParams::Rbf(RbfArdParams::ard(0.0, vec![0.0; 3]));
    let v = k.eval(&[0.2, -1.0, 3.0], &[0.2, 0.0, 3.0]).unwrap();
    assert!((v - (-1f64).exp()).abs() < 1e-12);
    assert!((v - 0.367879).abs() < 1e-6);
}

#[test]
fn rbf_flat_limit_is_the_variance() {
    let k = KernelParams::Rbf(RbfArdParams::ard(0.7, vec![1e8f64.ln(); 2]));
    let v = k.eval(&[3.0, -4.0], &[-10.0, 25.0]).unwrap();
    assert!((v - 0.7f64.exp()).abs() < 1e-12);
}

#[test]
fn arc_cosine_spot_values() {
    let k0 = KernelParams::ArcCosine(ArcCosineParams::new(0, 1, 0.0).unwrap());
    assert!((k0.eval(&[1.0, 0.0], &[0.0, 2.0]).unwrap() - 0.5).abs() < 1e-12);
    assert!((k0.eval(&[1.0, 2.0], &[2.0, 4.0]).unwrap() - 1.0).abs() < 1e-12);
    let k1 = KernelParams::ArcCosine(ArcCosineParams::new(1, 1, 0.0).unwrap());
    let x = [0.3, -1.2, 2.0];
    let norm2: f64 = x.iter().map(|v| v * v).sum();
    assert!((k1.eval(&x, &x).unwrap() - norm2).abs() < 1e-12);
}

#[test]
fn arc_cosine_depth_recursion_is_finite_on_the_diagonal() {
    let x = random_inputs(6, 4, 1);
    for degree in 0..=2 {
        for depth in 1..=6 {
            let k = KernelParams::ArcCosine(ArcCosineParams::new(degree, depth, 0.0).unwrap());
            for i in 0..x.rows() {
                let v = k.eval(x.row(i), x.row(i)).unwrap();
                assert!(v.is_finite() && v > 0.0, "degree {degree} depth {depth}: {v}");
            }
        }
    }
}

#[test]
fn arc_cosine_rejects_zero_norm_inputs() {
    let k = KernelParams::ArcCosine(ArcCosineParams::new(1, 2, 0.0).unwrap());
    assert!(k.eval(&[0.0, 0.0], &[1.0, 0.0]).is_err());
}

#[test]
fn dimension_mismatch_is_an_error() {
    let k = KernelParams::Rbf(RbfArdParams::ard(0.0, vec![0.0; 2]));
    assert!(k.eval(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]).is_err());
    assert!(k.gram(&random_inputs(3, 3, 0), &random_inputs(2, 3, 1)).is_err());
}

#[test]
fn small_rbf_gram_is_symmetric_with_variance_diagonal() {
    let k = KernelParams::Rbf(RbfArdParams::ard(0.4, vec![0.1, -0.3]));
    let x = random_inputs(3, 2, 5);
    let g = k.gram_sym(&x).unwrap();
    for i in 0..3 {
        assert!((g[(i, i)] - 0.4f64.exp()).abs() < 1e-14);
        for j in 0..3 {
            assert_eq!(g[(i, j)], g[(j, i)]);
        }
    }
    assert!(min_eigenvalue(&g) >= -1e-10);
}

#[test]
fn arc_cosine_gram_on_the_sphere_is_psd() {
    let mut x = random_inputs(20, 5, 8);
    for i in 0..20 {
        let n = x.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
        x.row_mut(i).iter_mut().for_each(|v| *v /= n);
    }
    let k = KernelParams::ArcCosine(ArcCosineParams::new(1, 3, 0.0).unwrap());
    assert!(min_eigenvalue(&k.gram_sym(&x).unwrap()) >= -1e-8);
}

#[test]
fn gram_matrices_are_psd_on_random_input_sets() {
    for seed in 0..100u64 {
        let n = 2 + (seed as usize * 7) % 49;
        let d = 1 + (seed as usize) % 6;
        let x = random_inputs(n, d, seed);
        for k in kernel_zoo(d, seed) {
            let g = k.gram_sym(&x).unwrap();
            let bound = -1e-8 * g.trace() / n as f64;
            let ev = min_eigenvalue(&g);
            assert!(ev >= bound, "seed {seed} {k:?}: min eigenvalue {ev}");
        }
    }
}

#[test]
fn gram_gradients_match_finite_differences() {
    let h = 1e-5;
    for seed in 0..10u64 {
        let d = 1 + seed as usize % 3;
        let x1 = random_inputs(5, d, seed);
        let x2 = random_inputs(5, d, seed + 100);
        let mut zoo = kernel_zoo(d, seed);
        zoo.push(KernelParams::Rbf(RbfArdParams::isotropic(0.2, -0.4, d)));
        for k in zoo {
            let grads = k.gram_grad(&x1, &x2).unwrap();
            let base = k.to_vec();
            assert_eq!(grads.len(), base.len());
            for (p, g) in grads.iter().enumerate() {
                let mut plus = k.clone();
                let mut minus = k.clone();
                let mut v = base.clone();
                v[p] += h;
                plus.set_from_slice(&v).unwrap();
                v[p] -= 2.0 * h;
                minus.set_from_slice(&v).unwrap();
                let (kp, km) = (plus.gram(&x1, &x2).unwrap(), minus.gram(&x1, &x2).unwrap());
                for a in 0..5 {
                    for b in 0..5 {
                        let numeric = (kp[(a, b)] - km[(a, b)]) / (2.0 * h);
                        let analytic = g[(a, b)];
                        let err = (numeric - analytic).abs() / numeric.abs().max(analytic.abs()).max(1e-3);
                        assert!(err < 1e-6, "seed {seed} {k:?} param {p}: {analytic} vs {numeric}");
                    }
                }
            }
        }
    }
}

#[test]
fn arc_cosine_gradient_is_only_the_output_scale() {
    let k = KernelParams::ArcCosine(ArcCosineParams::new(2, 2, 0.3).unwrap());
    let x = random_inputs(4, 3, 2);
    let grads = k.gram_grad(&x, &x).unwrap();
    assert_eq!(grads.len(), 1);
    let g = k.gram(&x, &x).unwrap();
    for (a, b) in grads[0].as_slice().iter().zip(g.as_slice()) {
        assert!((a - b).abs() <= 1e-14 * b.abs().max(1.0));
    }
}

proptest! {
    #[test]
    fn kernels_are_exactly_symmetric(
        x in prop::collection::vec(-3.0f64..3.0, 3),
        y in prop::collection::vec(-3.0f64..3.0, 3),
        lv in -1.0f64..1.0,
        ls in prop::collection::vec(-1.0f64..1.0, 3),
        degree in 0u32..=2,
        depth in 1u32..=3,
    ) {
        prop_assume!(x.iter().any(|v| v.abs() > 1e-3) && y.iter().any(|v| v.abs() > 1e-3));
        let kernels = [
            KernelParams::Rbf(RbfArdParams::ard(lv, ls)),
            KernelParams::ArcCosine(ArcCosineParams::new(degree, depth, lv).unwrap()),
        ];
        for k in kernels {
            prop_assert_eq!(k.eval(&x, &y).unwrap(), k.eval(&y, &x).unwrap());
        }
    }

    #[test]
    fn ard_with_tied_lengthscales_matches_isotropic(
        x in prop::collection::vec(-3.0f64..3.0, 4),
        y in prop::collection::vec(-3.0f64..3.0, 4),
        lv in -1.0f64..1.0,
        ll in -1.0f64..1.0,
    ) {
        let ard = KernelParams::Rbf(RbfArdParams::ard(lv, vec![ll; 4]));
        let iso = KernelParams::Rbf(RbfArdParams::isotropic(lv, ll, 4));
        let (a, b) = (ard.eval(&x, &y).unwrap(), iso.eval(&x, &y).unwrap());
        prop_assert!((a - b).abs() <= 1e-14);
    }
}
