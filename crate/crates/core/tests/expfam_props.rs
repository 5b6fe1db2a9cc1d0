use nalgebra::DMatrix;
use proptest::prelude::*;
use synthloop_core::expfam::{ExpFamilyModel, FeatureMap};
use synthloop_core::linalg::min_eigenvalue;
use synthloop_core::rng::{stream, Purpose};

fn model_and_eta() -> impl Strategy<Value = (ExpFamilyModel, Vec<f64>)> {
    prop_oneof![
        (0.2f64..5.0, -5.0f64..5.0).prop_map(|(s, e)| (ExpFamilyModel::GaussianKnownVar { sigma2: s }, vec![e])),
        (-8.0f64..8.0).prop_map(|e| (ExpFamilyModel::BernoulliLogit, vec![e])),
        (-4.0f64..4.0).prop_map(|e| (ExpFamilyModel::PoissonLog, vec![e])),
        (-3.0f64..3.0, 0.05f64..3.0).prop_map(|(m, p)| (ExpFamilyModel::LinearUnknownVar, vec![m * p, -0.5 * p])),
    ]
}

fn a(m: &ExpFamilyModel, e: &[f64]) -> f64 {
    m.log_partition(e).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn gradient_matches_central_differences((m, eta) in model_and_eta()) {
        let g = m.grad_log_partition(&eta).unwrap();
        for i in 0..eta.len() {
            let h = 1e-5 * eta[i].abs().max(1e-2);
            let (mut up, mut dn) = (eta.clone(), eta.clone());
            up[i] += h;
            dn[i] -= h;
            let fd = (a(&m, &up) - a(&m, &dn)) / (2.0 * h);
            prop_assert!((fd - g[i]).abs() <= 1e-5 * g[i].abs().max(1.0), "{:?} {} {} {}", m, i, fd, g[i]);
        }
    }

    #[test]
    fn hessian_matches_differences_of_gradient((m, eta) in model_and_eta()) {
        let hmat = m.hess_log_partition(&eta).unwrap();
        for j in 0..eta.len() {
            let h = 1e-5 * eta[j].abs().max(1e-2);
            let (mut up, mut dn) = (eta.clone(), eta.clone());
            up[j] += h;
            dn[j] -= h;
            let gu = m.grad_log_partition(&up).unwrap();
            let gd = m.grad_log_partition(&dn).unwrap();
            for i in 0..eta.len() {
                let fd = (gu[i] - gd[i]) / (2.0 * h);
                prop_assert!((fd - hmat[(i, j)]).abs() <= 1e-4 * hmat[(i, j)].abs().max(1.0));
            }
        }
    }

    #[test]
    fn hessian_is_symmetric_psd((m, eta) in model_and_eta()) {
        let h = m.hess_log_partition(&eta).unwrap();
        prop_assert_eq!(h.clone(), h.transpose());
        prop_assert!(min_eigenvalue(&h) >= -1e-12);
    }

    #[test]
    fn density_is_kernel_plus_carrier((m, eta) in model_and_eta(), seed in 0u64..1000) {
        let y = m.sample_response(&eta, &mut stream(seed, 0, 0, Purpose::MonteCarlo)).unwrap();
        let full = m.log_density(y, &eta).unwrap();
        let split = m.log_density_kernel(y, &eta).unwrap() + m.log_carrier(y).unwrap();
        prop_assert!((full - split).abs() < 1e-12);
    }

    #[test]
    fn natural_parameter_is_linear_in_theta(x in proptest::collection::vec(-3.0f64..3.0, 2), t1 in proptest::collection::vec(-2.0f64..2.0, 3), t2 in proptest::collection::vec(-2.0f64..2.0, 3)) {
        let f = FeatureMap::LinearBlock { dim: 2 };
        let sum: Vec<f64> = t1.iter().zip(&t2).map(|(a, b)| a + b).collect();
        let e = f.natural_param(&x, &sum).unwrap();
        let e1 = f.natural_param(&x, &t1).unwrap();
        let e2 = f.natural_param(&x, &t2).unwrap();
        prop_assert!((&e - &e1 - &e2).amax() < 1e-12);
        let xm: DMatrix<f64> = f.embed(&x).unwrap();
        prop_assert!((xm * nalgebra::DVector::from_column_slice(&t1) - e1).amax() < 1e-12);
    }
}

#[test]
fn sampled_moments_match_gradient() {
    let cases = [
        (ExpFamilyModel::GaussianKnownVar { sigma2: 2.0 }, vec![0.7]),
        (ExpFamilyModel::BernoulliLogit, vec![-0.4]),
        (ExpFamilyModel::PoissonLog, vec![1.3]),
        (ExpFamilyModel::LinearUnknownVar, vec![0.6, -0.8]),
    ];
    let n = 400_000;
    for (m, eta) in cases {
        let mut rng = stream(99, 0, 0, Purpose::MonteCarlo);
        let k = eta.len();
        let mut mean = vec![0.0; k];
        for _ in 0..n {
            let t = m.sufficient_stat(m.sample_response(&eta, &mut rng).unwrap());
            for i in 0..k {
                mean[i] += t[i] / n as f64;
            }
        }
        let g = m.grad_log_partition(&eta).unwrap();
        let h = m.hess_log_partition(&eta).unwrap();
        for i in 0..k {
            let se = (h[(i, i)] / n as f64).sqrt();
            assert!((mean[i] - g[i]).abs() < 5.0 * se, "{m:?} coordinate {i}: {} vs {}", mean[i], g[i]);
        }
    }
}

#[test]
fn discrete_densities_normalise() {
    let b = ExpFamilyModel::BernoulliLogit;
    for eta in [-30.0, -2.0, 0.0, 0.3, 4.0, 30.0] {
        let s = b.log_density(0.0, &[eta]).unwrap().exp() + b.log_density(1.0, &[eta]).unwrap().exp();
        assert!((s - 1.0).abs() < 1e-14);
    }
    let p = ExpFamilyModel::PoissonLog;
    for eta in [-3.0, 0.0, 1.0, 2.5] {
        let s: f64 = (0..200).map(|y| p.log_density(y as f64, &[eta]).unwrap().exp()).sum();
        assert!((s - 1.0).abs() < 1e-12, "poisson η={eta}: {s}");
    }
}
