use nalgebra::DMatrix;
use proptest::prelude::*;
use synthloop_core::expfam::{ExpFamilyModel, FeatureDistribution, FeatureMap};
use synthloop_core::limitproc::{simulate_ensemble, LimitProcessSpec, LimitScheme};
use synthloop_core::metrics::*;
use synthloop_core::rng::{stream, Purpose};
use synthloop_core::stats::loglog_slope;
use synthloop_core::workflow::{run_ensemble, Preset, WeightScheme};

fn psd() -> impl Strategy<Value = DMatrix<f64>> {
    proptest::collection::vec(-2.0f64..2.0, 9).prop_map(|v| {
        let a = DMatrix::from_row_slice(3, 3, &v);
        &a * a.transpose() + DMatrix::identity(3, 3) * 1e-3
    })
}

proptest! {
    #[test]
    fn are_is_reciprocal(v1 in psd(), v2 in psd()) {
        let p = are(&v1, &v2).unwrap() * are(&v2, &v1).unwrap();
        prop_assert!((p - 1.0).abs() < 1e-12);
    }

    #[test]
    fn kl_is_nonnegative(a in -3.0f64..3.0, b in -3.0f64..3.0, c in -3.0f64..3.0, d in -3.0f64..3.0) {
        let design = FeatureDistribution::fixed_design(vec![vec![1.0, 0.5], vec![1.0, -1.0], vec![1.0, 2.0]]);
        let f = FeatureMap::Row { dim: 2 };
        let mut rng = stream(0, 0, 0, Purpose::MonteCarlo);
        for m in [ExpFamilyModel::BernoulliLogit, ExpFamilyModel::PoissonLog, ExpFamilyModel::GaussianKnownVar { sigma2: 0.7 }] {
            let k = kl_exact(&m, &f, &[a, b], &[c, d], &design, 0, &mut rng).unwrap();
            prop_assert!(k >= 0.0);
            if (a - c).abs() + (b - d).abs() > 1e-3 {
                prop_assert!(k > 0.0);
            }
        }
    }
}

#[test]
fn kl_vanishes_only_at_the_truth_on_a_grid() {
    let design = FeatureDistribution::fixed_design(vec![vec![1.0, 0.0], vec![1.0, 1.0]]);
    let f = FeatureMap::Row { dim: 2 };
    let mut rng = stream(0, 0, 0, Purpose::MonteCarlo);
    let truth = [0.4, -0.6];
    for i in -5..=5 {
        for j in -5..=5 {
            let th = [truth[0] + 0.2 * i as f64, truth[1] + 0.2 * j as f64];
            let k = kl_exact(&ExpFamilyModel::BernoulliLogit, &f, &th, &truth, &design, 0, &mut rng).unwrap();
            if i == 0 && j == 0 {
                assert_eq!(k, 0.0);
            } else {
                assert!(k > 0.0);
            }
        }
    }
}

#[test]
fn quadratic_gap_is_third_order() {
    let f = FeatureMap::Row { dim: 1 };
    let h = FeatureDistribution::intercept_only();
    let m = ExpFamilyModel::BernoulliLogit;
    let theta0: f64 = 0.3;
    let vt = DMatrix::from_element(1, 1, {
        let p = 1.0 / (1.0 + (-theta0).exp());
        p * (1.0 - p)
    });
    let mut rng = stream(0, 0, 0, Purpose::MonteCarlo);
    let deltas = [0.2, 0.1, 0.05, 0.025];
    let gaps: Vec<f64> = deltas
        .iter()
        .map(|d| {
            let e = kl_exact(&m, &f, &[theta0 + d], &[theta0], &h, 0, &mut rng).unwrap();
            (e - kl_quadratic(&vt, &[theta0 + d], &[theta0])).abs()
        })
        .collect();
    let slope = loglog_slope(&deltas, &gaps);
    assert!(slope >= 2.7, "slope {slope}");
}

#[test]
fn cross_entropy_prefers_the_truth() {
    let m = ExpFamilyModel::BernoulliLogit;
    let f = FeatureMap::Row { dim: 2 };
    let h = FeatureDistribution::standard_normal(2, false);
    let mut rng = stream(12, 0, 0, Purpose::MonteCarlo);
    let x = h.sample_rows(10_000, &mut rng);
    let y: Vec<f64> = x
        .chunks_exact(2)
        .map(|r| m.sample_response(&[r[0] - r[1]], &mut rng).unwrap())
        .collect();
    let at_truth = test_ce_loss(&m, &f, &[1.0, -1.0], &x, &y).unwrap();
    let at_zero = test_ce_loss(&m, &f, &[0.0, 0.0], &x, &y).unwrap();
    assert!(at_truth < at_zero);
    assert!((at_zero - 2f64.ln()).abs() < 1e-12);
}

#[test]
fn report_ties_are_to_mse_ratio() {
    let cfg = Preset::Logistic.config(200, 5, WeightScheme::Augment, 1);
    let ens = run_ensemble(&cfg, 40, 2).unwrap();
    let report = ComparisonReport::from_workflow(&ens, &DMatrix::identity(2, 2));
    for r in &report.rows {
        assert!((r.are_vs_gen1 * r.mse_ratio - 1.0).abs() < 1e-12);
    }
    assert_eq!(report.rows[0].kl_ratio, 1.0);
    let spec = LimitProcessSpec::scalar(1.0, 1.0, LimitScheme::Discard).unwrap();
    let lim = ComparisonReport::from_limit(&simulate_ensemble(&spec, 5, 2000, 1, 1).unwrap());
    for r in &lim.rows {
        assert!((r.are_vs_gen1 * r.mse_ratio - 1.0).abs() < 1e-12);
    }
}

#[test]
fn exact_and_quadratic_kl_curves_agree_for_gaussian_models() {
    let cfg = Preset::Gaussian.config(500, 4, WeightScheme::Discard, 2);
    let ens = run_ensemble(&cfg, 30, 1).unwrap();
    let q = kl_ratio_curve(&ens, &DMatrix::from_element(1, 1, 1.0));
    let mut rng = stream(0, 0, 0, Purpose::MonteCarlo);
    let e = kl_exact_ratio_curve(&ens, &cfg.model, &cfg.fmap, &cfg.features, 0, &mut rng).unwrap();
    for (a, b) in q.iter().zip(&e) {
        assert!((a.value - b.value).abs() < 1e-9);
    }
}
