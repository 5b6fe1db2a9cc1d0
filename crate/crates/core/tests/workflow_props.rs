use synthloop_core::rng::{stream, Purpose};
use synthloop_core::workflow::*;

fn gaussian(scheme: WeightScheme, n: usize, g: usize) -> WorkflowConfig {
    Preset::Gaussian.config(n, g, scheme, 77)
}

#[test]
fn ensembles_do_not_depend_on_pool_width() {
    for preset in [Preset::Gaussian, Preset::Logistic, Preset::Linear] {
        let cfg = preset.config(60, 4, WeightScheme::Subsample, 5);
        let a = run_ensemble(&cfg, 12, 1).unwrap();
        let b = run_ensemble(&cfg, 12, 4).unwrap();
        assert_eq!(a, b, "{}", preset.name());
        assert_eq!(a, run_ensemble(&cfg, 12, 1).unwrap());
    }
}

#[test]
fn replications_with_equal_streams_are_identical() {
    let cfg = gaussian(WeightScheme::Augment, 50, 3);
    let (a, ca) = run_replication(&cfg, 7, DataLaw::Sequential);
    let (b, cb) = run_replication(&cfg, 7, DataLaw::Sequential);
    assert_eq!(a, b);
    assert_eq!(ca, cb);
}

#[test]
fn corpus_chain_is_nested() {
    for scheme in [WeightScheme::Discard, WeightScheme::Augment, WeightScheme::Subsample] {
        let (_, short) = run_replication(&Preset::Logistic.config(40, 3, scheme.clone(), 9), 0, DataLaw::Sequential);
        let (t, long) = run_replication(&Preset::Logistic.config(40, 4, scheme.clone(), 9), 0, DataLaw::Sequential);
        assert_eq!(&long.x[..short.x.len()], &short.x[..]);
        assert_eq!(&long.y[..short.y.len()], &short.y[..]);
        let sizes: Vec<usize> = t.generations.iter().map(|r| r.corpus_size).collect();
        assert_eq!(sizes, vec![40, 80, 120, 160]);
    }
}

#[test]
fn schemes_coincide_at_generation_one() {
    for preset in [Preset::Gaussian, Preset::Logistic, Preset::Linear] {
        let fits: Vec<_> = [WeightScheme::Discard, WeightScheme::Augment, WeightScheme::Subsample]
            .into_iter()
            .map(|s| run_replication(&preset.config(80, 3, s, 11), 3, DataLaw::Sequential).0)
            .collect();
        let first = fits[0].generations[0].theta_hat.clone();
        assert!(fits.iter().all(|t| t.generations[0].theta_hat == first));
        // generation 2 is fit on different weights
        assert_ne!(fits[0].generations[1].theta_hat, fits[1].generations[1].theta_hat);
    }
}

#[test]
fn subsample_inclusion_passes_chi_square() {
    let (g, n) = (4, 3);
    let draws = 100_000;
    let mut counts = vec![0.0; g * n];
    let mut rng = stream(21, 0, 0, Purpose::Weights);
    for _ in 0..draws {
        let w = weights_for_generation(&WeightScheme::Subsample, g, n, &mut rng);
        assert_eq!(w.iter().filter(|v| **v == 1.0).count(), n);
        for (c, v) in counts.iter_mut().zip(w) {
            *c += v;
        }
    }
    let expected = draws as f64 * n as f64 / (g * n) as f64;
    let chi2: f64 = counts.iter().map(|c| (c - expected).powi(2) / expected).sum();
    // 11 degrees of freedom, upper 0.001 quantile
    assert!(chi2 < 31.26, "chi-square {chi2}");
}

#[test]
fn finite_n_variance_ratios_track_the_limit() {
    let targets = [
        (WeightScheme::Discard, vec![1.0, 2.0, 3.0, 4.0]),
        (WeightScheme::Augment, vec![1.0, 1.25, 1.3611, 1.4236]),
    ];
    for (scheme, want) in targets {
        let ens = run_ensemble(&gaussian(scheme.clone(), 10_000, 4), 500, 4).unwrap();
        let base = ens.summaries[0].covariance[(0, 0)];
        for (g, w) in want.iter().enumerate() {
            let r = ens.summaries[g].covariance[(0, 0)] / base;
            assert!((r / w - 1.0).abs() < 0.15, "{} g={}: {r}", scheme.name(), g + 1);
        }
    }
}

#[test]
fn linear_collapse_is_absorbing() {
    // n = d_Θ + 1 with discard makes exact fits likely to degenerate quickly
    let mut cfg = Preset::Linear.config(4, 200, WeightScheme::Discard, 3);
    cfg.features = synthloop_core::expfam::FeatureDistribution::standard_normal(1, true);
    let ens = run_ensemble(&cfg, 20, 2).unwrap();
    let frac: Vec<f64> = ens.summaries.iter().map(|s| s.fraction_degenerate).collect();
    assert!(frac.windows(2).all(|w| w[1] >= w[0]));
    assert!(frac[199] > 0.5, "{}", frac[199]);
    for t in &ens.trajectories {
        if let Some(k) = t.generations.iter().position(|r| r.degenerate) {
            assert!(t.generations[k].failure.is_some());
            assert!(t.generations[k..].iter().all(|r| r.degenerate && r.theta_hat.is_none()));
        }
    }
}
