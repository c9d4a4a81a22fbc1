use shadowcert_core::smoothing::stats::{
    binom_test_half, binomial_upper_tail, clopper_pearson_lower, inv_norm_cdf,
};
use shadowcert_core::smoothing::{self, predict_from_counts, SmoothingParams};
use shadowcert_core::Tensor;
use shadowcert_testkit::checks::{certifier_suite, statistics_suite};
use shadowcert_testkit::nets::{random_image, random_network};
use shadowcert_testkit::{
    binom_test_oracle, binomial_tail_direct, clopper_pearson_beta, inv_phi_oracle,
};

#[test]
fn statistics_match_oracles() {
    let f = statistics_suite(30, &[0.05, 0.01, 0.001], 1000);
    assert!(f.is_empty(), "{f:#?}");
}

#[test]
fn clopper_pearson_at_large_n_matches_beta_quantile() {
    for (k, n) in [
        (350u64, 400u64),
        (399, 400),
        (201, 400),
        (900, 1000),
        (5000, 10000),
    ] {
        let lib = clopper_pearson_lower(k, n, 0.001).unwrap();
        let oracle = clopper_pearson_beta(k, n, 0.001);
        assert!((lib - oracle).abs() < 1e-8, "{k}/{n}: {lib} vs {oracle}");
    }
}

#[test]
fn binomial_tail_and_test_match_direct_sums() {
    for n in [1u64, 5, 20, 40] {
        for k in 0..=n {
            for p in [0.1, 0.5, 0.93] {
                let (a, b) = (binomial_upper_tail(k, n, p), binomial_tail_direct(k, n, p));
                assert!((a - b).abs() < 1e-12, "tail {k}/{n} at {p}: {a} vs {b}");
            }
            let (a, b) = (binom_test_half(k, n), binom_test_oracle(k, n));
            assert!((a - b).abs() < 1e-12, "test {k}/{n}: {a} vs {b}");
        }
    }
}

#[test]
fn certifier_behaviour() {
    for sigma in [0.12, 0.25, 0.5] {
        let f = certifier_suite(sigma);
        assert!(f.is_empty(), "{f:#?}");
    }
}

#[test]
fn full_consensus_radius_closed_form() {
    let sigma = 0.25;
    let r = smoothing::outcome_from_count(2, 400, 400, 0.001, sigma).unwrap();
    let expected = sigma * inv_phi_oracle(0.001f64.powf(1.0 / 400.0));
    assert!((r.radius().unwrap() - expected).abs() < 1e-6);
    assert_eq!(r.label(), Some(2));
    // The ceiling grows toward 4 sigma only with many more draws.
    let big = smoothing::outcome_from_count(0, 100_000, 100_000, 0.001, sigma).unwrap();
    assert!(big.radius().unwrap() > r.radius().unwrap() && big.radius().unwrap() < 4.0 * sigma);
}

#[test]
fn quantile_inverts_cdf() {
    for p in [1e-300, 1e-10, 0.3, 0.5, 0.7, 1.0 - 1e-10] {
        let z = inv_norm_cdf(p).unwrap();
        assert!((z - inv_phi_oracle(p)).abs() < 1e-9, "{p}");
    }
}

#[test]
fn prediction_needs_a_significant_majority() {
    assert_eq!(predict_from_counts(&[60, 40, 0], 0.05), None);
    assert_eq!(predict_from_counts(&[70, 30, 0], 0.05), Some(0));
    assert_eq!(predict_from_counts(&[0, 10, 90], 0.001), Some(2));
    assert_eq!(predict_from_counts(&[5, 5], 0.5), None);
}

#[test]
fn certification_is_deterministic_and_seed_sensitive() {
    let (net, shape) = random_network(3);
    let x = random_image(1, &shape, 0.0, 1.0);
    let counts = |seed| smoothing::sample_counts(&net, &x, 0.5, 300, seed).unwrap();
    assert_eq!(counts(5), counts(5));
    assert_ne!(counts(5), counts(6));
    assert_eq!(counts(5).iter().sum::<u64>(), 300);
    let p = SmoothingParams::with_sigma(0.25, 9);
    assert_eq!(
        smoothing::certify(&net, &x, &p).unwrap(),
        smoothing::certify(&net, &x, &p).unwrap()
    );
}

#[test]
fn out_of_domain_inputs_still_certify() {
    // Smoothing is defined on all of R^d, so unclipped points are accepted.
    let (net, shape) = random_network(2);
    let x = Tensor::new(shape.clone(), vec![1.5; shape.iter().product()]).unwrap();
    assert!(smoothing::certify(&net, &x, &SmoothingParams::with_sigma(0.1, 1)).is_ok());
}
