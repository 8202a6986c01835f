use adaptmeta::eval::{sample_winds, WindDistribution};
use adaptmeta::prng::PrngKey;

#[test]
fn wind_distributions_carry_the_published_support_and_shapes() {
    let t = WindDistribution::TRAIN;
    assert_eq!((t.lo, t.hi, t.a, t.b), (0.0, 6.0, 5.0, 9.0));
    let t = WindDistribution::TEST;
    assert_eq!((t.lo, t.hi, t.a, t.b), (0.0, 10.0, 5.0, 7.0));
    // lo + (hi - lo) a / (a + b)
    assert!((WindDistribution::TRAIN.mean() - 30.0 / 14.0).abs() < 1e-15);
    assert!((WindDistribution::TEST.mean() - 50.0 / 12.0).abs() < 1e-15);
}

#[test]
fn sampled_winds_match_their_moments_and_support() {
    for (dist, label) in [(WindDistribution::TRAIN, "train"), (WindDistribution::TEST, "test")] {
        let n = 100_000;
        let w = sample_winds(&dist, PrngKey::from_seed(7).split(label), n);
        assert!(w.iter().all(|v| (dist.lo..=dist.hi).contains(v)));
        let mean = w.iter().sum::<f64>() / n as f64;
        let var = w.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        assert!((mean - dist.mean()).abs() < 0.01 * dist.mean(), "{label}: mean {mean}");
        assert!(
            (var - dist.variance()).abs() < 0.03 * dist.variance(),
            "{label}: var {var}"
        );
        // Median of Beta(5, b) lies below the mean since b > a.
        let mut sorted = w.clone();
        sorted.sort_by(f64::total_cmp);
        assert!(sorted[n / 2] < mean);
    }
}

#[test]
fn wind_samples_are_reproducible_per_key() {
    let k = PrngKey::from_seed(1);
    assert_eq!(
        sample_winds(&WindDistribution::TEST, k, 50),
        sample_winds(&WindDistribution::TEST, k, 50)
    );
    assert_ne!(
        sample_winds(&WindDistribution::TEST, k, 50),
        sample_winds(&WindDistribution::TEST, k.fold_in(1), 50)
    );
}
