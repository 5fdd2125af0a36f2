//! Calibration and traffic shares of the 19-domain production profile.

use star_ctr::data::{generate, GeneratorConfig, PRODUCTION_PROFILE};

fn large_sample() -> (GeneratorConfig, Vec<(usize, usize)>, Vec<f64>) {
    let config = GeneratorConfig {
        num_examples: 2_000_000,
        ..GeneratorConfig::production()
    };
    let (examples, truth) = generate(&config).unwrap();
    let m = config.num_domains();
    let mut counts = vec![(0, 0); m];
    let mut expected = vec![0.0; m];
    for e in &examples {
        counts[e.domain - 1].0 += 1;
        counts[e.domain - 1].1 += usize::from(e.clicked);
        expected[e.domain - 1] += truth.probability(e);
    }
    for (x, c) in expected.iter_mut().zip(&counts) {
        *x /= c.0 as f64;
    }
    (config, counts, expected)
}

#[test]
fn production_profile_matches_targets() {
    let (config, counts, expected) = large_sample();
    let n: usize = counts.iter().map(|c| c.0).sum();

    // Lowest and highest click rates in the table.
    for p in [13, 15] {
        let (impressions, clicks) = counts[p - 1];
        let target = PRODUCTION_PROFILE[p - 1].1;
        let realized = clicks as f64 / impressions as f64;
        assert!(impressions >= 10_000);
        assert!(
            (realized / target - 1.0).abs() <= 0.10,
            "domain {p}: realized {realized:.5} vs {target}"
        );
    }

    for (p, profile) in config.profiles.iter().enumerate() {
        let (impressions, _) = counts[p];
        // Expected click rate of the drawn impressions, free of label noise.
        if impressions >= 10_000 {
            let rel = expected[p] / profile.base_ctr - 1.0;
            assert!(rel.abs() <= 0.10, "domain {}: expected CTR off by {rel:+.3}", p + 1);
        }
        let share = profile.traffic_share;
        let sigma = (n as f64 * share * (1.0 - share)).sqrt();
        let dev = impressions as f64 - n as f64 * share;
        assert!(dev.abs() <= 3.0 * sigma, "domain {}: {dev:+.0} is beyond 3 sigma ({sigma:.0})", p + 1);
    }
}
