use approx::assert_relative_eq;
use proptest::prelude::*;

use sns_keyrate::bounds::{expected_lower, expected_upper, real_lower, real_upper, TailConfig};
use sns_keyrate::channel::{absolute_plob, linear_model_observed, ChannelParams};
use sns_keyrate::keyrate::{binary_entropy, AnalysisOptions, RateMode};
use sns_keyrate::montecarlo::{simulate, MonteCarloConfig, PairingMode};
use sns_keyrate::optimize::{evaluate, OptimizationSpec};
use sns_keyrate::protocol::{ProtocolParams, Side};

fn tail(log_xi: f64) -> TailConfig {
    TailConfig::new(10f64.powf(log_xi)).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn expectation_bounds_bracket_the_count(log_x in 0.0f64..13.0, log_xi in -15.0f64..-3.0) {
        let x = 10f64.powf(log_x);
        let cfg = tail(log_xi);
        let lo = expected_lower(x, &cfg).unwrap();
        let hi = expected_upper(x, &cfg).unwrap();
        prop_assert!(0.0 <= lo && lo <= x && x <= hi, "{lo} {x} {hi}");
    }

    #[test]
    fn realisation_bounds_bracket_the_mean(log_y in 0.0f64..13.0, log_xi in -15.0f64..-3.0) {
        let y = 10f64.powf(log_y);
        let cfg = tail(log_xi);
        let lo = real_lower(y, &cfg).unwrap();
        let hi = real_upper(y, &cfg).unwrap();
        prop_assert!(0.0 <= lo && lo <= y && y <= hi, "{lo} {y} {hi}");
    }

    #[test]
    fn bounds_are_monotone_in_the_argument(log_x in 0.0f64..12.0, step in 1.0001f64..10.0, log_xi in -12.0f64..-4.0) {
        let cfg = tail(log_xi);
        let (a, b) = (10f64.powf(log_x), 10f64.powf(log_x) * step);
        prop_assert!(expected_lower(a, &cfg).unwrap() <= expected_lower(b, &cfg).unwrap());
        prop_assert!(expected_upper(a, &cfg).unwrap() <= expected_upper(b, &cfg).unwrap());
        prop_assert!(real_lower(a, &cfg).unwrap() <= real_lower(b, &cfg).unwrap());
        prop_assert!(real_upper(a, &cfg).unwrap() <= real_upper(b, &cfg).unwrap());
    }

    #[test]
    fn smaller_failure_probability_widens_bounds(log_x in 1.0f64..12.0, log_xi in -12.0f64..-4.0) {
        let x = 10f64.powf(log_x);
        let (loose, tight) = (tail(log_xi), tail(log_xi - 1.0));
        prop_assert!(expected_lower(x, &tight).unwrap() <= expected_lower(x, &loose).unwrap());
        prop_assert!(expected_upper(x, &tight).unwrap() >= expected_upper(x, &loose).unwrap());
    }

    #[test]
    fn entropy_is_symmetric_and_bounded(x in 0.0f64..=1.0) {
        let h = binary_entropy(x).unwrap();
        prop_assert!((0.0..=1.0).contains(&h));
        assert_relative_eq!(h, binary_entropy(1.0 - x).unwrap(), epsilon = 1e-12);
    }

    #[test]
    fn absolute_plob_falls_with_distance(a in 0.0f64..400.0, b in 0.0f64..400.0, extra in 0.5f64..50.0) {
        let near = ChannelParams { l_ac: a, l_bc: b, ..ChannelParams::default() };
        let far = ChannelParams { l_ac: a + extra, l_bc: b, ..ChannelParams::default() };
        prop_assert!(absolute_plob(&far).unwrap() < absolute_plob(&near).unwrap());
    }

    #[test]
    fn decoded_points_are_valid(x in prop::collection::vec(0.0f64..=1.0, 14)) {
        let spec = OptimizationSpec::asymmetric(RateMode::Aopp, 1, 0);
        let p = spec.decode(&x, &ProtocolParams::default());
        p.validate().unwrap();
        for side in [Side::Alice, Side::Bob] {
            let s = p.side(side);
            prop_assert!(s.mu_1 <= s.mu_2);
            prop_assert!(s.p_1 + s.p_2 < 1.0);
        }
        let back = spec.decode(&spec.encode(&p), &ProtocolParams::default());
        assert_relative_eq!(back.alice.mu_1, p.alice.mu_1, max_relative = 1e-12);
        assert_relative_eq!(back.bob.p_2, p.bob.p_2, max_relative = 1e-9, epsilon = 1e-15);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn rate_does_not_grow_with_intensity_error(
        km in 50.0f64..300.0,
        asym in 0.0f64..60.0,
        d in 0.0f64..0.08,
        extra in 0.001f64..0.05,
    ) {
        let ch = ChannelParams::asymmetric(km + asym, asym);
        let opts = AnalysisOptions::default();
        for mode in [RateMode::Original, RateMode::Aopp] {
            let mut p = ProtocolParams::default();
            p.set_delta(d);
            let small = evaluate(&p, &ch, mode, &opts).unwrap().rate(mode);
            p.set_delta(d + extra);
            let large = evaluate(&p, &ch, mode, &opts).unwrap().rate(mode);
            prop_assert!(large <= small * (1.0 + 1e-12), "{mode:?} {small} -> {large}");
        }
    }

    #[test]
    fn montecarlo_is_reproducible_and_tracks_the_mean(seed in any::<u64>(), km in 20.0f64..150.0) {
        let p = ProtocolParams::default();
        let ch = ChannelParams::symmetric(km);
        let cfg = MonteCarloConfig { n_windows: 1_000_000, seed, fluctuate: false, pairing: PairingMode::Expected };
        let a = simulate(&p, &ch, &cfg).unwrap();
        let b = simulate(&p, &ch, &cfg).unwrap();
        prop_assert_eq!(&a.observed, &b.observed);

        let mut q = p.clone();
        q.n_total = cfg.n_windows as f64;
        let lin = linear_model_observed(&q, &ch).unwrap();
        let (got, want) = (a.observed.n_vacuum_heralds as f64, lin.n_vacuum_heralds as f64);
        prop_assert!((got - want).abs() <= 6.0 * want.sqrt() + 1.0, "{got} vs {want}");
    }
}
