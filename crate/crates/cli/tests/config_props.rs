//! Property tests for configs, tolerances and check evaluation.

use proptest::prelude::*;
use spinamp_cli::{Check, Comparison, ExperimentConfig, Status, Tolerances};

proptest! {
    #[test]
    fn config_round_trips_through_json(
        n in 2usize..100_000,
        seeds in prop::collection::vec(0u64..10_000, 1..8),
        ell in 1usize..200,
        half_grid in 1usize..1000,
        k_max in 1usize..200,
        compact: bool,
        zero_onsager: bool,
    ) {
        let cfg = ExperimentConfig {
            n,
            seeds,
            ell_lower: ell,
            grid: 2 * half_grid,
            k_max,
            compact,
            zero_onsager,
            ..Default::default()
        };
        cfg.validate().unwrap();
        let back: ExperimentConfig = serde_json::from_str(&serde_json::to_string(&cfg).unwrap()).unwrap();
        prop_assert_eq!(serde_json::to_value(&back).unwrap(), serde_json::to_value(&cfg).unwrap());
        prop_assert!(back.stage1_steps() >= back.ell_lower.max(back.k_max));
    }

    #[test]
    fn monte_carlo_tolerance_shrinks_with_n(n in 2usize..1_000_000, lambda in 0.01..1.0f64) {
        let t = Tolerances::default();
        prop_assert!(t.monte_carlo(lambda, 2 * n) < t.monte_carlo(lambda, n));
        prop_assert!(t.monte_carlo(lambda, n) >= t.monte_carlo(1.0, n));
    }

    #[test]
    fn within_is_symmetric(expected in -10.0..10.0f64, delta in -1.0..1.0f64, tol in 0.0..1.0f64) {
        prop_assume!((delta.abs() - tol).abs() > 1e-9);
        let up = Check::new("x", "a", Comparison::Within, expected + delta, expected, tol, "t");
        let down = Check::new("x", "a", Comparison::Within, expected - delta, expected, tol, "t");
        prop_assert_eq!(up.status, down.status);
        prop_assert_eq!(up.status == Status::Pass, delta.abs() <= tol);
    }

    #[test]
    fn at_least_and_at_most_are_one_sided(value in -5.0..5.0f64, bound in -5.0..5.0f64, tol in 0.0..1.0f64) {
        prop_assume!((value - bound).abs() - tol > 1e-9 || tol - (value - bound).abs() > 1e-9);
        let lo = Check::new("x", "a", Comparison::AtLeast, value, bound, tol, "t");
        prop_assert_eq!(lo.status == Status::Pass, value >= bound - tol);
        let hi = Check::new("x", "a", Comparison::AtMost, value, bound, tol, "t");
        prop_assert_eq!(hi.status == Status::Pass, value <= bound + tol);
    }
}
