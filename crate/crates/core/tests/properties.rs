//! Structural invariants checked over randomized inputs.

use proptest::prelude::*;
use proptest::test_runner::Config;

use wpmac::fading::FadingStream;
use wpmac::{
    clip_transmit_power, ehu_powers, slot_rates, ChannelSample, FadingConfig, Mode, Multipliers,
    SystemParams, Weights,
};

mod common;
use common::*;

proptest! {
    #![proptest_config(Config::with_cases(256))]

    #[test]
    fn battery_stays_nonnegative_and_conserves_energy(case in battery_case()) {
        check_battery(case)?;
    }

    #[test]
    fn clip_respects_both_bounds(level in 0.0f64..100.0, desired in 0.0f64..100.0) {
        let p = SystemParams::reference(Mode::Tdt);
        let out = clip_transmit_power(&p, level, desired);
        prop_assert!(out >= 0.0);
        prop_assert!(out <= desired);
        prop_assert!(out <= level / p.epsilon);
        prop_assert!(out == desired || out == level / p.epsilon);
    }

    #[test]
    fn rates_telescope_to_sum_rate(case in rate_case()) {
        check_telescoping(case)?;
    }

    #[test]
    fn rates_follow_a_relabeling(
        (w, x, powers, perm) in (2usize..=5).prop_flat_map(|n| {
            (weights(n), gains(n), prop::collection::vec(0.0f64..50.0, n),
             Just((0..n).collect::<Vec<usize>>()).prop_shuffle())
        })
    ) {
        // user k of the relabeled system is user perm[k] of the original
        let mu: Vec<f64> = perm.iter().map(|&i| w.mu()[i]).collect();
        let distinct = {
            let mut s = mu.clone();
            s.sort_by(f64::total_cmp);
            s.windows(2).all(|p| p[0] != p[1])
        };
        prop_assume!(distinct);
        let w2 = Weights::new(mu).unwrap();
        let x2: Vec<f64> = perm.iter().map(|&i| x[i]).collect();
        let p2: Vec<f64> = perm.iter().map(|&i| powers[i]).collect();
        let r = slot_rates(&x, &powers, &w).unwrap();
        let r2 = slot_rates(&x2, &p2, &w2).unwrap();
        for (k, &i) in perm.iter().enumerate() {
            prop_assert!((r2[k] - r[i]).abs() <= 1e-12 * r[i].max(1.0));
        }
    }

    #[test]
    fn single_user_rule_is_water_filling(x in 0.0f64..50.0, lambda in 1e-3f64..100.0) {
        let w = Weights::new(vec![1.0]).unwrap();
        let m = Multipliers::new(1.0, vec![lambda]).unwrap();
        let s = ChannelSample::reciprocal(vec![x]).unwrap();
        let a = ehu_powers(&s, &w, &m).unwrap();
        let level = if x > 0.0 { 1.0 / lambda - 1.0 / x } else { -1.0 };
        let expected = level.max(0.0);
        prop_assert!((a.powers[0] - expected).abs() <= 1e-12 * expected.max(1.0));
        prop_assert_eq!(a.is_active(0), expected > 0.0);
    }

    #[test]
    fn raising_a_price_never_raises_that_users_power(
        (w, x, m, user, factor) in (1usize..=4).prop_flat_map(|n| {
            (weights(n), gains(n), multipliers(n), 0..n, 1.0f64..10.0)
        })
    ) {
        let s = ChannelSample::reciprocal(x).unwrap();
        let before = ehu_powers(&s, &w, &m).unwrap();
        let mut dearer = m.clone();
        dearer.lambda[user] *= factor;
        let after = ehu_powers(&s, &w, &dearer).unwrap();
        prop_assert!(after.powers[user] <= before.powers[user] * (1.0 + 1e-9) + 1e-12);
    }

    #[test]
    fn active_set_carries_exactly_the_positive_powers(
        (w, x, m) in (1usize..=4).prop_flat_map(|n| (weights(n), gains(n), multipliers(n)))
    ) {
        let s = ChannelSample::reciprocal(x).unwrap();
        let a = ehu_powers(&s, &w, &m).unwrap();
        for (n, p) in a.powers.iter().enumerate() {
            prop_assert!(p.is_finite());
            prop_assert_eq!(a.is_active(n), *p > 0.0);
        }
    }

    #[test]
    fn bs_power_is_bang_bang(case in slot_case()) {
        check_bang_bang(case)?;
    }

    #[test]
    fn decisions_are_binary_and_exclusive(case in slot_case()) {
        check_binary_decision(case)?;
    }

    #[test]
    fn parameters_round_trip_through_json(case in serde_case()) {
        check_round_trip(case)?;
    }
}

proptest! {
    #![proptest_config(Config::with_cases(12))]

    #[test]
    fn fading_is_a_pure_function_of_seed_and_slot(seed in any::<u64>(), start in 0u64..1_000_000, mode in mode()) {
        let cfg = FadingConfig::rayleigh(&SystemParams::reference(mode), seed);
        let a: Vec<ChannelSample> = FadingStream::new(&cfg, mode, start).take(50).collect();
        let b: Vec<ChannelSample> = FadingStream::new(&cfg, mode, start + 10).take(40).collect();
        prop_assert_eq!(&a[10..], &b[..]);
        for s in &a {
            prop_assert!(s.x.iter().chain(&s.y).all(|g| *g >= 0.0 && g.is_finite()));
        }
    }

    #[test]
    fn runs_are_bit_reproducible(case in run_case()) {
        check_reproducible(case)?;
    }
}
