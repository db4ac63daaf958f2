//! Strategies and invariant checks shared by the property suite and the
//! acceptance report.
#![allow(dead_code)]

use proptest::prelude::*;
use proptest::test_runner::TestCaseError;

use wpmac::model::{battery_step, harvested_power, BatteryState, SlotDecision};
use wpmac::{
    bs_power, calibrate, run_trajectory, slot_rates, CalibrationOptions, ChannelSample,
    FadingConfig, Mode, Multipliers, Policy, SystemParams, TrajectoryResult, Weights,
};

pub type Check = Result<(), TestCaseError>;

pub fn mode() -> impl Strategy<Value = Mode> {
    prop_oneof![Just(Mode::Tdt), Just(Mode::Fdt)]
}

/// Normalized priorities from raw positive draws.
pub fn weights(n: usize) -> impl Strategy<Value = Weights> {
    prop::collection::vec(0.01f64..1.0, n).prop_map(|raw| {
        let s: f64 = raw.iter().sum();
        let mut mu: Vec<f64> = raw.iter().map(|r| r / s).collect();
        // absorb rounding so the sum is exactly representable as 1
        let head: f64 = mu[1..].iter().sum();
        mu[0] = 1.0 - head;
        Weights::new(mu).unwrap()
    })
}

pub fn gains(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(prop_oneof![Just(0.0), 1e-3f64..20.0], n)
}

/// Prices that make the uplink and the BS rule both non-trivial for the
/// reference parameters (`eta' = 1e-6`).
pub fn multipliers(n: usize) -> impl Strategy<Value = Multipliers> {
    (1e-7f64..1e-4, prop::collection::vec(0.05f64..20.0, n))
        .prop_map(|(l0, l)| Multipliers::new(l0, l).unwrap())
}

pub fn params(n: usize, mode: Mode) -> SystemParams {
    SystemParams {
        n_users: n,
        ..SystemParams::reference(mode)
    }
}

fn sample(mode: Mode, x: Vec<f64>, y: Vec<f64>) -> ChannelSample {
    match mode {
        Mode::Tdt => ChannelSample::reciprocal(x).unwrap(),
        Mode::Fdt => ChannelSample::new(x, y).unwrap(),
    }
}

/// One slot of battery input: gains, downlink flag, BS power, desired powers.
pub type BatteryStep = (Vec<f64>, bool, f64, Vec<f64>);

pub fn battery_case() -> impl Strategy<Value = (Mode, Vec<BatteryStep>)> {
    let step = (
        gains(2),
        any::<bool>(),
        prop_oneof![Just(0.0), Just(50.0), 0.0f64..50.0],
        prop::collection::vec(prop_oneof![Just(0.0), 0.0f64..5e-3], 2),
    );
    (mode(), prop::collection::vec(step, 1..60))
}

/// Levels stay nonnegative and change by exactly harvest minus spend.
pub fn check_battery((mode, steps): (Mode, Vec<BatteryStep>)) -> Check {
    let p = params(2, mode);
    let mut state = BatteryState::new(2);
    for (g, downlink, p0, desired) in steps {
        let sample = ChannelSample::new(g.clone(), g).unwrap();
        let decision = SlotDecision {
            downlink: downlink && mode == Mode::Tdt,
            bs_power: p0,
            desired: desired.clone(),
            rates: vec![0.0; 2],
        };
        let before = state.clone();
        let mut probe = state.clone();
        let p_out = probe.step(&p, &sample, &decision).unwrap();
        state = battery_step(&state, &p, &sample, &decision).unwrap();
        prop_assert_eq!(&state, &probe);
        prop_assert_eq!(state.slot_index, before.slot_index + 1);
        for n in 0..2 {
            prop_assert!(state.level[n] >= 0.0);
            let h = harvested_power(&p, &sample, &decision, n).unwrap();
            let expected = before.level[n] + h - p.epsilon * p_out[n];
            let scale = before.level[n].max(h).max(f64::MIN_POSITIVE);
            prop_assert!((state.level[n] - expected).abs() <= 4.0 * f64::EPSILON * scale);
            prop_assert!(p_out[n] <= decision.desired[n]);
            let clipped = decision.desired[n] > 0.0 && p_out[n] < decision.desired[n];
            prop_assert_eq!(
                state.outage_count[n] - before.outage_count[n],
                u64::from(clipped && !decision.downlink)
            );
        }
    }
    Ok(())
}

pub fn rate_case() -> impl Strategy<Value = (Weights, Vec<f64>, Vec<f64>)> {
    (1usize..=5).prop_flat_map(|n| (weights(n), gains(n), prop::collection::vec(0.0f64..50.0, n)))
}

/// Per-user SIC rates add up to the sum-rate of the whole set.
pub fn check_telescoping((w, x, powers): (Weights, Vec<f64>, Vec<f64>)) -> Check {
    let r = slot_rates(&x, &powers, &w).unwrap();
    prop_assert!(r.iter().all(|v| *v >= 0.0));
    let total: f64 = r.iter().sum();
    let received: f64 = powers.iter().zip(&x).map(|(p, g)| p * g).sum();
    let expected = (1.0 + received).log2();
    prop_assert!((total - expected).abs() <= 1e-10 * expected.max(1e-300));
    Ok(())
}

pub fn slot_case() -> impl Strategy<Value = (Mode, Weights, Vec<f64>, Vec<f64>, Multipliers)> {
    (mode(), weights(2), gains(2), gains(2), multipliers(2))
}

pub fn check_bang_bang(
    (mode, _, x, y, m): (Mode, Weights, Vec<f64>, Vec<f64>, Multipliers),
) -> Check {
    let p = params(2, mode);
    let p0 = bs_power(&sample(mode, x, y), &m, &p).unwrap();
    prop_assert!(p0 == 0.0 || p0 == p.p_max);
    Ok(())
}

/// TDT slots are either downlink (BS only) or uplink (users only).
pub fn check_binary_decision(
    (mode, w, x, y, m): (Mode, Weights, Vec<f64>, Vec<f64>, Multipliers),
) -> Check {
    let p = params(2, mode);
    let d = Policy::new(&p, &w, &m)
        .unwrap()
        .decide(&sample(mode, x, y), &w)
        .unwrap();
    prop_assert!(d.bs_power == 0.0 || d.bs_power == p.p_max);
    prop_assert!(d.desired.iter().all(|v| *v >= 0.0 && v.is_finite()));
    prop_assert!(d.rates.iter().all(|v| *v >= 0.0));
    match mode {
        Mode::Tdt if d.downlink => {
            prop_assert!(d.desired.iter().all(|v| *v == 0.0));
            prop_assert!(d.rates.iter().all(|v| *v == 0.0));
        }
        Mode::Tdt => prop_assert_eq!(d.bs_power, 0.0),
        Mode::Fdt => prop_assert!(!d.downlink),
    }
    Ok(())
}

pub type SerdeCase = (Mode, f64, f64, f64, f64, Weights, Multipliers, u64);

pub fn serde_case() -> impl Strategy<Value = SerdeCase> {
    (
        mode(),
        0.01f64..0.99,
        1.01f64..20.0,
        1e-9f64..1e-2,
        0.1f64..100.0,
        weights(3),
        multipliers(3),
        any::<u64>(),
    )
}

pub fn check_round_trip((mode, eta, epsilon, n0, p_avg, w, m, seed): SerdeCase) -> Check {
    let p = SystemParams {
        n_users: 3,
        eta,
        epsilon,
        n0,
        p_avg,
        p_max: p_avg * 3.0,
        ..SystemParams::reference(mode)
    };
    let back: SystemParams = serde_json::from_str(&serde_json::to_string(&p).unwrap()).unwrap();
    prop_assert_eq!(&back, &p);
    let back: Weights = serde_json::from_str(&serde_json::to_string(&w).unwrap()).unwrap();
    prop_assert_eq!(&back, &w);
    let back: Multipliers = serde_json::from_str(&serde_json::to_string(&m).unwrap()).unwrap();
    prop_assert_eq!(&back, &m);
    let cfg = FadingConfig::rayleigh(&p, seed);
    let back: FadingConfig = serde_json::from_str(&serde_json::to_string(&cfg).unwrap()).unwrap();
    prop_assert_eq!(&back, &cfg);
    Ok(())
}

pub fn run_case() -> impl Strategy<Value = (u64, f64, Mode)> {
    (any::<u64>(), 0.0f64..=1.0, mode())
}

/// Calibration and simulation are bit-identical across repeated runs, and
/// the results survive a JSON round trip.
pub fn check_reproducible((seed, mu1, mode): (u64, f64, Mode)) -> Check {
    let p = SystemParams::reference(mode);
    let cfg = FadingConfig::rayleigh(&p, seed);
    let w = Weights::pair(mu1).unwrap();
    let opts = CalibrationOptions {
        n_slots: 20_000,
        warm_start_slots: 5_000,
        max_iter: 100,
        ..Default::default()
    };
    let c1 = calibrate(&w, &p, &cfg, &opts).unwrap();
    let c2 = calibrate(&w, &p, &cfg, &opts).unwrap();
    prop_assert_eq!(&c1, &c2);
    let t1 = run_trajectory(&w, &c1.multipliers, &p, &cfg, 5_000).unwrap();
    let t2 = run_trajectory(&w, &c2.multipliers, &p, &cfg, 5_000).unwrap();
    let j1 = serde_json::to_string(&t1).unwrap();
    prop_assert_eq!(&j1, &serde_json::to_string(&t2).unwrap());
    let back: TrajectoryResult = serde_json::from_str(&j1).unwrap();
    prop_assert_eq!(back, t1);
    Ok(())
}
