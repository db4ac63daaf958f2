//! Block-fading gain generation.
//!
//! Every slot owns a fixed window of the ChaCha8 key stream, so a sample is
//! a pure function of `(seed, slot)`. Sequential iteration and random access
//! through [`sample_slot`] therefore produce bit-identical gains, and runs
//! that share a seed share one fading realization.
//!
//! Per slot the window holds `N` uplink draws followed by `N` downlink draws.
//! In time-division mode the downlink draws are skipped and `y` copies `x`,
//! which keeps the uplink gains identical across modes for a given seed.

use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::model::{ChannelSample, Mode, SystemParams};

/// A two-point gain law used for enumerable test instances.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TwoPointLaw {
    pub low: f64,
    pub high: f64,
    /// Probability of the `low` support point.
    pub p_low: f64,
}

impl TwoPointLaw {
    pub fn mean(&self) -> f64 {
        self.p_low * self.low + (1.0 - self.p_low) * self.high
    }

    /// Support points with their probabilities, zero-probability points dropped.
    pub fn atoms(&self) -> Vec<(f64, f64)> {
        [(self.low, self.p_low), (self.high, 1.0 - self.p_low)]
            .into_iter()
            .filter(|(_, p)| *p > 0.0)
            .collect()
    }

    #[inline]
    fn draw(&self, u: f64) -> f64 {
        if u < self.p_low {
            self.low
        } else {
            self.high
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum FadingLaw {
    /// Rayleigh fading: exponentially distributed power gains.
    Exponential { mean_x: Vec<f64>, mean_y: Vec<f64> },
    /// Independent two-point laws per user and link.
    TwoPoint {
        x: Vec<TwoPointLaw>,
        y: Vec<TwoPointLaw>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FadingConfig {
    pub seed: u64,
    pub law: FadingLaw,
}

impl FadingConfig {
    /// Rayleigh fading with means `1 / (N0 * PL)` taken from the system.
    pub fn rayleigh(params: &SystemParams, seed: u64) -> Self {
        let n = params.n_users;
        FadingConfig {
            seed,
            law: FadingLaw::Exponential {
                mean_x: vec![params.mean_uplink_gain(); n],
                mean_y: vec![params.mean_downlink_gain(); n],
            },
        }
    }

    /// Same law with a different seed.
    pub fn with_seed(&self, seed: u64) -> Self {
        FadingConfig {
            seed,
            law: self.law.clone(),
        }
    }

    pub fn n_users(&self) -> usize {
        match &self.law {
            FadingLaw::Exponential { mean_x, .. } => mean_x.len(),
            FadingLaw::TwoPoint { x, .. } => x.len(),
        }
    }

    pub fn mean_x(&self) -> Vec<f64> {
        match &self.law {
            FadingLaw::Exponential { mean_x, .. } => mean_x.clone(),
            FadingLaw::TwoPoint { x, .. } => x.iter().map(TwoPointLaw::mean).collect(),
        }
    }

    pub fn mean_y(&self) -> Vec<f64> {
        match &self.law {
            FadingLaw::Exponential { mean_y, .. } => mean_y.clone(),
            FadingLaw::TwoPoint { y, .. } => y.iter().map(TwoPointLaw::mean).collect(),
        }
    }

    /// Mean of the gains that feed the harvester in the given mode.
    pub fn mean_harvest_gain(&self, mode: Mode) -> Vec<f64> {
        match mode {
            Mode::Tdt => self.mean_x(),
            Mode::Fdt => self.mean_y(),
        }
    }

    pub fn validate(&self, params: &SystemParams) -> Result<()> {
        let n = params.n_users;
        match &self.law {
            FadingLaw::Exponential { mean_x, mean_y } => {
                check_len("mean_x", n, mean_x.len())?;
                check_len("mean_y", n, mean_y.len())?;
                if mean_x
                    .iter()
                    .chain(mean_y)
                    .any(|m| !(*m > 0.0 && m.is_finite()))
                {
                    return Err(Error::InvalidParameter(
                        "fading means must be positive".into(),
                    ));
                }
            }
            FadingLaw::TwoPoint { x, y } => {
                check_len("two-point x laws", n, x.len())?;
                check_len("two-point y laws", n, y.len())?;
                for law in x.iter().chain(y) {
                    let ok = law.low >= 0.0
                        && law.high >= 0.0
                        && law.low.is_finite()
                        && law.high.is_finite()
                        && (0.0..=1.0).contains(&law.p_low)
                        && law.mean() > 0.0;
                    if !ok {
                        return Err(Error::InvalidParameter(format!(
                            "bad two-point law {law:?}"
                        )));
                    }
                }
            }
        }
        Ok(())
    }
}

#[inline]
fn unit_interval(word: u64) -> f64 {
    (word >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Sequential sampler positioned at an arbitrary slot.
pub struct FadingStream<'a> {
    cfg: &'a FadingConfig,
    mode: Mode,
    n_users: usize,
    rng: ChaCha8Rng,
}

impl<'a> FadingStream<'a> {
    pub fn new(cfg: &'a FadingConfig, mode: Mode, start_slot: u64) -> Self {
        let n_users = cfg.n_users();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_word_pos(start_slot as u128 * words_per_slot(n_users));
        FadingStream {
            cfg,
            mode,
            n_users,
            rng,
        }
    }

    /// Fills `x` and `y` with the next slot's gains.
    pub fn next_into(&mut self, x: &mut [f64], y: &mut [f64]) {
        let n = self.n_users;
        for (i, slot) in x.iter_mut().enumerate().take(n) {
            let u = unit_interval(self.rng.next_u64());
            *slot = self.draw(true, i, u);
        }
        match self.mode {
            Mode::Tdt => {
                // keep the window aligned even though the draws are unused
                for _ in 0..n {
                    self.rng.next_u64();
                }
                y[..n].copy_from_slice(&x[..n]);
            }
            Mode::Fdt => {
                for (i, slot) in y.iter_mut().enumerate().take(n) {
                    let u = unit_interval(self.rng.next_u64());
                    *slot = self.draw(false, i, u);
                }
            }
        }
    }

    #[inline]
    fn draw(&self, uplink: bool, user: usize, u: f64) -> f64 {
        match &self.cfg.law {
            FadingLaw::Exponential { mean_x, mean_y } => {
                let mean = if uplink { mean_x[user] } else { mean_y[user] };
                -mean * (-u).ln_1p()
            }
            FadingLaw::TwoPoint { x, y } => {
                if uplink {
                    x[user].draw(u)
                } else {
                    y[user].draw(u)
                }
            }
        }
    }
}

impl Iterator for FadingStream<'_> {
    type Item = ChannelSample;

    fn next(&mut self) -> Option<ChannelSample> {
        let mut x = vec![0.0; self.n_users];
        let mut y = vec![0.0; self.n_users];
        self.next_into(&mut x, &mut y);
        Some(ChannelSample { x, y })
    }
}

/// 32-bit key-stream words reserved per slot: two u64 draws per user.
fn words_per_slot(n_users: usize) -> u128 {
    4 * n_users as u128
}

/// Gains of one slot, as a pure function of `(cfg.seed, slot)`.
pub fn sample_slot(cfg: &FadingConfig, params: &SystemParams, slot: u64) -> ChannelSample {
    FadingStream::new(cfg, params.mode, slot)
        .next()
        .expect("fading stream is infinite")
}

/// Sample mean of the uplink gains over the first `n_slots` slots.
pub fn empirical_mean_gain(
    cfg: &FadingConfig,
    params: &SystemParams,
    n_slots: usize,
) -> Result<Vec<f64>> {
    if n_slots == 0 {
        return Err(Error::InvalidParameter("n_slots must be at least 1".into()));
    }
    let n = cfg.n_users();
    let mut sum = vec![0.0; n];
    let mut x = vec![0.0; n];
    let mut y = vec![0.0; n];
    let mut stream = FadingStream::new(cfg, params.mode, 0);
    for _ in 0..n_slots {
        stream.next_into(&mut x, &mut y);
        sum.iter_mut().zip(&x).for_each(|(s, v)| *s += v);
    }
    Ok(sum.into_iter().map(|s| s / n_slots as f64).collect())
}

/// A materialized block of slots, stored row-major (`slot * n_users + user`).
#[derive(Debug, Clone)]
pub struct FrozenStream {
    n_users: usize,
    mode: Mode,
    x: Vec<f64>,
    y: Vec<f64>,
}

impl FrozenStream {
    pub fn generate(cfg: &FadingConfig, mode: Mode, start_slot: u64, n_slots: usize) -> Self {
        let n = cfg.n_users();
        let mut x = vec![0.0; n * n_slots];
        let mut y = vec![0.0; n * n_slots];
        let mut stream = FadingStream::new(cfg, mode, start_slot);
        for (xs, ys) in x.chunks_exact_mut(n).zip(y.chunks_exact_mut(n)) {
            stream.next_into(xs, ys);
        }
        FrozenStream {
            n_users: n,
            mode,
            x,
            y,
        }
    }

    pub fn len(&self) -> usize {
        if self.n_users == 0 {
            0
        } else {
            self.x.len() / self.n_users
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn n_users(&self) -> usize {
        self.n_users
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    #[inline]
    pub fn x(&self, slot: usize) -> &[f64] {
        &self.x[slot * self.n_users..(slot + 1) * self.n_users]
    }

    #[inline]
    pub fn y(&self, slot: usize) -> &[f64] {
        &self.y[slot * self.n_users..(slot + 1) * self.n_users]
    }

    pub fn sample(&self, slot: usize) -> ChannelSample {
        ChannelSample {
            x: self.x(slot).to_vec(),
            y: self.y(slot).to_vec(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params(mode: Mode) -> SystemParams {
        SystemParams::reference(mode)
    }

    #[test]
    fn reference_means_are_unity() {
        let cfg = FadingConfig::rayleigh(&params(Mode::Fdt), 1);
        assert_eq!(cfg.mean_x(), vec![1.0, 1.0]);
        assert_eq!(cfg.mean_y(), vec![1.0, 1.0]);
    }

    #[test]
    fn counter_based_matches_sequential() {
        let p = params(Mode::Fdt);
        let cfg = FadingConfig::rayleigh(&p, 42);
        let seq: Vec<_> = FadingStream::new(&cfg, p.mode, 0).take(50).collect();
        for (slot, s) in seq.iter().enumerate() {
            assert_eq!(&sample_slot(&cfg, &p, slot as u64), s);
        }
        let frozen = FrozenStream::generate(&cfg, p.mode, 10, 5);
        assert_eq!(frozen.sample(2), seq[12]);
    }

    #[test]
    fn tdt_is_reciprocal_and_shares_uplink_with_fdt() {
        let tdt = params(Mode::Tdt);
        let fdt = params(Mode::Fdt);
        let cfg = FadingConfig::rayleigh(&tdt, 7);
        for slot in 0..100 {
            let a = sample_slot(&cfg, &tdt, slot);
            let b = sample_slot(&cfg, &fdt, slot);
            assert_eq!(a.x, a.y);
            assert_eq!(a.x, b.x);
        }
    }

    #[test]
    fn single_slot_mean_is_the_sample() {
        let p = params(Mode::Tdt);
        let cfg = FadingConfig::rayleigh(&p, 3);
        let m = empirical_mean_gain(&cfg, &p, 1).unwrap();
        assert_eq!(m, sample_slot(&cfg, &p, 0).x);
        assert!(empirical_mean_gain(&cfg, &p, 0).is_err());
    }

    #[test]
    fn two_point_law_mean() {
        let law = TwoPointLaw {
            low: 0.5,
            high: 2.0,
            p_low: 0.5,
        };
        assert_eq!(law.mean(), 1.25);
        assert_eq!(law.atoms().len(), 2);
        let degenerate = TwoPointLaw {
            low: 1.0,
            high: 3.0,
            p_low: 1.0,
        };
        assert_eq!(degenerate.atoms(), vec![(1.0, 1.0)]);
    }

    #[test]
    fn validation_catches_bad_laws() {
        let p = params(Mode::Fdt);
        let mut cfg = FadingConfig::rayleigh(&p, 0);
        assert!(cfg.validate(&p).is_ok());
        cfg.law = FadingLaw::Exponential {
            mean_x: vec![1.0, 0.0],
            mean_y: vec![1.0, 1.0],
        };
        assert!(cfg.validate(&p).is_err());
        cfg.law = FadingLaw::Exponential {
            mean_x: vec![1.0],
            mean_y: vec![1.0],
        };
        assert!(cfg.validate(&p).is_err());
    }
}
