//! Calibration of the dual prices.
//!
//! The long-term constraints (per-user energy balance and the BS average
//! power budget) are imposed with equality on a frozen sample of slots. This
//! turns the search for the multipliers into deterministic root finding on
//! piecewise-smooth sample averages, solved by damped multiplicative updates
//! in the log domain:
//!
//! ```text
//! lambda_k <- lambda_k * exp(step_t * clamp(ln(1 + r_k)))
//! step_t    = c / sqrt(t)
//! ```
//!
//! where `r_k` is the relative residual of constraint `k`. A positive user
//! residual (spending above harvest) raises that user's price, a positive
//! BS residual (average power above budget) raises `lambda0`. Each component
//! carries its own factor on top of `c / sqrt(t)`: halved whenever its
//! residual changes sign, grown while the sign persists, and capped so the
//! step never exceeds `c`. A residual that jumps with a discrete fading law
//! then cannot stall the others. The best point seen is returned.

use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::allocation::Policy;
use crate::error::{check_len, Error, Result};
use crate::fading::{FadingConfig, FrozenStream};
use crate::model::{Mode, Multipliers, SystemParams, Weights};

/// Slots per parallel work unit. Fixed so sums are reproducible for any
/// thread count.
pub(crate) const CHUNK: usize = 16_384;

/// Largest log-domain move allowed in one update.
const MAX_LOG_STEP: f64 = 2.0;
/// Iterations without a new best point before the solver restarts.
const STALL_LIMIT: usize = 60;

/// Largest relative perturbation applied to each multiplier on restart.
const RESTART_JITTER: f64 = 0.03;

/// Fixed so restarts, like everything else, are reproducible.
const RESTART_SEED: u64 = 0x5eed;

/// Tolerance multiplier for every calibration stage but the last.
const WARM_TOLERANCE_FACTOR: f64 = 10.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CalibrationOptions {
    pub tolerance: f64,
    pub max_iter: usize,
    /// Length of the frozen calibration sample.
    pub n_slots: usize,
    /// Seed of the calibration sample; `None` reuses the fading seed.
    pub seed: Option<u64>,
    /// Step constant `c`.
    pub step: f64,
    /// Long samples are first solved on a prefix of this length.
    pub warm_start_slots: usize,
    pub record_log: bool,
}

impl Default for CalibrationOptions {
    fn default() -> Self {
        CalibrationOptions {
            tolerance: 1e-3,
            max_iter: 5000,
            n_slots: 100_000,
            seed: None,
            step: 0.5,
            warm_start_slots: 100_000,
            record_log: false,
        }
    }
}

impl CalibrationOptions {
    pub fn validate(&self) -> Result<()> {
        if !(self.tolerance > 0.0) {
            return Err(Error::InvalidParameter("tolerance must be positive".into()));
        }
        if self.n_slots == 0 {
            return Err(Error::InvalidParameter(
                "calibration needs at least one slot".into(),
            ));
        }
        if !(self.step > 0.0) {
            return Err(Error::InvalidParameter(
                "step constant must be positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationLogRow {
    pub iteration: usize,
    pub lambda0: f64,
    pub lambda: Vec<f64>,
    pub residuals: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub multipliers: Multipliers,
    /// `[bs, user_1, .., user_N]` relative residuals at `multipliers`.
    pub residuals: Vec<f64>,
    pub n_iterations: usize,
    pub n_sample_slots: usize,
    pub converged: bool,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub log: Vec<CalibrationLogRow>,
}

impl CalibrationReport {
    pub fn max_abs_residual(&self) -> f64 {
        self.residuals.iter().fold(0.0, |m, r| m.max(r.abs()))
    }
}

/// Largest violation of the optimality conditions in `residuals`. A
/// constraint whose price is zero, either a BS price that reached zero or
/// a user with zero priority, is slack and only counts when overspent.
pub fn residual_violation(mult: &Multipliers, weights: &Weights, residuals: &[f64]) -> Result<f64> {
    check_len("residuals", weights.n_users() + 1, residuals.len())?;
    check_len("multipliers", weights.n_users(), mult.lambda.len())?;
    let slack = std::iter::once(mult.lambda0 == 0.0).chain(weights.mu().iter().map(|m| *m == 0.0));
    Ok(residuals
        .iter()
        .zip(slack)
        .map(|(r, slack)| if slack { r.max(0.0) } else { r.abs() })
        .fold(0.0, f64::max))
}

/// Sample sums of the constrained quantities.
#[derive(Debug, Clone, Default)]
pub(crate) struct Tally {
    pub slots: usize,
    /// Sum of desired powers over uplink slots.
    pub spend: Vec<f64>,
    /// Sum of `P0 * g_n` over slots that harvest.
    pub harvest_gain: Vec<f64>,
    /// Sum of radiated BS power.
    pub bs_power: f64,
}

impl Tally {
    fn zero(n: usize) -> Self {
        Tally {
            slots: 0,
            spend: vec![0.0; n],
            harvest_gain: vec![0.0; n],
            bs_power: 0.0,
        }
    }

    fn merge(mut self, other: &Tally) -> Self {
        self.slots += other.slots;
        self.bs_power += other.bs_power;
        self.spend
            .iter_mut()
            .zip(&other.spend)
            .for_each(|(a, b)| *a += b);
        self.harvest_gain
            .iter_mut()
            .zip(&other.harvest_gain)
            .for_each(|(a, b)| *a += b);
        self
    }
}

/// Where a tally reads its slots from.
#[derive(Clone, Copy)]
pub(crate) enum Slots<'a> {
    Frozen(&'a FrozenStream),
    /// Generated chunk by chunk from the counter-based sampler.
    Lazy(&'a FadingConfig, Mode),
}

pub(crate) fn tally(policy: &Policy, stream: &FrozenStream, n_slots: usize) -> Tally {
    tally_slots(policy, Slots::Frozen(stream), n_slots.min(stream.len()))
}

pub(crate) fn tally_slots(policy: &Policy, slots: Slots<'_>, n_slots: usize) -> Tally {
    let n = match slots {
        Slots::Frozen(s) => s.n_users(),
        Slots::Lazy(cfg, _) => cfg.n_users(),
    };
    let n_chunks = n_slots.div_ceil(CHUNK);
    let parts: Vec<Tally> = (0..n_chunks)
        .into_par_iter()
        .map(|c| {
            let start = c * CHUNK;
            let end = ((c + 1) * CHUNK).min(n_slots);
            let local;
            let (stream, offset) = match slots {
                Slots::Frozen(s) => (s, 0),
                Slots::Lazy(cfg, mode) => {
                    local = FrozenStream::generate(cfg, mode, start as u64, end - start);
                    (&local, start)
                }
            };
            let mut t = Tally::zero(n);
            let mut desired = vec![0.0; n];
            for i in start - offset..end - offset {
                let x = stream.x(i);
                let y = stream.y(i);
                let ctl = policy.decide_into(x, y, &mut desired);
                t.slots += 1;
                t.bs_power += ctl.bs_power;
                if ctl.bs_power > 0.0 {
                    let g = match policy.mode() {
                        Mode::Tdt => x,
                        Mode::Fdt => y,
                    };
                    t.harvest_gain
                        .iter_mut()
                        .zip(g)
                        .for_each(|(h, gi)| *h += ctl.bs_power * gi);
                }
                t.spend.iter_mut().zip(&desired).for_each(|(s, p)| *s += p);
            }
            t
        })
        .collect();
    parts.iter().fold(Tally::zero(n), |acc, t| acc.merge(t))
}

/// Relative residuals `[bs, users..]` from sample sums.
fn residuals_from(t: &Tally, params: &SystemParams, nominal_harvest: &[f64]) -> Vec<f64> {
    let m = t.slots as f64;
    let ep = params.eta_prime();
    let mut r = Vec::with_capacity(1 + t.spend.len());
    r.push((t.bs_power / m - params.p_avg) / params.p_avg);
    for n in 0..t.spend.len() {
        let spend = t.spend[n] / m;
        let harvest = ep * t.harvest_gain[n] / m;
        let scale = harvest.max(1e-9 * nominal_harvest[n]);
        r.push((spend - harvest) / scale);
    }
    r
}

fn nominal_harvest(params: &SystemParams, cfg: &FadingConfig) -> Vec<f64> {
    let ep = params.eta_prime();
    cfg.mean_harvest_gain(params.mode)
        .iter()
        .map(|g| ep * params.p_avg * g)
        .collect()
}

/// Residuals of the energy-balance and BS-budget constraints on a given
/// frozen sample. Index 0 is the BS budget, index `n` user `n - 1`.
pub fn residuals_on(
    stream: &FrozenStream,
    mult: &Multipliers,
    weights: &Weights,
    params: &SystemParams,
    cfg: &FadingConfig,
) -> Result<Vec<f64>> {
    check_len("fading stream", params.n_users, stream.n_users())?;
    let policy = Policy::new(params, weights, mult)?;
    let t = tally(&policy, stream, stream.len());
    Ok(residuals_from(&t, params, &nominal_harvest(params, cfg)))
}

/// Residuals over the first `n_slots` slots of `cfg`'s fading realization.
pub fn constraint_residuals(
    mult: &Multipliers,
    weights: &Weights,
    params: &SystemParams,
    cfg: &FadingConfig,
    n_slots: usize,
) -> Result<Vec<f64>> {
    if n_slots == 0 {
        return Err(Error::InvalidParameter("n_slots must be at least 1".into()));
    }
    check_len("fading config", params.n_users, cfg.n_users())?;
    let policy = Policy::new(params, weights, mult)?;
    let t = tally_slots(&policy, Slots::Lazy(cfg, params.mode), n_slots);
    Ok(residuals_from(&t, params, &nominal_harvest(params, cfg)))
}

/// Starting point placing the BS threshold near the mean priced harvest.
pub fn initial_multipliers(
    weights: &Weights,
    params: &SystemParams,
    cfg: &FadingConfig,
) -> Multipliers {
    let n = params.n_users;
    let ep = params.eta_prime();
    let mean_g = cfg.mean_harvest_gain(params.mode);
    let lambda: Vec<f64> = (0..n)
        .map(|i| weights.mu()[i] / (ep * params.p_avg * mean_g[i] * n as f64))
        .collect();
    let lambda0 = ep * lambda.iter().zip(&mean_g).map(|(l, g)| l * g).sum::<f64>();
    Multipliers { lambda0, lambda }
}

/// How a multiplier may move.
#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) enum Freedom {
    /// Strictly positive.
    Positive,
    /// May reach zero, where a negative residual is complementary slack.
    Vanishing { floor: f64 },
    /// Held fixed; only a positive residual counts.
    Pinned,
}

pub(crate) struct SolveOutcome {
    pub values: Vec<f64>,
    pub residuals: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

/// Log-domain damped root finder shared by the calibration routines.
pub(crate) struct LogSolver<'a> {
    pub tolerance: f64,
    pub max_iter: usize,
    pub step: f64,
    pub freedom: &'a [Freedom],
}

struct SolverState {
    clock: usize,
    iterations: usize,
}

impl LogSolver<'_> {
    fn effective(&self, values: &[f64], r: &[f64]) -> f64 {
        r.iter()
            .zip(values)
            .zip(self.freedom)
            .map(|((&r, &v), f)| match f {
                Freedom::Pinned => r.max(0.0),
                Freedom::Vanishing { .. } if v == 0.0 => r.max(0.0),
                _ => r.abs(),
            })
            .fold(0.0, f64::max)
    }

    fn update(&self, values: &[f64], r: &[f64], step: f64, gain: &[f64]) -> Vec<f64> {
        values
            .iter()
            .zip(r)
            .zip(self.freedom)
            .zip(gain)
            .map(|(((&v, &r), f), &damp)| {
                let step = step * damp;
                let g = if 1.0 + r > 0.0 {
                    (1.0 + r).ln().clamp(-MAX_LOG_STEP, MAX_LOG_STEP)
                } else {
                    -MAX_LOG_STEP
                };
                match *f {
                    Freedom::Pinned => v,
                    Freedom::Positive => v * (step * g).exp(),
                    Freedom::Vanishing { floor } => {
                        if v == 0.0 {
                            if r > 0.0 {
                                floor
                            } else {
                                0.0
                            }
                        } else {
                            let next = v * (step * g).exp();
                            if next < floor && r < 0.0 {
                                0.0
                            } else {
                                next
                            }
                        }
                    }
                }
            })
            .collect()
    }

    fn jitter(&self, values: &[f64], rng: &mut ChaCha8Rng) -> Vec<f64> {
        values
            .iter()
            .zip(self.freedom)
            .map(|(&v, f)| {
                let u = (rng.next_u64() >> 11) as f64 / (1u64 << 53) as f64;
                match f {
                    Freedom::Pinned => v,
                    _ => v * (RESTART_JITTER * (2.0 * u - 1.0)).exp(),
                }
            })
            .collect()
    }

    fn run_stage<F>(
        &self,
        init: Vec<f64>,
        state: &mut SolverState,
        tolerance: f64,
        budget: usize,
        eval: &mut F,
        log: &mut Option<&mut Vec<(usize, Vec<f64>, Vec<f64>)>>,
    ) -> Result<SolveOutcome>
    where
        F: FnMut(&[f64]) -> Result<Vec<f64>>,
    {
        let mut values = init;
        let mut r = eval(&values)?;
        let mut score = self.effective(&values, &r);
        if let Some(log) = log.as_deref_mut() {
            log.push((state.iterations, values.clone(), r.clone()));
        }
        let mut best = (values.clone(), r.clone(), score);
        let mut used = 0;
        // per-component damping; halved whenever that residual changes sign
        let mut gain = vec![1.0; values.len()];
        let mut stalled = 0;
        let mut rng = ChaCha8Rng::seed_from_u64(RESTART_SEED);
        while score > tolerance && used < budget {
            if stalled >= STALL_LIMIT {
                // Decisions that switch on a single slot make the sample
                // residuals jump; the damped iteration then pins itself to
                // one jump. Restart from a jittered best point, where the
                // jumps fall elsewhere relative to the smooth part.
                values = self.jitter(&best.0, &mut rng);
                r = eval(&values)?;
                used += 1;
                state.iterations += 1;
                score = self.effective(&values, &r);
                if let Some(log) = log.as_deref_mut() {
                    log.push((state.iterations, values.clone(), r.clone()));
                }
                if score < best.2 {
                    best = (values.clone(), r.clone(), score);
                }
                gain.iter_mut().for_each(|g| *g = 1.0);
                state.clock = 0;
                stalled = 0;
                continue;
            }
            state.clock += 1;
            let s = self.step / (state.clock as f64).sqrt();
            let next = self.update(&values, &r, s, &gain);
            let r_next = eval(&next)?;
            used += 1;
            state.iterations += 1;
            let score_next = self.effective(&next, &r_next);
            if let Some(log) = log.as_deref_mut() {
                log.push((state.iterations, next.clone(), r_next.clone()));
            }
            if score_next < best.2 {
                best = (next.clone(), r_next.clone(), score_next);
                stalled = 0;
            } else {
                stalled += 1;
            }
            // effective step c * gain / sqrt(t) never exceeds c
            let cap = ((state.clock + 1) as f64).sqrt();
            for ((g, a), b) in gain.iter_mut().zip(&r).zip(&r_next) {
                // a zero residual carries no direction
                if a * b < 0.0 && a.abs() > tolerance {
                    *g *= 0.5;
                } else if a * b > 0.0 {
                    *g = (*g * 1.2).min(cap);
                }
            }
            values = next;
            r = r_next;
            score = score_next;
        }
        let converged = best.2 <= tolerance;
        Ok(SolveOutcome {
            values: best.0,
            residuals: best.1,
            iterations: used,
            converged,
        })
    }

    /// Runs the update on a sequence of increasingly long samples; `eval`
    /// receives the stage index and the candidate values.
    pub fn solve<F>(
        &self,
        init: Vec<f64>,
        stages: usize,
        mut eval: F,
        mut log: Option<&mut Vec<(usize, Vec<f64>, Vec<f64>)>>,
    ) -> Result<SolveOutcome>
    where
        F: FnMut(usize, &[f64]) -> Result<Vec<f64>>,
    {
        let mut state = SolverState {
            clock: 0,
            iterations: 0,
        };
        let mut values = init;
        let mut outcome = None;
        for stage in 0..stages {
            state.clock = 0;
            let remaining = self.max_iter - state.iterations;
            // short warm-up samples are too coarse for the final tolerance:
            // one slot changing its decision can move a residual past it
            let (tolerance, budget) = if stage + 1 < stages {
                (
                    WARM_TOLERANCE_FACTOR * self.tolerance,
                    remaining.min(self.max_iter / 4),
                )
            } else {
                (self.tolerance, remaining)
            };
            let out = self.run_stage(
                values.clone(),
                &mut state,
                tolerance,
                budget,
                &mut |v: &[f64]| eval(stage, v),
                &mut log,
            )?;
            values = out.values.clone();
            outcome = Some(out);
        }
        let mut out = outcome.expect("at least one stage");
        out.iterations = state.iterations;
        Ok(out)
    }
}

fn user_freedom(weights: &Weights) -> impl Iterator<Item = Freedom> + '_ {
    weights.mu().iter().map(|&m| {
        if m > 0.0 {
            Freedom::Positive
        } else {
            Freedom::Pinned
        }
    })
}

/// Calibrates the multipliers on the fading realization of `cfg` (or of
/// `opts.seed` when set), starting from [`initial_multipliers`].
pub fn calibrate(
    weights: &Weights,
    params: &SystemParams,
    cfg: &FadingConfig,
    opts: &CalibrationOptions,
) -> Result<CalibrationReport> {
    calibrate_from(weights, params, cfg, opts, None)
}

/// Same as [`calibrate`] with an explicit starting point.
pub fn calibrate_from(
    weights: &Weights,
    params: &SystemParams,
    cfg: &FadingConfig,
    opts: &CalibrationOptions,
    start: Option<&Multipliers>,
) -> Result<CalibrationReport> {
    opts.validate()?;
    let sample_cfg = match opts.seed {
        Some(seed) => cfg.with_seed(seed),
        None => cfg.clone(),
    };
    let stream = FrozenStream::generate(&sample_cfg, params.mode, 0, opts.n_slots);
    calibrate_on(&stream, weights, params, cfg, opts, start)
}

/// Calibration on an already materialized sample.
pub fn calibrate_on(
    stream: &FrozenStream,
    weights: &Weights,
    params: &SystemParams,
    cfg: &FadingConfig,
    opts: &CalibrationOptions,
    start: Option<&Multipliers>,
) -> Result<CalibrationReport> {
    opts.validate()?;
    check_len("weights", params.n_users, weights.n_users())?;
    check_len("fading stream", params.n_users, stream.n_users())?;
    let n = params.n_users;
    let init = match start {
        Some(m) => {
            check_len("start multipliers", n, m.lambda.len())?;
            m.clone()
        }
        None => initial_multipliers(weights, params, cfg),
    };
    let mut init_values = Vec::with_capacity(n + 1);
    init_values.push(init.lambda0);
    init_values.extend(
        init.lambda
            .iter()
            .zip(weights.mu())
            .map(|(&l, &m)| if m > 0.0 { l } else { 0.0 }),
    );

    let lambda0_scale = if init.lambda0 > 0.0 {
        init.lambda0
    } else {
        initial_multipliers(weights, params, cfg)
            .lambda0
            .max(f64::MIN_POSITIVE)
    };
    let mut freedom = vec![Freedom::Vanishing {
        floor: 1e-12 * lambda0_scale,
    }];
    freedom.extend(user_freedom(weights));

    let total = stream.len();
    let lengths: Vec<usize> = if total > opts.warm_start_slots && opts.warm_start_slots > 0 {
        vec![opts.warm_start_slots, total]
    } else {
        vec![total]
    };
    let nominal = nominal_harvest(params, cfg);

    let solver = LogSolver {
        tolerance: opts.tolerance,
        max_iter: opts.max_iter,
        step: opts.step,
        freedom: &freedom,
    };
    let mut raw_log = Vec::new();
    let out = solver.solve(
        init_values,
        lengths.len(),
        |stage, v| {
            let mult = Multipliers {
                lambda0: v[0],
                lambda: v[1..].to_vec(),
            };
            let policy = Policy::new(params, weights, &mult)?;
            let t = tally(&policy, stream, lengths[stage]);
            Ok(residuals_from(&t, params, &nominal))
        },
        opts.record_log.then_some(&mut raw_log),
    )?;

    let multipliers = Multipliers {
        lambda0: out.values[0],
        lambda: out.values[1..].to_vec(),
    };
    let log = raw_log
        .into_iter()
        .map(|(iteration, v, residuals)| CalibrationLogRow {
            iteration,
            lambda0: v[0],
            lambda: v[1..].to_vec(),
            residuals,
        })
        .collect();
    Ok(CalibrationReport {
        multipliers,
        residuals: out.residuals,
        n_iterations: out.iterations,
        n_sample_slots: total,
        converged: out.converged,
        log,
    })
}
