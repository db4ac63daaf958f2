//! Per-slot control rules for fixed dual prices.
//!
//! Given the priorities `mu` and energy prices `lambda`, an uplink slot
//! maximizes the density
//!
//! ```text
//! sum_n (mu_n - mu_{n+1}) ln(1 + sum_{k<=n} P_k x_k) - sum_n lambda_n P_n
//! ```
//!
//! with users indexed in decreasing priority and `mu_{N+1} = 0`. For each of
//! the `2^N` activity sets the stationary point restricted to that set has a
//! closed form; writing `S_m` for one plus the cumulative received SNR up to
//! the `m`-th active user,
//!
//! ```text
//! S_m = (mu_m - mu_{m+1}) / (lambda_m / x_m - lambda_{m+1} / x_{m+1})   (m < l)
//! S_l = mu_l x_l / lambda_l
//! P_m = (S_m - S_{m-1}) / x_m,  S_0 = 1.
//! ```
//!
//! The density is concave, so the best candidate whose powers are all
//! strictly positive is the global maximizer. The BS radiates either nothing
//! or its peak power, and in time-division mode a slot goes downlink only
//! when the value of harvesting strictly beats the uplink value.

use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::model::{
    slot_rates, ChannelSample, Mode, Multipliers, SlotDecision, SystemParams, Weights, MAX_USERS,
};

/// Users that transmit in a slot, with their powers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActivitySet {
    /// Bit `n` is set when user `n` transmits.
    pub active: u32,
    pub powers: Vec<f64>,
}

impl ActivitySet {
    pub fn is_active(&self, user: usize) -> bool {
        self.active & (1 << user) != 0
    }
}

/// Uplink power rule prepared for one `(weights, multipliers)` pair.
#[derive(Debug, Clone)]
pub struct UplinkRule {
    order: Vec<usize>,
    mu: Vec<f64>,
    lambda: Vec<f64>,
    eligible: u32,
}

impl UplinkRule {
    pub fn new(weights: &Weights, mult: &Multipliers) -> Result<Self> {
        let n = weights.n_users();
        check_len("multipliers", n, mult.lambda.len())?;
        mult.validate()?;
        let order = weights.decode_order().to_vec();
        let mut eligible = 0u32;
        for (pos, &user) in order.iter().enumerate() {
            if weights.mu()[user] > 0.0 {
                if mult.lambda[user] == 0.0 {
                    return Err(Error::DegenerateMultiplier { user });
                }
                eligible |= 1 << pos;
            }
        }
        Ok(UplinkRule {
            mu: order.iter().map(|&u| weights.mu()[u]).collect(),
            lambda: order.iter().map(|&u| mult.lambda[u]).collect(),
            order,
            eligible,
        })
    }

    pub fn n_users(&self) -> usize {
        self.order.len()
    }

    /// Writes the optimal powers (user indexing) into `powers` and returns
    /// `(density value, activity mask in user indexing)`.
    pub fn solve(&self, x: &[f64], powers: &mut [f64]) -> (f64, u32) {
        let n = self.order.len();
        let mut xs = [0.0; MAX_USERS];
        let mut base = 0u32;
        for (pos, &user) in self.order.iter().enumerate() {
            xs[pos] = x[user];
            if self.eligible & (1 << pos) != 0 && x[user] > 0.0 {
                base |= 1 << pos;
            }
        }

        let mut best_value = 0.0;
        let mut best_mask = 0u32;
        let mut best = [0.0; MAX_USERS];
        let mut cand = [0.0; MAX_USERS];
        let mut positions = [0usize; MAX_USERS];
        // ascending masks; the empty set (value 0) wins ties
        for mask in 1..=base {
            if mask & !base != 0 {
                continue;
            }
            let mut l = 0;
            for pos in 0..n {
                if mask & (1 << pos) != 0 {
                    positions[l] = pos;
                    l += 1;
                }
            }
            if let Some(value) = self.candidate(&xs, &positions[..l], &mut cand) {
                if value > best_value {
                    best_value = value;
                    best_mask = mask;
                    best[..n].copy_from_slice(&cand[..n]);
                }
            }
        }

        let mut user_mask = 0u32;
        for (pos, &user) in self.order.iter().enumerate() {
            powers[user] = if best_mask & (1 << pos) != 0 {
                best[pos]
            } else {
                0.0
            };
            if best_mask & (1 << pos) != 0 {
                user_mask |= 1 << user;
            }
        }
        (best_value, user_mask)
    }

    /// Closed-form powers for one activity set (sorted positions). Returns
    /// the density value when every power is strictly positive and finite.
    fn candidate(&self, xs: &[f64], active: &[usize], out: &mut [f64]) -> Option<f64> {
        let l = active.len();
        out[..self.order.len()].iter_mut().for_each(|p| *p = 0.0);
        for (m, &p) in active.iter().enumerate() {
            let upper = if m + 1 == l {
                self.mu[p] / self.lambda[p]
            } else {
                let q = active[m + 1];
                (self.mu[p] - self.mu[q]) / (self.lambda[p] - self.lambda[q] * xs[p] / xs[q])
            };
            let lower = if m == 0 {
                1.0 / xs[p]
            } else {
                let r = active[m - 1];
                (self.mu[r] - self.mu[p]) / (-self.lambda[p] + self.lambda[r] * xs[p] / xs[r])
            };
            let power = upper - lower;
            if !(power > 0.0 && power.is_finite()) {
                return None;
            }
            out[p] = power;
        }

        let mut received = 0.0;
        let mut value = 0.0;
        for (m, &p) in active.iter().enumerate() {
            received += out[p] * xs[p];
            let next_mu = if m + 1 == l {
                0.0
            } else {
                self.mu[active[m + 1]]
            };
            value += (self.mu[p] - next_mu) * received.ln_1p() - self.lambda[p] * out[p];
        }
        Some(value)
    }
}

/// Optimal uplink activity set and powers for one slot.
pub fn ehu_powers(
    sample: &ChannelSample,
    weights: &Weights,
    mult: &Multipliers,
) -> Result<ActivitySet> {
    check_len("channel sample", weights.n_users(), sample.n_users())?;
    let rule = UplinkRule::new(weights, mult)?;
    let mut powers = vec![0.0; weights.n_users()];
    let (_, active) = rule.solve(&sample.x, &mut powers);
    Ok(ActivitySet { active, powers })
}

#[inline]
fn bs_rule(gains: &[f64], lambda: &[f64], lambda0: f64, eta_prime: f64, p_max: f64) -> f64 {
    let priced: f64 = gains.iter().zip(lambda).map(|(g, l)| g * l).sum();
    if priced >= lambda0 / eta_prime {
        p_max
    } else {
        0.0
    }
}

/// Bang-bang BS power: peak power when the priced harvest
/// `sum_n lambda_n g_n` reaches `lambda0 / eta'`, otherwise zero. The gains
/// are the uplink gains in TDT and the downlink gains in FDT.
pub fn bs_power(sample: &ChannelSample, mult: &Multipliers, params: &SystemParams) -> Result<f64> {
    check_len("channel sample", params.n_users, sample.n_users())?;
    check_len("multipliers", params.n_users, mult.lambda.len())?;
    Ok(bs_rule(
        sample.harvest_gains(params.mode),
        &mult.lambda,
        mult.lambda0,
        params.eta_prime(),
        params.p_max,
    ))
}

/// Outcome of [`Policy::decide_into`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SlotControl {
    pub downlink: bool,
    pub bs_power: f64,
    /// Uplink density at the chosen powers (nats).
    pub uplink_value: f64,
    /// BS term `P0 (eta' sum lambda g - lambda0)` of the BS hypothesis.
    pub downlink_value: f64,
}

/// Complete per-slot policy for one mode, priority vector and dual point.
#[derive(Debug, Clone)]
pub struct Policy {
    mode: Mode,
    p_max: f64,
    eta_prime: f64,
    lambda0: f64,
    lambda: Vec<f64>,
    uplink: UplinkRule,
}

impl Policy {
    pub fn new(params: &SystemParams, weights: &Weights, mult: &Multipliers) -> Result<Self> {
        check_len("weights", params.n_users, weights.n_users())?;
        Ok(Policy {
            mode: params.mode,
            p_max: params.p_max,
            eta_prime: params.eta_prime(),
            lambda0: mult.lambda0,
            lambda: mult.lambda.clone(),
            uplink: UplinkRule::new(weights, mult)?,
        })
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    /// Hot-loop form: fills `desired` (zeroed on downlink slots).
    #[inline]
    pub fn decide_into(&self, x: &[f64], y: &[f64], desired: &mut [f64]) -> SlotControl {
        let (uplink_value, _) = self.uplink.solve(x, desired);
        match self.mode {
            Mode::Tdt => {
                let p0 = bs_rule(x, &self.lambda, self.lambda0, self.eta_prime, self.p_max);
                let priced: f64 = x.iter().zip(&self.lambda).map(|(g, l)| g * l).sum();
                let downlink_value = p0 * (self.eta_prime * priced - self.lambda0);
                if uplink_value >= downlink_value {
                    SlotControl {
                        downlink: false,
                        bs_power: 0.0,
                        uplink_value,
                        downlink_value,
                    }
                } else {
                    desired.iter_mut().for_each(|p| *p = 0.0);
                    SlotControl {
                        downlink: true,
                        bs_power: p0,
                        uplink_value,
                        downlink_value,
                    }
                }
            }
            Mode::Fdt => {
                let p0 = bs_rule(y, &self.lambda, self.lambda0, self.eta_prime, self.p_max);
                let priced: f64 = y.iter().zip(&self.lambda).map(|(g, l)| g * l).sum();
                SlotControl {
                    downlink: false,
                    bs_power: p0,
                    uplink_value,
                    downlink_value: p0 * (self.eta_prime * priced - self.lambda0),
                }
            }
        }
    }

    pub fn decide(&self, sample: &ChannelSample, weights: &Weights) -> Result<SlotDecision> {
        let n = self.uplink.n_users();
        check_len("channel sample", n, sample.n_users())?;
        let mut desired = vec![0.0; n];
        let ctl = self.decide_into(&sample.x, &sample.y, &mut desired);
        let rates = slot_rates(&sample.x, &desired, weights)?;
        Ok(SlotDecision {
            downlink: ctl.downlink,
            bs_power: ctl.bs_power,
            desired,
            rates,
        })
    }
}

fn require_mode(params: &SystemParams, mode: Mode) -> Result<()> {
    if params.mode == mode {
        Ok(())
    } else {
        Err(Error::InvalidParameter(format!(
            "rule requires {mode} parameters, got {}",
            params.mode
        )))
    }
}

/// Time-division slot decision: uplink unless harvesting is strictly more
/// valuable than the optimal uplink allocation.
pub fn tdt_schedule(
    sample: &ChannelSample,
    weights: &Weights,
    mult: &Multipliers,
    params: &SystemParams,
) -> Result<SlotDecision> {
    require_mode(params, Mode::Tdt)?;
    Policy::new(params, weights, mult)?.decide(sample, weights)
}

/// Frequency-division slot decision: both links act independently.
pub fn fdt_decide(
    sample: &ChannelSample,
    weights: &Weights,
    mult: &Multipliers,
    params: &SystemParams,
) -> Result<SlotDecision> {
    require_mode(params, Mode::Fdt)?;
    Policy::new(params, weights, mult)?.decide(sample, weights)
}

/// Uplink density for arbitrary powers, evaluated in decode order (nats).
pub fn uplink_density(x: &[f64], powers: &[f64], weights: &Weights, mult: &Multipliers) -> f64 {
    let order = weights.decode_order();
    let mu = weights.mu();
    let mut received = 0.0;
    let mut value = 0.0;
    for (m, &user) in order.iter().enumerate() {
        received += powers[user] * x[user];
        let next = order.get(m + 1).map_or(0.0, |&u| mu[u]);
        value += (mu[user] - next) * received.ln_1p() - mult.lambda[user] * powers[user];
    }
    value
}
