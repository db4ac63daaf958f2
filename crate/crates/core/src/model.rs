//! Domain types and the per-slot physics of the wireless-powered MAC.
//!
//! Conventions used throughout the crate:
//!
//! * Channel gains are power gains normalized by the receiver noise power,
//!   so `power * gain` is an SNR.
//! * Battery contents are kept in the slot-normalized "power" convention:
//!   a slot in which `p` watts are harvested adds `p` to the battery, and
//!   transmitting at `p_out` watts drains `epsilon * p_out`.
//! * Rates are reported in bits per symbol. Lagrangian values, and hence
//!   the energy prices in [`Multipliers`], are measured in nats. The closed
//!   form power rules are exact in that unit system.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};

/// Largest user count supported by the exhaustive activity-set enumeration.
pub const MAX_USERS: usize = 12;

/// Duplexing of power and information transfer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Time division: each slot is either uplink (data) or downlink (power),
    /// and the uplink and downlink gains are reciprocal.
    Tdt,
    /// Frequency division: both links are active in every slot and their
    /// gains are independent.
    Fdt,
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Mode::Tdt => f.write_str("TDT"),
            Mode::Fdt => f.write_str("FDT"),
        }
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "tdt" => Ok(Mode::Tdt),
            "fdt" => Ok(Mode::Fdt),
            other => Err(Error::InvalidParameter(format!("unknown mode {other:?}"))),
        }
    }
}

/// Scalar constants of the system.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemParams {
    pub n_users: usize,
    /// RF-to-battery conversion efficiency, in (0, 1).
    pub eta: f64,
    /// Battery energy drawn per unit of radiated energy, > 1.
    pub epsilon: f64,
    /// Noise power in watts.
    pub n0: f64,
    /// Long-term average BS power budget in watts.
    pub p_avg: f64,
    /// Peak BS power in watts.
    pub p_max: f64,
    pub path_loss_up: f64,
    pub path_loss_down: f64,
    pub mode: Mode,
    /// Optional battery capacity; `None` means unbounded storage.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub battery_capacity: Option<f64>,
}

impl SystemParams {
    /// Two users, `eta = 0.5`, `epsilon = 5`, `N0 = 1e-5`, `P_avg = 10`,
    /// `P_max = 50`, path loss `1e5` on both links.
    pub fn reference(mode: Mode) -> Self {
        SystemParams {
            n_users: 2,
            eta: 0.5,
            epsilon: 5.0,
            n0: 1e-5,
            p_avg: 10.0,
            p_max: 50.0,
            path_loss_up: 1e5,
            path_loss_down: 1e5,
            mode,
            battery_capacity: None,
        }
    }

    pub fn with_mode(&self, mode: Mode) -> Self {
        SystemParams {
            mode,
            ..self.clone()
        }
    }

    /// Combined harvest/PA coefficient `eta * N0 / epsilon`.
    pub fn eta_prime(&self) -> f64 {
        self.eta * self.n0 / self.epsilon
    }

    /// Mean normalized uplink gain `1 / (N0 * PL_up)`.
    pub fn mean_uplink_gain(&self) -> f64 {
        1.0 / (self.n0 * self.path_loss_up)
    }

    /// Mean normalized downlink gain `1 / (N0 * PL_down)`.
    pub fn mean_downlink_gain(&self) -> f64 {
        1.0 / (self.n0 * self.path_loss_down)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidParameter(msg));
        if self.n_users == 0 || self.n_users > MAX_USERS {
            return bad(format!(
                "n_users must be in 1..={MAX_USERS}, got {}",
                self.n_users
            ));
        }
        if !(self.eta > 0.0 && self.eta < 1.0) {
            return bad(format!("eta must lie in (0, 1), got {}", self.eta));
        }
        if !(self.epsilon > 1.0 && self.epsilon.is_finite()) {
            return bad(format!("epsilon must exceed 1, got {}", self.epsilon));
        }
        if !(self.n0 > 0.0 && self.n0.is_finite()) {
            return bad(format!("n0 must be positive, got {}", self.n0));
        }
        if !(self.p_avg > 0.0 && self.p_avg <= self.p_max && self.p_max.is_finite()) {
            return bad(format!(
                "need 0 < p_avg <= p_max, got p_avg={} p_max={}",
                self.p_avg, self.p_max
            ));
        }
        for (name, pl) in [
            ("path_loss_up", self.path_loss_up),
            ("path_loss_down", self.path_loss_down),
        ] {
            if !(pl > 0.0 && pl.is_finite()) {
                return bad(format!("{name} must be positive, got {pl}"));
            }
        }
        if let Some(cap) = self.battery_capacity {
            if !(cap > 0.0) {
                return bad(format!("battery_capacity must be positive, got {cap}"));
            }
        }
        Ok(())
    }

    pub(crate) fn check_user(&self, index: usize) -> Result<()> {
        if index < self.n_users {
            Ok(())
        } else {
            Err(Error::UserIndex {
                index,
                n_users: self.n_users,
            })
        }
    }
}

/// Normalized uplink (`x`) and downlink (`y`) gains of one slot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelSample {
    pub x: Vec<f64>,
    pub y: Vec<f64>,
}

impl ChannelSample {
    pub fn new(x: Vec<f64>, y: Vec<f64>) -> Result<Self> {
        let sample = ChannelSample { x, y };
        sample.validate()?;
        Ok(sample)
    }

    /// A sample with reciprocal links (`y == x`), as in time-division mode.
    pub fn reciprocal(x: Vec<f64>) -> Result<Self> {
        let y = x.clone();
        Self::new(x, y)
    }

    pub fn n_users(&self) -> usize {
        self.x.len()
    }

    /// Gains seen by the energy-harvesting circuit in the given mode.
    pub fn harvest_gains(&self, mode: Mode) -> &[f64] {
        match mode {
            Mode::Tdt => &self.x,
            Mode::Fdt => &self.y,
        }
    }

    pub fn validate(&self) -> Result<()> {
        check_len("downlink gains", self.x.len(), self.y.len())?;
        if self
            .x
            .iter()
            .chain(&self.y)
            .any(|g| !(g.is_finite() && *g >= 0.0))
        {
            return Err(Error::InvalidParameter(
                "channel gains must be finite and nonnegative".into(),
            ));
        }
        Ok(())
    }
}

/// Dual prices of the long-term constraints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Multipliers {
    /// Price of the BS average-power budget.
    pub lambda0: f64,
    /// Per-user price of energy (nats per watt).
    pub lambda: Vec<f64>,
}

impl Multipliers {
    pub fn new(lambda0: f64, lambda: Vec<f64>) -> Result<Self> {
        let m = Multipliers { lambda0, lambda };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        if std::iter::once(&self.lambda0)
            .chain(&self.lambda)
            .any(|l| !(l.is_finite() && *l >= 0.0))
        {
            return Err(Error::InvalidParameter(
                "multipliers must be finite and nonnegative".into(),
            ));
        }
        Ok(())
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Multipliers {
            lambda0: self.lambda0 * factor,
            lambda: self.lambda.iter().map(|l| l * factor).collect(),
        }
    }
}

/// Rate priorities on the simplex together with the decoding order they
/// induce (descending priority, ties broken by ascending user index).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct Weights {
    mu: Vec<f64>,
    order: Vec<usize>,
}

impl Weights {
    pub fn new(mu: Vec<f64>) -> Result<Self> {
        if mu.is_empty() || mu.len() > MAX_USERS {
            return Err(Error::InvalidParameter(format!(
                "need 1..={MAX_USERS} weights, got {}",
                mu.len()
            )));
        }
        if mu.iter().any(|m| !(0.0..=1.0).contains(m)) {
            return Err(Error::InvalidParameter(format!(
                "weights must lie in [0, 1], got {mu:?}"
            )));
        }
        let total: f64 = mu.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidParameter(format!(
                "weights must sum to 1, got {total}"
            )));
        }
        let mut order: Vec<usize> = (0..mu.len()).collect();
        // stable sort keeps ascending index among equal weights
        order.sort_by(|&a, &b| mu[b].total_cmp(&mu[a]));
        Ok(Weights { mu, order })
    }

    /// Unchecked constructor for rules that silence users while keeping the
    /// decode order of the original weights.
    pub(crate) fn from_parts(mu: Vec<f64>, order: Vec<usize>) -> Self {
        Weights { mu, order }
    }

    /// Two-user weights `(mu1, 1 - mu1)`.
    pub fn pair(mu1: f64) -> Result<Self> {
        Self::new(vec![mu1, 1.0 - mu1])
    }

    pub fn mu(&self) -> &[f64] {
        &self.mu
    }

    /// User indices sorted by decreasing priority. The BS decodes this list
    /// back to front, so `order[0]` sees no interference after cancellation.
    pub fn decode_order(&self) -> &[usize] {
        &self.order
    }

    pub fn n_users(&self) -> usize {
        self.mu.len()
    }
}

impl TryFrom<Vec<f64>> for Weights {
    type Error = Error;

    fn try_from(mu: Vec<f64>) -> Result<Self> {
        Weights::new(mu)
    }
}

impl From<Weights> for Vec<f64> {
    fn from(w: Weights) -> Self {
        w.mu
    }
}

/// Control output for one slot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlotDecision {
    /// Downlink slot (power transfer only). Always `false` in FDT, where
    /// both links are active in every slot.
    pub downlink: bool,
    /// BS transmit power in watts.
    pub bs_power: f64,
    /// Desired transmit power of each user in watts.
    pub desired: Vec<f64>,
    /// Per-user rates in bits/symbol at the desired powers.
    pub rates: Vec<f64>,
}

impl SlotDecision {
    pub fn idle(n_users: usize) -> Self {
        SlotDecision {
            downlink: false,
            bs_power: 0.0,
            desired: vec![0.0; n_users],
            rates: vec![0.0; n_users],
        }
    }
}

/// Average rates achieved for one priority vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatePoint {
    /// Average rate per user in bits/symbol.
    pub rates: Vec<f64>,
    pub weights: Weights,
    /// Number of slots averaged; `0` marks an exact (expectation) value.
    pub m_slots: u64,
}

impl RatePoint {
    pub fn weighted(&self) -> f64 {
        weighted_sum_rate(&self.rates, &self.weights)
    }
}

/// Power drawn into a user's battery during one slot.
pub fn harvested_power(
    params: &SystemParams,
    sample: &ChannelSample,
    decision: &SlotDecision,
    user: usize,
) -> Result<f64> {
    params.check_user(user)?;
    check_len("channel sample", params.n_users, sample.n_users())?;
    if !(0.0..=params.p_max).contains(&decision.bs_power) {
        return Err(Error::InvalidParameter(format!(
            "bs power {} outside [0, p_max]",
            decision.bs_power
        )));
    }
    Ok(harvest(
        params,
        sample.harvest_gains(params.mode)[user],
        decision.downlink,
        decision.bs_power,
    ))
}

#[inline]
pub(crate) fn harvest(params: &SystemParams, gain: f64, downlink: bool, bs_power: f64) -> f64 {
    match params.mode {
        Mode::Tdt if !downlink => 0.0,
        _ => params.eta * params.n0 * bs_power * gain,
    }
}

/// Largest transmit power the battery can sustain, capped at the desired
/// power. The caller drains `epsilon` times the returned value.
#[inline]
pub fn clip_transmit_power(params: &SystemParams, battery_level: f64, desired: f64) -> f64 {
    (battery_level / params.epsilon).min(desired)
}

/// Per-user battery contents plus outage accounting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatteryState {
    pub level: Vec<f64>,
    /// Slots in which the battery could not supply the desired power.
    pub outage_count: Vec<u64>,
    pub slot_index: u64,
}

impl BatteryState {
    /// Empty batteries.
    pub fn new(n_users: usize) -> Self {
        BatteryState {
            level: vec![0.0; n_users],
            outage_count: vec![0; n_users],
            slot_index: 0,
        }
    }

    /// Applies one slot in place. `p_out` receives the powers actually
    /// transmitted and `harvested` the power added to each battery.
    pub(crate) fn advance(
        &mut self,
        params: &SystemParams,
        harvest_gains: &[f64],
        downlink: bool,
        bs_power: f64,
        desired: &[f64],
        p_out: &mut [f64],
        harvested: &mut [f64],
    ) {
        for n in 0..self.level.len() {
            let want = if downlink { 0.0 } else { desired[n] };
            let out = clip_transmit_power(params, self.level[n], want);
            if want > 0.0 && out < want {
                self.outage_count[n] += 1;
            }
            let inflow = harvest(params, harvest_gains[n], downlink, bs_power);
            // the max only absorbs rounding in epsilon * (b / epsilon)
            let mut next = (self.level[n] - params.epsilon * out).max(0.0) + inflow;
            if let Some(cap) = params.battery_capacity {
                next = next.min(cap);
            }
            self.level[n] = next;
            p_out[n] = out;
            harvested[n] = inflow;
        }
        self.slot_index += 1;
    }

    /// Applies one slot and returns the transmitted powers.
    pub fn step(
        &mut self,
        params: &SystemParams,
        sample: &ChannelSample,
        decision: &SlotDecision,
    ) -> Result<Vec<f64>> {
        let n = self.level.len();
        check_len("battery state", params.n_users, n)?;
        check_len("channel sample", n, sample.n_users())?;
        check_len("desired powers", n, decision.desired.len())?;
        let mut p_out = vec![0.0; n];
        let mut harvested = vec![0.0; n];
        self.advance(
            params,
            sample.harvest_gains(params.mode),
            decision.downlink,
            decision.bs_power,
            &decision.desired,
            &mut p_out,
            &mut harvested,
        );
        Ok(p_out)
    }
}

/// Pure form of [`BatteryState::step`].
pub fn battery_step(
    state: &BatteryState,
    params: &SystemParams,
    sample: &ChannelSample,
    decision: &SlotDecision,
) -> Result<BatteryState> {
    let mut next = state.clone();
    next.step(params, sample, decision)?;
    Ok(next)
}

/// Per-user rates (bits/symbol) under successive interference cancellation.
///
/// A user sees interference only from users ahead of it in the decode order,
/// i.e. from users with higher priority.
pub fn slot_rates(gains: &[f64], powers: &[f64], weights: &Weights) -> Result<Vec<f64>> {
    check_len("channel gains", weights.n_users(), gains.len())?;
    check_len("powers", weights.n_users(), powers.len())?;
    if powers.iter().any(|p| !(*p >= 0.0)) {
        return Err(Error::InvalidParameter("powers must be nonnegative".into()));
    }
    let mut out = vec![0.0; gains.len()];
    slot_rates_nats(gains, powers, weights.decode_order(), &mut out);
    out.iter_mut().for_each(|r| *r /= std::f64::consts::LN_2);
    Ok(out)
}

/// Unchecked SIC rates in nats.
#[inline]
pub(crate) fn slot_rates_nats(gains: &[f64], powers: &[f64], order: &[usize], out: &mut [f64]) {
    let mut received = 0.0;
    for &n in order {
        let snr = powers[n] * gains[n];
        out[n] = if snr > 0.0 {
            (snr / (1.0 + received)).ln_1p()
        } else {
            0.0
        };
        received += snr;
    }
}

/// `sum_n mu_n R_n`.
pub fn weighted_sum_rate(rates: &[f64], weights: &Weights) -> f64 {
    rates.iter().zip(weights.mu()).map(|(r, m)| r * m).sum()
}
