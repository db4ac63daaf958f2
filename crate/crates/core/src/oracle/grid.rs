//! Brute-force maximization of the per-slot Lagrangian.

use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::fading::{FadingConfig, FadingStream};
use crate::model::{
    slot_rates, ChannelSample, Mode, Multipliers, SlotDecision, SystemParams, Weights,
};

/// Largest number of grid points evaluated in one pass.
const MAX_EVALUATIONS: u64 = 100_000_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    /// Points per power axis, endpoints included.
    pub points: usize,
    /// Zoom passes around the incumbent after the coarse pass.
    pub refinements: usize,
    /// Half-width of each zoom window, in cells of the previous pass.
    pub window_cells: f64,
    /// Upper end of every power axis in watts.
    pub p_max_grid: f64,
}

impl GridSpec {
    pub fn new(p_max_grid: f64) -> Self {
        GridSpec {
            points: 200,
            refinements: 3,
            window_cells: 2.0,
            p_max_grid,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.points < 2 || !(self.p_max_grid > 0.0) || !(self.window_cells > 0.0) {
            return Err(Error::InvalidParameter(format!("bad grid spec {self:?}")));
        }
        Ok(())
    }
}

/// Per-slot Lagrangian in nats for a complete decision:
/// `sum mu_n R_n - sum lambda_n P_n (uplink) + P0 (eta' sum lambda_n g_n - lambda0)`.
///
/// Rates come from the SIC rate formula, not from the telescoped density
/// the closed-form rules optimize.
pub fn slot_lagrangian(
    sample: &ChannelSample,
    decision: &SlotDecision,
    weights: &Weights,
    mult: &Multipliers,
    params: &SystemParams,
) -> Result<f64> {
    let uplink = if decision.downlink {
        0.0
    } else {
        uplink_lagrangian(&sample.x, &decision.desired, weights, mult)?
    };
    let g = sample.harvest_gains(params.mode);
    let priced: f64 = g.iter().zip(&mult.lambda).map(|(g, l)| g * l).sum();
    let bs = if params.mode == Mode::Tdt && !decision.downlink {
        0.0
    } else {
        decision.bs_power * (params.eta_prime() * priced - mult.lambda0)
    };
    Ok(uplink + bs)
}

fn uplink_lagrangian(
    x: &[f64],
    powers: &[f64],
    weights: &Weights,
    mult: &Multipliers,
) -> Result<f64> {
    let rates = slot_rates(x, powers, weights)?;
    let info: f64 = rates
        .iter()
        .zip(weights.mu())
        .map(|(r, m)| m * r * std::f64::consts::LN_2)
        .sum();
    let cost: f64 = powers.iter().zip(&mult.lambda).map(|(p, l)| p * l).sum();
    Ok(info - cost)
}

/// Best uplink power vector over a tensor grid with zoom refinement.
fn grid_uplink(
    x: &[f64],
    weights: &Weights,
    mult: &Multipliers,
    spec: &GridSpec,
) -> Result<(Vec<f64>, f64)> {
    let n = x.len();
    if (spec.points as u64)
        .checked_pow(n as u32)
        .is_none_or(|c| c > MAX_EVALUATIONS)
    {
        return Err(Error::InvalidParameter(format!(
            "grid of {}^{n} points is too large",
            spec.points
        )));
    }
    let mut lo = vec![0.0; n];
    let mut hi = vec![spec.p_max_grid; n];
    let mut best = vec![0.0; n];
    let mut best_value = uplink_lagrangian(x, &best, weights, mult)?;
    let mut p = vec![0.0; n];
    let mut idx = vec![0usize; n];
    let last = (spec.points - 1) as f64;
    for _ in 0..=spec.refinements {
        idx.iter_mut().for_each(|i| *i = 0);
        'grid: loop {
            for k in 0..n {
                p[k] = lo[k] + (hi[k] - lo[k]) * idx[k] as f64 / last;
            }
            let v = uplink_lagrangian(x, &p, weights, mult)?;
            if v > best_value {
                best_value = v;
                best.copy_from_slice(&p);
            }
            for k in 0..n {
                idx[k] += 1;
                if idx[k] < spec.points {
                    continue 'grid;
                }
                idx[k] = 0;
            }
            break;
        }
        for k in 0..n {
            let half = spec.window_cells * (hi[k] - lo[k]) / last;
            lo[k] = (best[k] - half).max(0.0);
            hi[k] = (best[k] + half).min(spec.p_max_grid);
        }
    }
    Ok((best, best_value))
}

/// Exhaustive maximization of the per-slot Lagrangian over the scheduling
/// flag, `P0 in {0, P_max}` and gridded user powers. Returns the maximizer
/// and its value in nats; uplink wins ties.
pub fn grid_lagrangian_max(
    sample: &ChannelSample,
    weights: &Weights,
    mult: &Multipliers,
    params: &SystemParams,
    spec: &GridSpec,
) -> Result<(SlotDecision, f64)> {
    spec.validate()?;
    let n = params.n_users;
    check_len("channel sample", n, sample.n_users())?;
    check_len("weights", n, weights.n_users())?;
    check_len("multipliers", n, mult.lambda.len())?;

    let (powers, up_value) = grid_uplink(&sample.x, weights, mult, spec)?;
    let g = sample.harvest_gains(params.mode);
    let priced: f64 = g.iter().zip(&mult.lambda).map(|(g, l)| g * l).sum();
    let (bs_power, bs_value) = [0.0, params.p_max]
        .into_iter()
        .map(|p0| (p0, p0 * (params.eta_prime() * priced - mult.lambda0)))
        .fold((0.0, 0.0), |best, c| if c.1 > best.1 { c } else { best });

    let uplink_decision = |bs: f64| -> Result<SlotDecision> {
        Ok(SlotDecision {
            downlink: false,
            bs_power: bs,
            rates: slot_rates(&sample.x, &powers, weights)?,
            desired: powers.clone(),
        })
    };
    match params.mode {
        Mode::Fdt => Ok((uplink_decision(bs_power)?, up_value + bs_value)),
        Mode::Tdt if up_value >= bs_value => Ok((uplink_decision(0.0)?, up_value)),
        Mode::Tdt => Ok((
            SlotDecision {
                downlink: true,
                bs_power,
                desired: vec![0.0; n],
                rates: vec![0.0; n],
            },
            bs_value,
        )),
    }
}

/// Grid bound from a pilot run: four times the 99.99th percentile of the
/// nonzero powers `allocate` returns on `n_slots` slots of `cfg`.
pub fn pilot_grid_max<F>(
    cfg: &FadingConfig,
    params: &SystemParams,
    n_slots: usize,
    mut allocate: F,
) -> Result<f64>
where
    F: FnMut(&ChannelSample) -> Result<Vec<f64>>,
{
    let mut powers: Vec<f64> = Vec::new();
    for sample in FadingStream::new(cfg, params.mode, 0).take(n_slots) {
        powers.extend(allocate(&sample)?.into_iter().filter(|p| *p > 0.0));
    }
    if powers.is_empty() {
        return Err(Error::Numerical("pilot run allocated no power".into()));
    }
    powers.sort_by(f64::total_cmp);
    let rank = ((powers.len() as f64 * 0.9999).ceil() as usize).clamp(1, powers.len()) - 1;
    Ok(4.0 * powers[rank])
}
