//! Rate region of a conventional fading MAC with per-user average power
//! budgets and no energy harvesting.

use serde::{Deserialize, Serialize};

use crate::allocation::UplinkRule;
use crate::dual::{Freedom, LogSolver, CHUNK};
use crate::error::{check_len, Error, Result};
use crate::fading::{FadingConfig, FrozenStream};
use crate::model::{slot_rates_nats, Multipliers, RatePoint, SystemParams, Weights};

use rayon::prelude::*;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselinePoint {
    pub rate_point: RatePoint,
    pub lambda: Vec<f64>,
    /// Relative budget residual per user.
    pub residuals: Vec<f64>,
    pub converged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineRegion {
    pub points: Vec<BaselinePoint>,
    pub power_budget: Vec<f64>,
}

impl BaselineRegion {
    pub fn rate_points(&self) -> impl Iterator<Item = &RatePoint> {
        self.points.iter().map(|p| &p.rate_point)
    }
}

/// Options of the per-point budget calibration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineOptions {
    pub tolerance: f64,
    pub max_iter: usize,
    pub step: f64,
}

impl Default for BaselineOptions {
    fn default() -> Self {
        BaselineOptions {
            tolerance: 1e-4,
            max_iter: 5000,
            step: 0.5,
        }
    }
}

struct Sums {
    power: Vec<f64>,
    rate: Vec<f64>,
}

fn sums(rule: &UplinkRule, stream: &FrozenStream, order: &[usize]) -> Sums {
    let n = stream.n_users();
    let len = stream.len();
    let parts: Vec<Sums> = (0..len.div_ceil(CHUNK))
        .into_par_iter()
        .map(|c| {
            let mut s = Sums {
                power: vec![0.0; n],
                rate: vec![0.0; n],
            };
            let mut p = vec![0.0; n];
            let mut r = vec![0.0; n];
            for i in c * CHUNK..((c + 1) * CHUNK).min(len) {
                let x = stream.x(i);
                rule.solve(x, &mut p);
                slot_rates_nats(x, &p, order, &mut r);
                for k in 0..n {
                    s.power[k] += p[k];
                    s.rate[k] += r[k];
                }
            }
            s
        })
        .collect();
    let mut total = Sums {
        power: vec![0.0; n],
        rate: vec![0.0; n],
    };
    for s in &parts {
        for k in 0..n {
            total.power[k] += s.power[k];
            total.rate[k] += s.rate[k];
        }
    }
    total
}

/// For each priority vector, prices the users so their average powers meet
/// `budget` on `n_slots` slots of `cfg`'s uplink gains, then reports the
/// average rates of the optimal weighted-rate allocation at those prices.
pub fn baseline_mac_region(
    weights_sweep: &[Weights],
    budget: &[f64],
    cfg: &FadingConfig,
    params: &SystemParams,
    n_slots: usize,
) -> Result<BaselineRegion> {
    baseline_mac_region_with(
        weights_sweep,
        budget,
        cfg,
        params,
        n_slots,
        &BaselineOptions::default(),
    )
}

pub fn baseline_mac_region_with(
    weights_sweep: &[Weights],
    budget: &[f64],
    cfg: &FadingConfig,
    params: &SystemParams,
    n_slots: usize,
    opts: &BaselineOptions,
) -> Result<BaselineRegion> {
    let n = params.n_users;
    check_len("power budget", n, budget.len())?;
    check_len("fading config", n, cfg.n_users())?;
    if budget.iter().any(|b| !(*b >= 0.0 && b.is_finite())) {
        return Err(Error::InvalidParameter(
            "budgets must be nonnegative".into(),
        ));
    }
    if n_slots == 0 {
        return Err(Error::InvalidParameter("n_slots must be at least 1".into()));
    }
    let stream = FrozenStream::generate(cfg, params.mode, 0, n_slots);
    let mean_x = cfg.mean_x();
    let points = weights_sweep
        .iter()
        .map(|w| {
            check_len("weights", n, w.n_users())?;
            baseline_point(w, budget, &stream, &mean_x, opts)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(BaselineRegion {
        points,
        power_budget: budget.to_vec(),
    })
}

fn baseline_point(
    weights: &Weights,
    budget: &[f64],
    stream: &FrozenStream,
    mean_x: &[f64],
    opts: &BaselineOptions,
) -> Result<BaselinePoint> {
    let n = budget.len();
    let m = stream.len() as f64;
    let order = weights.decode_order();
    // users with no weight or no budget stay silent
    let silent: Vec<bool> = (0..n)
        .map(|k| weights.mu()[k] == 0.0 || budget[k] == 0.0)
        .collect();
    let mu: Vec<f64> = (0..n)
        .map(|k| if silent[k] { 0.0 } else { weights.mu()[k] })
        .collect();
    let total: f64 = mu.iter().sum();
    if total == 0.0 {
        return Ok(BaselinePoint {
            rate_point: RatePoint {
                rates: vec![0.0; n],
                weights: weights.clone(),
                m_slots: stream.len() as u64,
            },
            lambda: vec![0.0; n],
            residuals: vec![0.0; n],
            converged: true,
        });
    }
    // the silent users' weight is only used through the decode order,
    // which the truncated vector keeps
    let effective = Weights::from_parts(mu, order.to_vec());
    let freedom: Vec<Freedom> = silent
        .iter()
        .map(|&s| {
            if s {
                Freedom::Pinned
            } else {
                Freedom::Positive
            }
        })
        .collect();
    let init: Vec<f64> = (0..n)
        .map(|k| {
            if silent[k] {
                0.0
            } else {
                effective.mu()[k] / (budget[k] + 1.0 / mean_x[k])
            }
        })
        .collect();
    let solver = LogSolver {
        tolerance: opts.tolerance,
        max_iter: opts.max_iter,
        step: opts.step,
        freedom: &freedom,
    };
    let eval = |lambda: &[f64]| -> Result<Vec<f64>> {
        let rule = UplinkRule::new(&effective, &Multipliers::new(0.0, lambda.to_vec())?)?;
        let s = sums(&rule, stream, order);
        Ok((0..n)
            .map(|k| {
                if silent[k] {
                    0.0
                } else {
                    (s.power[k] / m - budget[k]) / budget[k]
                }
            })
            .collect())
    };
    let out = solver.solve(init, 1, |_, v| eval(v), None)?;
    let rule = UplinkRule::new(&effective, &Multipliers::new(0.0, out.values.clone())?)?;
    let s = sums(&rule, stream, order);
    Ok(BaselinePoint {
        rate_point: RatePoint {
            rates: s
                .rate
                .iter()
                .map(|r| r / m / std::f64::consts::LN_2)
                .collect(),
            weights: weights.clone(),
            m_slots: stream.len() as u64,
        },
        lambda: out.values,
        residuals: out.residuals,
        converged: out.converged,
    })
}
