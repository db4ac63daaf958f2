//! Rate-region sweeps over the priority simplex.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dual::{calibrate_on, CalibrationOptions, CalibrationReport};
use crate::error::{check_len, Error, Result};
use crate::fading::{FadingConfig, FrozenStream};
use crate::model::{Mode, RatePoint, SystemParams, Weights};
use crate::oracle::BaselineRegion;
use crate::simulator::{run_trajectory, TrajectoryResult};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    pub mu_points: Vec<Weights>,
    /// Strictly increasing horizons.
    pub m_slots_list: Vec<u64>,
    pub modes: Vec<Mode>,
    #[serde(default)]
    pub calibration: CalibrationOptions,
    /// Calibration sample length; `None` uses the largest horizon.
    #[serde(default)]
    pub calibration_slots: Option<usize>,
}

impl SweepSpec {
    /// Evenly spaced two-user grid `mu1 = 0, 1/(points-1), .., 1`.
    pub fn pair_grid(points: usize) -> Result<Vec<Weights>> {
        if points < 2 {
            return Err(Error::InvalidParameter(
                "a grid needs at least two points".into(),
            ));
        }
        (0..points)
            .map(|i| {
                let mu1 = i as f64 / (points - 1) as f64;
                Weights::new(vec![mu1, 1.0 - mu1])
            })
            .collect()
    }

    pub fn validate(&self, params: &SystemParams) -> Result<()> {
        if self.mu_points.is_empty() {
            return Err(Error::Config("mu_points is empty".into()));
        }
        for w in &self.mu_points {
            check_len("weights", params.n_users, w.n_users())?;
        }
        if self.m_slots_list.is_empty() || self.m_slots_list[0] == 0 {
            return Err(Error::Config("horizons must be positive".into()));
        }
        if self.m_slots_list.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config("horizons must be strictly increasing".into()));
        }
        if self.modes.is_empty() {
            return Err(Error::Config("no mode selected".into()));
        }
        if self.modes.len() == 2 && self.modes[0] == self.modes[1] {
            return Err(Error::Config("modes repeated".into()));
        }
        if self.calibration_slots == Some(0) {
            return Err(Error::Config("calibration_slots must be positive".into()));
        }
        self.calibration.validate()
    }

    pub fn calibration_len(&self) -> usize {
        self.calibration_slots
            .unwrap_or_else(|| *self.m_slots_list.last().expect("validated") as usize)
    }
}

/// Outcome of one priority vector in one mode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointResult {
    pub weights: Weights,
    pub calibration: Option<CalibrationReport>,
    /// One entry per horizon, in sweep order.
    pub trajectories: Vec<TrajectoryResult>,
    pub error: Option<String>,
}

impl PointResult {
    pub fn converged(&self) -> bool {
        self.error.is_none() && self.calibration.as_ref().is_some_and(|c| c.converged)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeRegion {
    pub mode: Mode,
    pub points: Vec<PointResult>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionResult {
    pub m_slots_list: Vec<u64>,
    pub modes: Vec<ModeRegion>,
}

impl RegionResult {
    pub fn mode(&self, mode: Mode) -> Option<&ModeRegion> {
        self.modes.iter().find(|m| m.mode == mode)
    }

    /// Rate points of one mode at one horizon; failed points are skipped.
    pub fn rate_points(&self, mode: Mode, m_slots: u64) -> Vec<RatePoint> {
        let Some(h) = self.m_slots_list.iter().position(|m| *m == m_slots) else {
            return Vec::new();
        };
        self.mode(mode)
            .map(|r| {
                r.points
                    .iter()
                    .filter_map(|p| p.trajectories.get(h).map(|t| t.rate_point.clone()))
                    .collect()
            })
            .unwrap_or_default()
    }

    pub fn all_converged(&self) -> bool {
        self.modes
            .iter()
            .flat_map(|m| &m.points)
            .all(PointResult::converged)
    }
}

/// Calibrates every priority vector once per mode on the first
/// `calibration_len` slots of `cfg`'s realization, then simulates each
/// horizon on that same realization. Failures are recorded per point.
pub fn run_sweep(
    spec: &SweepSpec,
    params: &SystemParams,
    cfg: &FadingConfig,
) -> Result<RegionResult> {
    params.validate()?;
    cfg.validate(params)?;
    spec.validate(params)?;
    let mut modes = Vec::with_capacity(spec.modes.len());
    for &mode in &spec.modes {
        let p = params.with_mode(mode);
        let cal_cfg = match spec.calibration.seed {
            Some(seed) => cfg.with_seed(seed),
            None => cfg.clone(),
        };
        let stream = FrozenStream::generate(&cal_cfg, mode, 0, spec.calibration_len());
        let points = spec
            .mu_points
            .par_iter()
            .map(|w| sweep_point(w, &p, cfg, &stream, spec))
            .collect();
        modes.push(ModeRegion { mode, points });
    }
    Ok(RegionResult {
        m_slots_list: spec.m_slots_list.clone(),
        modes,
    })
}

fn sweep_point(
    weights: &Weights,
    params: &SystemParams,
    cfg: &FadingConfig,
    stream: &FrozenStream,
    spec: &SweepSpec,
) -> PointResult {
    let report = match calibrate_on(stream, weights, params, cfg, &spec.calibration, None) {
        Ok(r) => r,
        Err(e) => {
            return PointResult {
                weights: weights.clone(),
                calibration: None,
                trajectories: Vec::new(),
                error: Some(e.to_string()),
            }
        }
    };
    let trajectories = spec
        .m_slots_list
        .iter()
        .map(|&m| run_trajectory(weights, &report.multipliers, params, cfg, m))
        .collect::<Result<Vec<_>>>();
    match trajectories {
        Ok(trajectories) => PointResult {
            weights: weights.clone(),
            calibration: Some(report),
            trajectories,
            error: None,
        },
        Err(e) => PointResult {
            weights: weights.clone(),
            calibration: Some(report),
            trajectories: Vec::new(),
            error: Some(e.to_string()),
        },
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointGap {
    pub mu: Vec<f64>,
    pub rates: Vec<f64>,
    pub reference: Vec<f64>,
    /// `(rate - reference) / reference` per user; zero where both vanish.
    pub rel_gap: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapReport {
    pub points: Vec<PointGap>,
    /// Largest absolute relative gap.
    pub max_gap: f64,
    /// Mean absolute relative gap over all components.
    pub mean_gap: f64,
}

/// Componentwise relative gaps between two frontiers sampled on the same
/// priority grid.
pub fn frontier_gap(points: &[RatePoint], reference: &[RatePoint]) -> Result<GapReport> {
    if points.len() != reference.len() {
        return Err(Error::InvalidParameter(format!(
            "frontiers have {} and {} points",
            points.len(),
            reference.len()
        )));
    }
    let scale = reference
        .iter()
        .flat_map(|p| &p.rates)
        .fold(0.0f64, |m, r| m.max(r.abs()));
    let floor = 1e-9 * scale;
    let mut out = Vec::with_capacity(points.len());
    for (p, r) in points.iter().zip(reference) {
        let same_grid = p.weights.n_users() == r.weights.n_users()
            && p.weights
                .mu()
                .iter()
                .zip(r.weights.mu())
                .all(|(a, b)| (a - b).abs() <= 1e-12);
        if !same_grid {
            return Err(Error::InvalidParameter(format!(
                "priority grids differ: {:?} vs {:?}",
                p.weights.mu(),
                r.weights.mu()
            )));
        }
        let rel_gap = p
            .rates
            .iter()
            .zip(&r.rates)
            .map(|(&a, &b)| {
                if b.abs() <= floor && a.abs() <= floor {
                    0.0
                } else {
                    (a - b) / b.abs().max(floor)
                }
            })
            .collect();
        out.push(PointGap {
            mu: p.weights.mu().to_vec(),
            rates: p.rates.clone(),
            reference: r.rates.clone(),
            rel_gap,
        });
    }
    let gaps: Vec<f64> = out
        .iter()
        .flat_map(|p| p.rel_gap.iter().map(|g| g.abs()))
        .collect();
    let max_gap = gaps.iter().cloned().fold(0.0, f64::max);
    let mean_gap = if gaps.is_empty() {
        0.0
    } else {
        gaps.iter().sum::<f64>() / gaps.len() as f64
    };
    Ok(GapReport {
        points: out,
        max_gap,
        mean_gap,
    })
}

/// Gaps between `mode`'s frontier at the largest horizon and `baseline`.
pub fn compare_to_baseline(
    region: &RegionResult,
    baseline: &BaselineRegion,
    mode: Mode,
) -> Result<GapReport> {
    let m = *region
        .m_slots_list
        .last()
        .ok_or_else(|| Error::InvalidParameter("region has no horizons".into()))?;
    let points = region.rate_points(mode, m);
    let reference: Vec<RatePoint> = baseline.rate_points().cloned().collect();
    frontier_gap(&points, &reference)
}
