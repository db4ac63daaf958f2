//! Finite-horizon trajectories with real battery dynamics.
//!
//! Batteries start empty. Every slot the policy proposes desired powers,
//! the batteries clip them, and rates are computed from the powers actually
//! transmitted (interference included).

use std::collections::HashSet;
use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::allocation::Policy;
use crate::error::{check_len, Error, Result};
use crate::fading::{FadingConfig, FadingStream};
use crate::model::{
    slot_rates_nats, BatteryState, Mode, Multipliers, RatePoint, SystemParams, Weights,
};

/// Batches used for the within-trajectory standard error.
const STDERR_BATCHES: u64 = 100;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryResult {
    /// Average rates achieved with the clipped powers.
    pub rate_point: RatePoint,
    /// Average rates the desired powers would have achieved on the same
    /// slots.
    pub planned_rates: Vec<f64>,
    /// Batch-means standard error of each achieved rate.
    pub rate_stderr: Vec<f64>,
    /// Batch-means standard error of the weighted achieved rate.
    pub weighted_stderr: f64,
    /// Fraction of all slots in which a user's battery clipped its power.
    pub outage_fraction: Vec<f64>,
    pub mean_bs_power: f64,
    /// Mean battery inflow per slot.
    pub mean_harvest: Vec<f64>,
    /// Mean battery drain per slot, `epsilon * P_out`.
    pub mean_spend: Vec<f64>,
    /// Mean drain the desired powers would have caused, `epsilon * P_d`.
    pub mean_desired_spend: Vec<f64>,
    pub final_battery: Vec<f64>,
}

impl TrajectoryResult {
    pub fn weighted_rate(&self) -> f64 {
        self.rate_point.weighted()
    }
}

/// Simulates `m_slots` slots of the fading realization of `cfg`.
pub fn run_trajectory(
    weights: &Weights,
    mult: &Multipliers,
    params: &SystemParams,
    cfg: &FadingConfig,
    m_slots: u64,
) -> Result<TrajectoryResult> {
    simulate(weights, mult, params, cfg, m_slots, None)
}

/// [`run_trajectory`] that also writes one CSV row per slot to `trace`:
/// `slot,a,p0,p_d_*,p_out_*,b_*,rate_*` with the battery level taken after
/// the slot.
pub fn run_trajectory_traced(
    weights: &Weights,
    mult: &Multipliers,
    params: &SystemParams,
    cfg: &FadingConfig,
    m_slots: u64,
    trace: &mut dyn Write,
) -> Result<TrajectoryResult> {
    simulate(weights, mult, params, cfg, m_slots, Some(trace))
}

fn trace_header(out: &mut dyn Write, n: usize) -> std::io::Result<()> {
    write!(out, "slot,a,p0")?;
    for prefix in ["p_d", "p_out", "b", "rate"] {
        for k in 1..=n {
            write!(out, ",{prefix}_{k}")?;
        }
    }
    writeln!(out)
}

fn simulate(
    weights: &Weights,
    mult: &Multipliers,
    params: &SystemParams,
    cfg: &FadingConfig,
    m_slots: u64,
    mut trace: Option<&mut dyn Write>,
) -> Result<TrajectoryResult> {
    params.validate()?;
    cfg.validate(params)?;
    if m_slots == 0 {
        return Err(Error::InvalidParameter("m_slots must be at least 1".into()));
    }
    let n = params.n_users;
    check_len("weights", n, weights.n_users())?;
    let policy = Policy::new(params, weights, mult)?;
    let order = weights.decode_order();
    let mu = weights.mu();

    let mut stream = FadingStream::new(cfg, params.mode, 0);
    let mut battery = BatteryState::new(n);
    let (mut x, mut y) = (vec![0.0; n], vec![0.0; n]);
    let mut desired = vec![0.0; n];
    let mut p_out = vec![0.0; n];
    let mut harvested = vec![0.0; n];
    let mut rate = vec![0.0; n];
    let mut planned = vec![0.0; n];

    let mut sum_rate = vec![0.0; n];
    let mut sum_planned = vec![0.0; n];
    let mut sum_harvest = vec![0.0; n];
    let mut sum_out = vec![0.0; n];
    let mut sum_desired = vec![0.0; n];
    let mut sum_bs = 0.0;

    let n_batches = STDERR_BATCHES.min(m_slots);
    let mut batch_rate = vec![vec![0.0; n]; n_batches as usize];
    let mut batch_len = vec![0u64; n_batches as usize];

    if let Some(out) = trace.as_deref_mut() {
        trace_header(out, n)?;
    }

    for i in 0..m_slots {
        stream.next_into(&mut x, &mut y);
        let ctl = policy.decide_into(&x, &y, &mut desired);
        let gains = match params.mode {
            Mode::Tdt => &x,
            Mode::Fdt => &y,
        };
        battery.advance(
            params,
            gains,
            ctl.downlink,
            ctl.bs_power,
            &desired,
            &mut p_out,
            &mut harvested,
        );
        slot_rates_nats(&x, &p_out, order, &mut rate);
        slot_rates_nats(&x, &desired, order, &mut planned);

        let b = (i * n_batches / m_slots) as usize;
        batch_len[b] += 1;
        for k in 0..n {
            rate[k] /= std::f64::consts::LN_2;
            planned[k] /= std::f64::consts::LN_2;
            sum_rate[k] += rate[k];
            sum_planned[k] += planned[k];
            sum_harvest[k] += harvested[k];
            sum_out[k] += params.epsilon * p_out[k];
            sum_desired[k] += params.epsilon * desired[k];
            batch_rate[b][k] += rate[k];
        }
        sum_bs += ctl.bs_power;

        if let Some(out) = trace.as_deref_mut() {
            write!(out, "{i},{},{}", u8::from(ctl.downlink), ctl.bs_power)?;
            for v in desired
                .iter()
                .chain(&p_out)
                .chain(&battery.level)
                .chain(&rate)
            {
                write!(out, ",{v}")?;
            }
            writeln!(out)?;
        }
    }

    let m = m_slots as f64;
    let mean = |v: Vec<f64>| v.into_iter().map(|s| s / m).collect::<Vec<_>>();
    let rates = mean(sum_rate);

    let batch_means: Vec<Vec<f64>> = batch_rate
        .iter()
        .zip(&batch_len)
        .map(|(r, &len)| r.iter().map(|s| s / len as f64).collect())
        .collect();
    let stderr_of = |f: &dyn Fn(&[f64]) -> f64| -> f64 {
        if n_batches < 2 {
            return 0.0;
        }
        let vals: Vec<f64> = batch_means.iter().map(|b| f(b)).collect();
        let nb = vals.len() as f64;
        let avg = vals.iter().sum::<f64>() / nb;
        let var = vals.iter().map(|v| (v - avg).powi(2)).sum::<f64>() / (nb - 1.0);
        (var / nb).sqrt()
    };
    let rate_stderr = (0..n).map(|k| stderr_of(&|b: &[f64]| b[k])).collect();
    let weighted_stderr = stderr_of(&|b: &[f64]| b.iter().zip(mu).map(|(r, w)| r * w).sum());

    Ok(TrajectoryResult {
        rate_point: RatePoint {
            rates,
            weights: weights.clone(),
            m_slots,
        },
        planned_rates: mean(sum_planned),
        rate_stderr,
        weighted_stderr,
        outage_fraction: battery.outage_count.iter().map(|&c| c as f64 / m).collect(),
        mean_bs_power: sum_bs / m,
        mean_harvest: mean(sum_harvest),
        mean_spend: mean(sum_out),
        mean_desired_spend: mean(sum_desired),
        final_battery: battery.level,
    })
}

/// Mean and standard error of each metric across independent runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleResult {
    pub seeds: Vec<u64>,
    pub m_slots: u64,
    pub mean_rates: Vec<f64>,
    /// Across-run standard errors; zero for a single run.
    pub rate_stderr: Vec<f64>,
    pub mean_weighted_rate: f64,
    pub weighted_stderr: f64,
    pub mean_outage: Vec<f64>,
    pub outage_stderr: Vec<f64>,
    pub mean_bs_power: f64,
    pub bs_power_stderr: f64,
    pub mean_harvest: Vec<f64>,
    pub mean_spend: Vec<f64>,
    pub runs: Vec<TrajectoryResult>,
}

impl EnsembleResult {
    /// 95% confidence half-width of user `n`'s mean rate.
    pub fn rate_half_width(&self, user: usize) -> f64 {
        1.96 * self.rate_stderr[user]
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seeds of an `n_runs` ensemble. The first run keeps the configured seed.
pub fn ensemble_seeds(base: u64, n_runs: usize) -> Vec<u64> {
    let mut seeds = Vec::with_capacity(n_runs);
    let mut seen = HashSet::new();
    let mut state = base;
    if n_runs > 0 {
        seeds.push(base);
        seen.insert(base);
    }
    while seeds.len() < n_runs {
        state = splitmix64(state);
        if seen.insert(state) {
            seeds.push(state);
        }
    }
    seeds
}

/// Runs `n_runs` trajectories on independent fading realizations.
pub fn run_ensemble(
    weights: &Weights,
    mult: &Multipliers,
    params: &SystemParams,
    cfg: &FadingConfig,
    m_slots: u64,
    n_runs: usize,
) -> Result<EnsembleResult> {
    if n_runs == 0 {
        return Err(Error::Config("an ensemble needs at least one run".into()));
    }
    run_ensemble_with_seeds(
        weights,
        mult,
        params,
        cfg,
        m_slots,
        &ensemble_seeds(cfg.seed, n_runs),
    )
}

/// Runs one trajectory per seed. Repeated seeds are rejected.
pub fn run_ensemble_with_seeds(
    weights: &Weights,
    mult: &Multipliers,
    params: &SystemParams,
    cfg: &FadingConfig,
    m_slots: u64,
    seeds: &[u64],
) -> Result<EnsembleResult> {
    if seeds.is_empty() {
        return Err(Error::Config("an ensemble needs at least one run".into()));
    }
    let mut seen = HashSet::new();
    if let Some(dup) = seeds.iter().find(|s| !seen.insert(**s)) {
        return Err(Error::Config(format!("seed {dup} repeated in ensemble")));
    }
    let runs = seeds
        .par_iter()
        .map(|&s| run_trajectory(weights, mult, params, &cfg.with_seed(s), m_slots))
        .collect::<Result<Vec<_>>>()?;

    let n = params.n_users;
    let r = runs.len() as f64;
    let stat = |f: &dyn Fn(&TrajectoryResult) -> f64| -> (f64, f64) {
        let avg = runs.iter().map(f).sum::<f64>() / r;
        if runs.len() < 2 {
            return (avg, 0.0);
        }
        let var = runs.iter().map(|t| (f(t) - avg).powi(2)).sum::<f64>() / (r - 1.0);
        (avg, (var / r).sqrt())
    };
    let per_user = |f: &dyn Fn(&TrajectoryResult, usize) -> f64| -> (Vec<f64>, Vec<f64>) {
        (0..n).map(|k| stat(&|t| f(t, k))).unzip()
    };
    let (mean_rates, rate_stderr) = per_user(&|t, k| t.rate_point.rates[k]);
    let (mean_outage, outage_stderr) = per_user(&|t, k| t.outage_fraction[k]);
    let (mean_harvest, _) = per_user(&|t, k| t.mean_harvest[k]);
    let (mean_spend, _) = per_user(&|t, k| t.mean_spend[k]);
    let (mean_weighted_rate, weighted_stderr) = stat(&|t| t.weighted_rate());
    let (mean_bs_power, bs_power_stderr) = stat(&|t| t.mean_bs_power);

    Ok(EnsembleResult {
        seeds: seeds.to_vec(),
        m_slots,
        mean_rates,
        rate_stderr,
        mean_weighted_rate,
        weighted_stderr,
        mean_outage,
        outage_stderr,
        mean_bs_power,
        bs_power_stderr,
        mean_harvest,
        mean_spend,
        runs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dual::initial_multipliers;

    fn setup(mode: Mode) -> (SystemParams, FadingConfig, Weights, Multipliers) {
        let params = SystemParams::reference(mode);
        let cfg = FadingConfig::rayleigh(&params, 3);
        let w = Weights::pair(0.5).unwrap();
        let m = initial_multipliers(&w, &params, &cfg);
        (params, cfg, w, m)
    }

    #[test]
    fn cold_start_transmits_nothing() {
        let (params, cfg, w, _) = setup(Mode::Tdt);
        // cheap energy so users want to transmit in the first slot
        let m = Multipliers::new(1e9, vec![1e-3, 1e-3]).unwrap();
        let t = run_trajectory(&w, &m, &params, &cfg, 1).unwrap();
        assert_eq!(t.rate_point.rates, vec![0.0, 0.0]);
        assert!(t.planned_rates.iter().any(|r| *r > 0.0));
        assert!(t.outage_fraction.iter().any(|o| *o == 1.0));
    }

    #[test]
    fn zero_slots_rejected() {
        let (params, cfg, w, m) = setup(Mode::Fdt);
        assert!(run_trajectory(&w, &m, &params, &cfg, 0).is_err());
    }

    #[test]
    fn trace_rows_match_slots() {
        let (params, cfg, w, m) = setup(Mode::Tdt);
        let mut buf = Vec::new();
        let t = run_trajectory_traced(&w, &m, &params, &cfg, 50, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(
            lines.next().unwrap(),
            "slot,a,p0,p_d_1,p_d_2,p_out_1,p_out_2,b_1,b_2,rate_1,rate_2"
        );
        assert_eq!(lines.count(), 50);
        assert_eq!(t, run_trajectory(&w, &m, &params, &cfg, 50).unwrap());
    }

    #[test]
    fn single_run_ensemble_equals_trajectory() {
        let (params, cfg, w, m) = setup(Mode::Fdt);
        let e = run_ensemble(&w, &m, &params, &cfg, 2000, 1).unwrap();
        let t = run_trajectory(&w, &m, &params, &cfg, 2000).unwrap();
        assert_eq!(e.runs[0], t);
        assert_eq!(e.mean_rates, t.rate_point.rates);
        assert_eq!(e.rate_stderr, vec![0.0, 0.0]);
    }

    #[test]
    fn duplicate_seeds_rejected() {
        let (params, cfg, w, m) = setup(Mode::Fdt);
        assert!(matches!(
            run_ensemble_with_seeds(&w, &m, &params, &cfg, 10, &[1, 2, 1]),
            Err(Error::Config(_))
        ));
        assert!(run_ensemble(&w, &m, &params, &cfg, 10, 0).is_err());
        let seeds = ensemble_seeds(7, 50);
        assert_eq!(seeds.iter().collect::<HashSet<_>>().len(), 50);
        assert_eq!(seeds[0], 7);
    }
}
