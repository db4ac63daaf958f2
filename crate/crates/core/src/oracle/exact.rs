//! Exact optimal rates for discrete fading with a handful of joint states.
//!
//! The optimal stationary randomized policy solves a linear program over
//! state-action mixtures: in every joint fading state, a probability
//! distribution over actions, subject to the per-user energy balance and
//! the BS budget taken as exact expectations. Uplink actions carry a
//! continuous power vector, so the program is solved by column generation:
//! new power vectors are priced with the current duals by brute-force
//! search. Nothing here uses the closed-form allocation rules.

use clarabel::algebra::CscMatrix;
use clarabel::solver::{
    DefaultSettingsBuilder, DefaultSolver, IPSolver, NonnegativeConeT, SolverStatus,
    SupportedConeT, ZeroConeT,
};
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::fading::{FadingConfig, FadingLaw};
use crate::model::{slot_rates, Mode, RatePoint, SystemParams, Weights};

const MAX_ROUNDS: usize = 200;
const COARSE_POINTS: usize = 61;
const GOLDEN_ITERS: usize = 80;
const MAX_SWEEPS: usize = 400;

/// One joint fading state with its probability.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointState {
    pub prob: f64,
    pub x: Vec<f64>,
    pub y: Vec<f64>,
}

/// Enumerates the joint states of a two-point law. Uplink and downlink
/// gains are reciprocal in TDT and independent in FDT.
pub fn joint_states(cfg: &FadingConfig, mode: Mode) -> Result<Vec<JointState>> {
    let FadingLaw::TwoPoint { x, y } = &cfg.law else {
        return Err(Error::InvalidParameter(
            "exact oracle needs two-point fading".into(),
        ));
    };
    let xs = product(&x.iter().map(|l| l.atoms()).collect::<Vec<_>>());
    let states = match mode {
        Mode::Tdt => xs
            .into_iter()
            .map(|(g, p)| JointState {
                prob: p,
                y: g.clone(),
                x: g,
            })
            .collect(),
        Mode::Fdt => {
            let ys = product(&y.iter().map(|l| l.atoms()).collect::<Vec<_>>());
            let mut out = Vec::with_capacity(xs.len() * ys.len());
            for (gx, px) in &xs {
                for (gy, py) in &ys {
                    out.push(JointState {
                        prob: px * py,
                        x: gx.clone(),
                        y: gy.clone(),
                    });
                }
            }
            out
        }
    };
    Ok(states)
}

fn product(laws: &[Vec<(f64, f64)>]) -> Vec<(Vec<f64>, f64)> {
    let mut out = vec![(Vec::new(), 1.0)];
    for atoms in laws {
        out = out
            .into_iter()
            .flat_map(|(g, p)| {
                atoms.iter().map(move |&(v, q)| {
                    let mut g = g.clone();
                    g.push(v);
                    (g, p * q)
                })
            })
            .collect();
    }
    out
}

#[derive(Debug, Clone)]
enum Action {
    /// Users transmit with these powers (BS silent in TDT).
    Users(Vec<f64>),
    /// BS radiates this power (users silent in TDT).
    Bs(f64),
}

#[derive(Debug, Clone)]
struct Column {
    state: usize,
    group: usize,
    action: Action,
}

/// Exact frontier point with the optimal mixing probabilities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExactPoint {
    /// Expected rates; `m_slots` is 0 for an exact value.
    pub rate_point: RatePoint,
    /// Per state: probability of a downlink slot (TDT) or of the BS
    /// radiating (FDT).
    pub bs_fraction: Vec<f64>,
    /// Per state: expected user powers.
    pub mean_powers: Vec<Vec<f64>>,
    /// Largest `min(f, 1 - f)` over `bs_fraction`: zero when the optimum
    /// needs no randomization between BS on and off.
    pub mixing: f64,
    /// Upper bound on the objective shortfall left by the final pricing.
    pub pricing_gap: f64,
    pub rounds: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExactRegion {
    pub states: Vec<JointState>,
    pub points: Vec<ExactPoint>,
}

impl ExactRegion {
    pub fn rate_points(&self) -> impl Iterator<Item = &RatePoint> {
        self.points.iter().map(|p| &p.rate_point)
    }
}

/// Exact frontier of an `N <= 2` system with two-point fading.
pub fn exhaustive_region_tiny(
    params: &SystemParams,
    cfg: &FadingConfig,
    weights_sweep: &[Weights],
) -> Result<ExactRegion> {
    params.validate()?;
    cfg.validate(params)?;
    if params.n_users > 2 {
        return Err(Error::InvalidParameter(
            "exact oracle supports at most two users".into(),
        ));
    }
    let states = joint_states(cfg, params.mode)?;
    let points = weights_sweep
        .iter()
        .map(|w| {
            check_len("weights", params.n_users, w.n_users())?;
            solve_point(params, &states, w)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ExactRegion { states, points })
}

struct Problem<'a> {
    params: &'a SystemParams,
    states: &'a [JointState],
    weights: &'a Weights,
    n_groups: usize,
    power_bound: Vec<f64>,
}

impl Problem<'_> {
    fn harvest_gains<'s>(&self, s: &'s JointState) -> &'s [f64] {
        match self.params.mode {
            Mode::Tdt => &s.x,
            Mode::Fdt => &s.y,
        }
    }

    fn bs_group(&self, state: usize) -> usize {
        match self.params.mode {
            Mode::Tdt => state,
            Mode::Fdt => self.states.len() + state,
        }
    }

    fn weighted_bits(&self, x: &[f64], p: &[f64]) -> f64 {
        let r = slot_rates(x, p, self.weights).expect("validated dimensions");
        r.iter().zip(self.weights.mu()).map(|(r, m)| r * m).sum()
    }

    /// Objective coefficient and constraint coefficients of a column.
    fn coefficients(&self, c: &Column) -> (f64, Vec<f64>, f64) {
        let s = &self.states[c.state];
        let n = self.params.n_users;
        match &c.action {
            Action::Users(p) => (
                -s.prob * self.weighted_bits(&s.x, p),
                p.iter().map(|v| s.prob * v).collect(),
                0.0,
            ),
            Action::Bs(p0) => {
                let g = self.harvest_gains(s);
                let ep = self.params.eta_prime();
                (
                    (0.0),
                    (0..n).map(|k| -s.prob * ep * p0 * g[k]).collect(),
                    s.prob * p0,
                )
            }
        }
    }

    fn solve_lp(&self, cols: &[Column]) -> Result<(Vec<f64>, Vec<f64>, f64)> {
        let n = self.params.n_users;
        let n_cols = cols.len();
        let n_rows = self.n_groups + n + 1 + n_cols;
        let mut q = Vec::with_capacity(n_cols);
        let mut colptr = vec![0];
        let mut rowval = Vec::new();
        let mut nzval = Vec::new();
        for (j, c) in cols.iter().enumerate() {
            let (obj, user, bs) = self.coefficients(c);
            q.push(obj);
            rowval.push(c.group);
            nzval.push(1.0);
            for (k, v) in user.iter().enumerate() {
                if *v != 0.0 {
                    rowval.push(self.n_groups + k);
                    nzval.push(*v);
                }
            }
            if bs != 0.0 {
                rowval.push(self.n_groups + n);
                nzval.push(bs);
            }
            rowval.push(self.n_groups + n + 1 + j);
            nzval.push(-1.0);
            colptr.push(rowval.len());
        }
        let a = CscMatrix::new(n_rows, n_cols, colptr, rowval, nzval);
        let p = CscMatrix::zeros((n_cols, n_cols));
        let mut b = vec![0.0; n_rows];
        b[..self.n_groups].iter_mut().for_each(|v| *v = 1.0);
        b[self.n_groups + n] = self.params.p_avg;
        let cones: [SupportedConeT<f64>; 2] =
            [ZeroConeT(self.n_groups), NonnegativeConeT(n + 1 + n_cols)];
        let settings = DefaultSettingsBuilder::default()
            .verbose(false)
            .tol_gap_abs(1e-12)
            .tol_gap_rel(1e-11)
            .tol_feas(1e-11)
            .max_iter(500)
            .build()
            .map_err(|e| Error::Numerical(format!("solver settings: {e:?}")))?;
        let mut solver = DefaultSolver::new(&p, &q, &a, &b, &cones, settings)
            .map_err(|e| Error::Numerical(format!("solver setup: {e:?}")))?;
        solver.solve();
        let sol = &solver.solution;
        match sol.status {
            SolverStatus::Solved | SolverStatus::AlmostSolved => {}
            other => return Err(Error::Numerical(format!("linear program: {other:?}"))),
        }
        Ok((
            sol.x.clone(),
            sol.z[..self.n_groups + n + 1].to_vec(),
            sol.obj_val,
        ))
    }

    /// Maximizes `sum mu R_bits(P) - sum price_n P_n` over the power box.
    fn price_users(&self, x: &[f64], price: &[f64]) -> (Vec<f64>, f64) {
        let n = x.len();
        let f = |p: &[f64]| {
            self.weighted_bits(x, p) - p.iter().zip(price).map(|(a, b)| a * b).sum::<f64>()
        };
        let mut best = vec![0.0; n];
        let mut best_v = 0.0;
        let mut p = vec![0.0; n];
        let mut idx = vec![0usize; n];
        'grid: loop {
            for k in 0..n {
                p[k] = self.power_bound[k] * idx[k] as f64 / (COARSE_POINTS - 1) as f64;
            }
            let v = f(&p);
            if v > best_v {
                best_v = v;
                best.copy_from_slice(&p);
            }
            for k in 0..n {
                idx[k] += 1;
                if idx[k] < COARSE_POINTS {
                    continue 'grid;
                }
                idx[k] = 0;
            }
            break;
        }
        // cyclic coordinate ascent; each coordinate problem is concave
        let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
        for _ in 0..MAX_SWEEPS {
            let before = best_v;
            for k in 0..n {
                let (mut a, mut b) = (0.0, self.power_bound[k]);
                let mut trial = best.clone();
                let mut eval = |t: f64| {
                    trial[k] = t;
                    f(&trial)
                };
                let mut c = b - inv_phi * (b - a);
                let mut d = a + inv_phi * (b - a);
                let (mut fc, mut fd) = (eval(c), eval(d));
                for _ in 0..GOLDEN_ITERS {
                    if fc >= fd {
                        b = d;
                        d = c;
                        fd = fc;
                        c = b - inv_phi * (b - a);
                        fc = eval(c);
                    } else {
                        a = c;
                        c = d;
                        fc = fd;
                        d = a + inv_phi * (b - a);
                        fd = eval(d);
                    }
                }
                for t in [0.0, (a + b) / 2.0] {
                    let v = eval(t);
                    if v > best_v {
                        best_v = v;
                        best[k] = t;
                    }
                }
            }
            if best_v - before <= 1e-15 * best_v.abs().max(1e-300) {
                break;
            }
        }
        (best, best_v)
    }
}

fn solve_point(
    params: &SystemParams,
    states: &[JointState],
    weights: &Weights,
) -> Result<ExactPoint> {
    let n = params.n_users;
    let ns = states.len();
    let min_prob = states.iter().map(|s| s.prob).fold(f64::INFINITY, f64::min);
    let max_g = |k: usize| {
        states
            .iter()
            .map(|s| match params.mode {
                Mode::Tdt => s.x[k],
                Mode::Fdt => s.y[k],
            })
            .fold(0.0, f64::max)
    };
    let problem = Problem {
        params,
        states,
        weights,
        n_groups: match params.mode {
            Mode::Tdt => ns,
            Mode::Fdt => 2 * ns,
        },
        // no state can sustain more than the whole harvest spent in it
        power_bound: (0..n)
            .map(|k| params.eta_prime() * params.p_max * max_g(k) / min_prob)
            .collect(),
    };

    let mut cols = Vec::new();
    for s in 0..ns {
        cols.push(Column {
            state: s,
            group: s,
            action: Action::Users(vec![0.0; n]),
        });
        for p0 in [0.0, params.p_max] {
            if params.mode == Mode::Tdt && p0 == 0.0 {
                continue;
            }
            cols.push(Column {
                state: s,
                group: problem.bs_group(s),
                action: Action::Bs(p0),
            });
        }
    }

    let mut rounds = 0;
    let (w, pricing_gap) = loop {
        rounds += 1;
        let (w, z, obj) = problem.solve_lp(&cols)?;
        let price: Vec<f64> = z[problem.n_groups..problem.n_groups + n].to_vec();
        let scale = obj.abs().max(1e-12);
        let mut gap = 0.0;
        let mut added = false;
        for (s, st) in states.iter().enumerate() {
            let (p, v) = problem.price_users(&st.x, &price);
            // reduced cost of the new column is z_group - prob * v
            let rc = z[s] - st.prob * v;
            if rc < 0.0 {
                gap -= rc;
            }
            if rc < -1e-10 * scale {
                cols.push(Column {
                    state: s,
                    group: s,
                    action: Action::Users(p),
                });
                added = true;
            }
        }
        if !added || rounds >= MAX_ROUNDS {
            break (w, gap);
        }
    };

    let mut rates = vec![0.0; n];
    let mut bs_fraction = vec![0.0; ns];
    let mut mean_powers = vec![vec![0.0; n]; ns];
    for (c, &wj) in cols.iter().zip(&w) {
        let wj = wj.max(0.0);
        let st = &states[c.state];
        match &c.action {
            Action::Users(p) => {
                let r = slot_rates(&st.x, p, weights)?;
                for k in 0..n {
                    rates[k] += st.prob * wj * r[k];
                    mean_powers[c.state][k] += wj * p[k];
                }
            }
            Action::Bs(p0) if *p0 > 0.0 => bs_fraction[c.state] += wj,
            Action::Bs(_) => {}
        }
    }
    let mixing = bs_fraction
        .iter()
        .map(|f| f.min(1.0 - f))
        .fold(0.0, f64::max);
    Ok(ExactPoint {
        rate_point: RatePoint {
            rates,
            weights: weights.clone(),
            m_slots: 0,
        },
        bs_fraction,
        mean_powers,
        mixing,
        pricing_gap,
        rounds,
    })
}
