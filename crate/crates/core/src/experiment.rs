//! Experiment configuration and result files.
//!
//! A configuration is one JSON document with a `schema_version` field.
//! Unknown keys are rejected at every level.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dual::{CalibrationOptions, CalibrationReport};
use crate::error::{Error, Result};
use crate::fading::{FadingConfig, FadingLaw};
use crate::model::{Mode, SystemParams, Weights};
use crate::sweep::{RegionResult, SweepSpec};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FadingSection {
    pub seed: u64,
    /// Defaults to Rayleigh fading with the system's mean gains.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub law: Option<FadingLaw>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSection {
    pub mu_points: Vec<Weights>,
    pub m_slots: Vec<u64>,
    pub modes: Vec<Mode>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub calibration_slots: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulationSection {
    pub mu: Weights,
    pub m_slots: u64,
    #[serde(default = "one")]
    pub n_runs: usize,
}

fn one() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OracleSection {
    /// Slots checked by the per-slot grid comparison.
    pub grid_slots: usize,
    /// Pilot slots used to size the power grid.
    pub pilot_slots: usize,
    /// Sample length of the conventional-MAC baseline.
    pub baseline_slots: usize,
    /// Two-point instance for the exact oracle; must use two-point fading.
    pub tiny: Option<TinySection>,
}

impl Default for OracleSection {
    fn default() -> Self {
        OracleSection {
            grid_slots: 1000,
            pilot_slots: 100_000,
            baseline_slots: 1_000_000,
            tiny: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TinySection {
    pub system: SystemParams,
    pub fading: FadingConfig,
    pub mu_points: Vec<Weights>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    pub dir: PathBuf,
    #[serde(default)]
    pub trace: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    /// `system.mode` selects the mode of single-point commands; sweeps use
    /// `sweep.modes`.
    pub system: SystemParams,
    pub fading: FadingSection,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepSection>,
    #[serde(default)]
    pub calibration: CalibrationOptions,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub simulation: Option<SimulationSection>,
    #[serde(default)]
    pub oracle: OracleSection,
    pub output: OutputSection,
    #[serde(default)]
    pub verbosity: u8,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig =
            serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut text = String::new();
        fs::File::open(path)?.read_to_string(&mut text)?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Re-checks every invariant. Parameter errors surface as
    /// configuration errors.
    pub fn validate(&self) -> Result<()> {
        let as_config = |e: Error| match e {
            Error::Config(_) => e,
            other => Error::Config(other.to_string()),
        };
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "unsupported schema_version {} (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        self.system.validate().map_err(as_config)?;
        self.fading_config()
            .validate(&self.system)
            .map_err(as_config)?;
        self.calibration.validate().map_err(as_config)?;
        if let Some(s) = &self.sweep {
            self.sweep_spec_from(s)
                .validate(&self.system)
                .map_err(as_config)?;
        }
        if let Some(s) = &self.simulation {
            if s.m_slots == 0 {
                return Err(Error::Config("simulation.m_slots must be positive".into()));
            }
            if s.n_runs == 0 {
                return Err(Error::Config("simulation.n_runs must be positive".into()));
            }
            if s.mu.n_users() != self.system.n_users {
                return Err(Error::Config("simulation.mu has the wrong length".into()));
            }
        }
        if let Some(t) = &self.oracle.tiny {
            t.system.validate().map_err(as_config)?;
            t.fading.validate(&t.system).map_err(as_config)?;
            if !matches!(t.fading.law, FadingLaw::TwoPoint { .. }) {
                return Err(Error::Config("oracle.tiny needs two-point fading".into()));
            }
            if t.mu_points.is_empty() {
                return Err(Error::Config("oracle.tiny.mu_points is empty".into()));
            }
        }
        if self.oracle.grid_slots == 0
            || self.oracle.pilot_slots == 0
            || self.oracle.baseline_slots == 0
        {
            return Err(Error::Config("oracle slot counts must be positive".into()));
        }
        Ok(())
    }

    pub fn fading_config(&self) -> FadingConfig {
        match &self.fading.law {
            Some(law) => FadingConfig {
                seed: self.fading.seed,
                law: law.clone(),
            },
            None => FadingConfig::rayleigh(&self.system, self.fading.seed),
        }
    }

    fn sweep_spec_from(&self, s: &SweepSection) -> SweepSpec {
        SweepSpec {
            mu_points: s.mu_points.clone(),
            m_slots_list: s.m_slots.clone(),
            modes: s.modes.clone(),
            calibration: self.calibration.clone(),
            calibration_slots: s.calibration_slots,
        }
    }

    pub fn sweep_spec(&self) -> Result<SweepSpec> {
        let s = self
            .sweep
            .as_ref()
            .ok_or_else(|| Error::Config("config has no sweep section".into()))?;
        Ok(self.sweep_spec_from(s))
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.fading.seed = seed;
        self
    }
}

/// One line of the region CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionRow {
    pub mode: Mode,
    pub m_slots: u64,
    pub mu: Vec<f64>,
    pub rates: Vec<f64>,
    pub outage: Vec<f64>,
    pub mean_bs_power: f64,
    pub converged: bool,
}

pub fn region_rows(region: &RegionResult) -> Vec<RegionRow> {
    let mut rows = Vec::new();
    for m in &region.modes {
        for p in &m.points {
            for (t, &m_slots) in p.trajectories.iter().zip(&region.m_slots_list) {
                rows.push(RegionRow {
                    mode: m.mode,
                    m_slots,
                    mu: p.weights.mu().to_vec(),
                    rates: t.rate_point.rates.clone(),
                    outage: t.outage_fraction.clone(),
                    mean_bs_power: t.mean_bs_power,
                    converged: p.converged(),
                });
            }
        }
    }
    rows
}

fn region_header(n: usize) -> Vec<String> {
    let mut h = vec!["mode".to_string(), "m_slots".to_string()];
    for prefix in ["mu", "rate", "outage"] {
        h.extend((1..=n).map(|k| format!("{prefix}_{k}")));
    }
    h.push("mean_bs_power".into());
    h.push("converged".into());
    h
}

/// Writes `mode,m_slots,mu_*,rate_*,outage_*,mean_bs_power,converged`.
/// Floats use the shortest representation that round-trips exactly.
pub fn write_region_csv<W: Write>(rows: &[RegionRow], n_users: usize, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(region_header(n_users))?;
    for r in rows {
        let mut rec = vec![r.mode.to_string(), r.m_slots.to_string()];
        rec.extend(
            r.mu.iter()
                .chain(&r.rates)
                .chain(&r.outage)
                .map(|v| v.to_string()),
        );
        rec.push(r.mean_bs_power.to_string());
        rec.push(r.converged.to_string());
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_region_csv<R: Read>(input: R) -> Result<Vec<RegionRow>> {
    let mut rd = csv::Reader::from_reader(input);
    let header = rd.headers()?.clone();
    if header.len() < 7 || (header.len() - 4) % 3 != 0 {
        return Err(Error::Config(format!(
            "unexpected region header {header:?}"
        )));
    }
    let n = (header.len() - 4) / 3;
    if header.iter().collect::<Vec<_>>() != region_header(n) {
        return Err(Error::Config(format!(
            "unexpected region header {header:?}"
        )));
    }
    let parse = |s: &str| -> Result<f64> {
        s.parse::<f64>()
            .map_err(|e| Error::Config(format!("bad number {s:?}: {e}")))
    };
    let mut rows = Vec::new();
    for rec in rd.records() {
        let rec = rec?;
        let nums = |from: usize| -> Result<Vec<f64>> {
            (from..from + n).map(|i| parse(&rec[i])).collect()
        };
        rows.push(RegionRow {
            mode: rec[0].parse()?,
            m_slots: rec[1]
                .parse()
                .map_err(|e| Error::Config(format!("bad m_slots: {e}")))?,
            mu: nums(2)?,
            rates: nums(2 + n)?,
            outage: nums(2 + 2 * n)?,
            mean_bs_power: parse(&rec[2 + 3 * n])?,
            converged: rec[3 + 3 * n]
                .parse()
                .map_err(|e| Error::Config(format!("bad flag: {e}")))?,
        });
    }
    Ok(rows)
}

/// Per-point summary stored in the run metadata.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointMetadata {
    pub mode: Mode,
    pub mu: Vec<f64>,
    pub calibration: Option<CalibrationReport>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetadata {
    pub schema_version: u32,
    pub package_version: String,
    pub config: ExperimentConfig,
    pub all_converged: bool,
    pub points: Vec<PointMetadata>,
}

impl RunMetadata {
    pub fn new(config: &ExperimentConfig, region: &RegionResult) -> Self {
        let points = region
            .modes
            .iter()
            .flat_map(|m| {
                m.points.iter().map(move |p| PointMetadata {
                    mode: m.mode,
                    mu: p.weights.mu().to_vec(),
                    calibration: p.calibration.clone(),
                    error: p.error.clone(),
                })
            })
            .collect();
        RunMetadata {
            schema_version: SCHEMA_VERSION,
            package_version: env!("CARGO_PKG_VERSION").to_string(),
            config: config.clone(),
            all_converged: region.all_converged(),
            points,
        }
    }
}

/// Writes `value` as pretty JSON, creating parent directories.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let mut f = fs::File::create(path)?;
    serde_json::to_writer_pretty(&mut f, value)?;
    f.write_all(b"\n")?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"{
        "schema_version": 1,
        "system": {"n_users": 2, "eta": 0.5, "epsilon": 5.0, "n0": 1e-5,
                   "p_avg": 10.0, "p_max": 50.0, "path_loss_up": 1e5,
                   "path_loss_down": 1e5, "mode": "tdt"},
        "fading": {"seed": 1},
        "sweep": {"mu_points": [[0.0, 1.0], [0.5, 0.5]], "m_slots": [100], "modes": ["tdt"]},
        "output": {"dir": "out"}
    }"#;

    #[test]
    fn minimal_config_loads() {
        let cfg = ExperimentConfig::from_json(MINIMAL).unwrap();
        assert_eq!(cfg.sweep_spec().unwrap().mu_points.len(), 2);
        let again = ExperimentConfig::from_json(&cfg.to_json().unwrap()).unwrap();
        assert_eq!(cfg, again);
    }

    #[test]
    fn unknown_keys_and_versions_rejected() {
        let typo = MINIMAL
            .replace("\"verbosity\"", "x")
            .replace("\"fading\"", "\"fadin\"");
        assert!(matches!(
            ExperimentConfig::from_json(&typo),
            Err(Error::Config(_))
        ));
        let v2 = MINIMAL.replace("\"schema_version\": 1", "\"schema_version\": 2");
        assert!(matches!(
            ExperimentConfig::from_json(&v2),
            Err(Error::Config(_))
        ));
        let bad = MINIMAL.replace("\"eta\": 0.5", "\"eta\": 1.5");
        assert!(matches!(
            ExperimentConfig::from_json(&bad),
            Err(Error::Config(_))
        ));
        let empty = MINIMAL.replace("[[0.0, 1.0], [0.5, 0.5]]", "[]");
        assert!(matches!(
            ExperimentConfig::from_json(&empty),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn region_csv_round_trip() {
        let rows = vec![
            RegionRow {
                mode: Mode::Tdt,
                m_slots: 10_000,
                mu: vec![0.35, 0.65],
                rates: vec![1.2345678901234567e-4, 0.1 + 0.2],
                outage: vec![0.0, 3e-7],
                mean_bs_power: 9.999999999999998,
                converged: true,
            },
            RegionRow {
                mode: Mode::Fdt,
                m_slots: 1,
                mu: vec![1.0, 0.0],
                rates: vec![0.0, 0.0],
                outage: vec![1.0, 0.0],
                mean_bs_power: 50.0,
                converged: false,
            },
        ];
        let mut buf = Vec::new();
        write_region_csv(&rows, 2, &mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with(
            "mode,m_slots,mu_1,mu_2,rate_1,rate_2,outage_1,outage_2,mean_bs_power,converged\n"
        ));
        assert_eq!(read_region_csv(buf.as_slice()).unwrap(), rows);
    }
}
