//! Optimal online power control for a wireless-powered multiple-access
//! fading channel.
//!
//! A base station radiates power to energy-harvesting users, which store it
//! in batteries and spend it on uplink transmissions decoded with
//! successive interference cancellation. Power and information transfer
//! share the channel either in time (TDT) or in frequency (FDT).
//!
//! The crate provides the per-slot optimal rules for fixed dual prices
//! ([`allocation`]), calibration of those prices ([`dual`]), finite-horizon
//! battery simulation ([`simulator`]), rate-region sweeps ([`sweep`]) and
//! brute-force reference solutions ([`oracle`]).

pub mod allocation;
pub mod dual;
pub mod error;
pub mod experiment;
pub mod fading;
pub mod model;
pub mod oracle;
pub mod simulator;
pub mod sweep;

pub use allocation::{bs_power, ehu_powers, fdt_decide, tdt_schedule, ActivitySet, Policy};
pub use dual::{
    calibrate, constraint_residuals, residual_violation, CalibrationOptions, CalibrationReport,
};
pub use error::{Error, Result};
pub use fading::{sample_slot, FadingConfig, FadingLaw, TwoPointLaw};
pub use model::{
    battery_step, clip_transmit_power, harvested_power, slot_rates, weighted_sum_rate,
    BatteryState, ChannelSample, Mode, Multipliers, RatePoint, SlotDecision, SystemParams, Weights,
};
pub use simulator::{run_ensemble, run_trajectory, EnsembleResult, TrajectoryResult};
