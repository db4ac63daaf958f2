//! Independent reference computations used to validate the fast paths.

pub mod baseline;
pub mod exact;
pub mod grid;

pub use baseline::{
    baseline_mac_region, baseline_mac_region_with, BaselineOptions, BaselinePoint, BaselineRegion,
};
pub use exact::{exhaustive_region_tiny, joint_states, ExactPoint, ExactRegion, JointState};
pub use grid::{grid_lagrangian_max, pilot_grid_max, slot_lagrangian, GridSpec};
