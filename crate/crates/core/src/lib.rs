//! On-policy distillation with outcome-aware return calibration.
//!
//! The crate covers per-token distillation rewards and trajectory returns,
//! prompt-level margin calibration (greedy masking and margin shift),
//! difficulty-aware data balancing, and a desk-scale tabular policy simulator
//! with exact reverse-KL oracles.

pub mod balance;
pub mod calibration;
pub mod error;
pub mod passk;
pub mod policy;
pub mod rng;
pub mod rollout;

pub use calibration::{
    calibrate, CalibratedGroup, CalibrationConfig, MarginMode, ScoredGroup, ShiftDirection, Strategy,
};
pub use error::{OpdError, Result};
pub use rollout::{OutcomeReward, Prompt, RolloutGroup, TokenId, Trajectory, TrajectoryReturn};
