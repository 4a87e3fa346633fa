//! Cooperative detection and tracking of a walking person from a small team
//! of camera-carrying aerial agents.
//!
//! The crate simulates the full perception loop at desk scale:
//!
//! - [`geometry`]: pinhole camera model, pose types with 6-DoF uncertainty,
//!   projection and bounding-box backprojection with covariance propagation.
//! - [`detector`]: a statistical stand-in for a DNN person detector, with
//!   empirically shaped per-side bounding-box noise, a detection-probability
//!   curve over relative person size, and GPU-style processing cadence.
//! - [`tracker`]: per-agent EKF over position and velocity with an
//!   exponentially decelerating motion model, measurement gating, active
//!   region-of-interest selection, and self-pose bias correction.
//! - [`netbus`]: broadcast message bus with latency, jitter and drops.
//! - [`world`]: ground-truth person trajectories, formation flight control
//!   and noisy self-localization.
//! - [`metrics`]: run logs and the evaluation metrics used by the
//!   experiment harness (reference-square fit, MSE, detection rate, NEES,
//!   detector noise characterization).
//! - [`scenario`]: closed-loop scenario runner, configuration and the
//!   ablation suite.
//!
//! All randomness is drawn from explicitly seeded ChaCha streams; a scenario
//! is a pure function of its configuration, so run logs are reproducible
//! byte for byte.

pub mod detector;
pub mod geometry;
pub mod metrics;
pub mod netbus;
pub mod scenario;
pub mod tracker;
pub mod world;

use serde::{Deserialize, Serialize};

/// Identifier of one aerial agent. Agents are numbered from 0 in the order
/// they appear in the scenario configuration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct AgentId(pub u32);

impl std::fmt::Display for AgentId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "agent{}", self.0)
    }
}

impl AgentId {
    /// Index into per-agent arrays.
    pub fn index(self) -> usize {
        self.0 as usize
    }
}
