//! Scenario configuration schema.
//!
//! Every knob of a run lives in [`ScenarioConfig`]: world geometry, sensor
//! models, tracker tuning, network link and the ablation switches. The
//! struct round-trips through TOML with full defaults, so an empty config
//! file describes the standard two-agent square-walk scenario. A SHA-256
//! digest of the canonical serialization identifies the configuration in
//! reports.

use crate::detector::DetectorNoiseModel;
use crate::geometry::{CameraModel, HeightModel};
use crate::netbus::LinkModel;
use crate::tracker::{FusionParams, MotionModel, RoiParams};
use crate::world::{BiasSchedule, FormationConfig, PersonTrajectory};
use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config field `{field}`: {reason}")]
    Invalid { field: &'static str, reason: String },
    #[error("config parse error: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("config io error: {0}")]
    Io(#[from] std::io::Error),
}

fn invalid(field: &'static str, reason: impl Into<String>) -> ConfigError {
    ConfigError::Invalid {
        field,
        reason: reason.into(),
    }
}

fn ensure(ok: bool, field: &'static str, reason: &str) -> Result<(), ConfigError> {
    if ok {
        Ok(())
    } else {
        Err(invalid(field, reason))
    }
}

/// Root seeds of the three independent random streams.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Seeds {
    /// Ground truth: person height, initial track estimates, pose noise.
    pub world: u64,
    /// Detector noise, one derived stream per agent.
    pub detector: u64,
    /// Link drops and latency jitter.
    pub net: u64,
}

impl Default for Seeds {
    fn default() -> Self {
        Seeds {
            world: 1,
            detector: 2,
            net: 3,
        }
    }
}

impl Seeds {
    /// Derive all three seeds from a single master seed (used by the
    /// `--seed` override).
    pub fn from_master(seed: u64) -> Seeds {
        Seeds {
            world: crate::scenario::run::derive_seed(seed, 0),
            detector: crate::scenario::run::derive_seed(seed, 1),
            net: crate::scenario::run::derive_seed(seed, 2),
        }
    }
}

/// Pinhole intrinsics plus the downward mounting pitch.
///
/// The default focal length is picked so that a person at the nominal
/// formation standoff spans about 14% of the frame height. The formation
/// views the person from a steep 63 degree elevation, which foreshortens
/// a standing person by cos(63deg) = 0.45, so moderate tele optics are
/// needed to keep the full-frame appearance above the detector's 10%
/// cutoff.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CameraConfig {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: f64,
    pub height: f64,
    /// Camera pitch below the body horizontal (rad). `None` picks the
    /// angle that centers a person at the nominal formation standoff.
    pub pitch_down: Option<f64>,
}

impl Default for CameraConfig {
    fn default() -> Self {
        CameraConfig {
            fx: 1580.0,
            fy: 1580.0,
            cx: 1020.0,
            cy: 543.0,
            width: 2040.0,
            height: 1086.0,
            pitch_down: None,
        }
    }
}

/// Detector noise model plus its processing rate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DetectorConfig {
    pub noise: DetectorNoiseModel,
    /// Wall time one detection takes; also the ROI prediction horizon.
    pub processing_period: f64,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        DetectorConfig {
            noise: DetectorNoiseModel::default(),
            processing_period: 1.0 / 3.89,
        }
    }
}

/// Person path over the ground plane; the simulation lifts it to the
/// centroid height of the sampled person.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TrajectoryConfig {
    Stationary { origin: [f64; 2] },
    SquareWalk { center: [f64; 2], edge: f64, speed: f64 },
    Waypoints { points: Vec<[f64; 2]>, speed: f64 },
    /// Random walk with decaying velocity, sampled from the exact
    /// discretization of the given dynamics on the simulation clock.
    /// Matching these parameters to the tracker's motion model yields a
    /// run with zero model mismatch, which is what filter consistency
    /// checks need. `vertical_accel_std` sets the noise level on the
    /// height axis (default: same as horizontal); a walking person is
    /// closer to zero.
    Drift {
        origin: [f64; 2],
        decay_rate: f64,
        accel_noise_std: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        vertical_accel_std: Option<f64>,
    },
}

impl Default for TrajectoryConfig {
    fn default() -> Self {
        TrajectoryConfig::SquareWalk {
            center: [0.0, 0.0],
            edge: 3.0,
            speed: 0.5,
        }
    }
}

impl TrajectoryConfig {
    /// Lift the 2D path to a world trajectory at centroid height `z`.
    /// Drift paths are pre-sampled on the simulation grid out to
    /// `duration`; the other kinds consume no randomness.
    pub fn build<R: rand::Rng + ?Sized>(
        &self,
        z: f64,
        duration: f64,
        rng: &mut R,
    ) -> PersonTrajectory {
        match self {
            TrajectoryConfig::Stationary { origin } => PersonTrajectory::Stationary {
                origin: Vector3::new(origin[0], origin[1], z),
            },
            TrajectoryConfig::SquareWalk {
                center,
                edge,
                speed,
            } => PersonTrajectory::SquareWalk {
                center: Vector3::new(center[0], center[1], z),
                edge: *edge,
                speed: *speed,
            },
            TrajectoryConfig::Waypoints { points, speed } => PersonTrajectory::Waypoints {
                points: points
                    .iter()
                    .map(|p| Vector3::new(p[0], p[1], z))
                    .collect(),
                speed: *speed,
            },
            TrajectoryConfig::Drift {
                origin,
                decay_rate,
                accel_noise_std,
                vertical_accel_std,
            } => {
                let vertical = vertical_accel_std.unwrap_or(*accel_noise_std);
                let steps = (duration / crate::world::BASE_TICK).ceil() as usize + 1;
                PersonTrajectory::Sampled {
                    dt: crate::world::BASE_TICK,
                    path: crate::world::sample_drift_path(
                        Vector3::new(origin[0], origin[1], z),
                        *decay_rate,
                        Vector3::new(*accel_noise_std, *accel_noise_std, vertical),
                        crate::world::BASE_TICK,
                        steps,
                        rng,
                    ),
                }
            }
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            TrajectoryConfig::Stationary { .. } => "stationary",
            TrajectoryConfig::SquareWalk { .. } => "square_walk",
            TrajectoryConfig::Waypoints { .. } => "waypoints",
            TrajectoryConfig::Drift { .. } => "drift",
        }
    }
}

/// The three switches the ablation study flips.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct AblationFlags {
    /// Predictive ROI selection (otherwise full-frame detection).
    pub active_roi: bool,
    /// Self-pose bias estimation and subtraction.
    pub bias_correction: bool,
    /// Fusion of teammate measurements.
    pub cooperative: bool,
}

impl Default for AblationFlags {
    fn default() -> Self {
        AblationFlags {
            active_roi: true,
            bias_correction: true,
            cooperative: true,
        }
    }
}

/// Per-agent self-pose bias: a constant plus a slow sinusoid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BiasConfig {
    pub constant: [f64; 3],
    pub amplitude: [f64; 3],
    /// Sinusoid period (s); only slow drift is modeled, keep >= 60.
    pub period: f64,
}

impl Default for BiasConfig {
    fn default() -> Self {
        BiasConfig {
            constant: [0.0; 3],
            amplitude: [0.0; 3],
            period: 120.0,
        }
    }
}

impl BiasConfig {
    pub fn to_schedule(self) -> BiasSchedule {
        BiasSchedule {
            constant: Vector3::from(self.constant),
            amplitude: Vector3::from(self.amplitude),
            period: self.period,
        }
    }

    pub fn is_zero(&self) -> bool {
        self.constant == [0.0; 3] && self.amplitude == [0.0; 3]
    }
}

/// Self-localization error model of the agents.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LocalizationConfig {
    /// Per-axis position noise std of the reported pose (m).
    pub pos_noise_std: [f64; 3],
    /// Per-axis orientation noise std (rad).
    pub rot_noise_std: [f64; 3],
    /// Injected position bias per agent; missing entries mean no bias.
    pub bias: Vec<BiasConfig>,
}

impl Default for LocalizationConfig {
    fn default() -> Self {
        LocalizationConfig {
            pos_noise_std: [0.03; 3],
            rot_noise_std: [0.002; 3],
            // The standard scenario biases the second agent to exercise
            // the bias estimator.
            bias: vec![
                BiasConfig::default(),
                BiasConfig {
                    constant: [0.5, -0.3, 0.2],
                    ..BiasConfig::default()
                },
            ],
        }
    }
}

impl LocalizationConfig {
    /// Bias schedule of one agent (zero when unspecified).
    pub fn bias_for(&self, agent: usize) -> BiasSchedule {
        self.bias
            .get(agent)
            .copied()
            .unwrap_or_default()
            .to_schedule()
    }
}

/// Tracker tuning that is not part of the motion/fusion/ROI models.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrackerTuning {
    /// Detections below this confidence are discarded.
    pub confidence_threshold: f64,
    /// EMA gain of the self-pose bias estimate. At the default detection
    /// cadence the estimate settles with a time constant near
    /// 1 / (gain * rate), about 13 s, while its noise floor grows like
    /// sqrt(gain); 0.02 converges well inside a minute without letting
    /// the unobservable common mode wander far.
    pub bias_gain: f64,
    /// Std of the initial position estimate around the true person (m).
    ///
    /// The track is assumed alive (handed off) at t = 0, so this is the
    /// uncertainty of an ongoing track, not of a cold acquisition. Large
    /// values make the formation chase a phantom before the first
    /// detection can correct it.
    pub init_pos_std: f64,
    /// Std of the initial velocity estimate (m/s).
    pub init_vel_std: f64,
    /// Agent whose self-pose is trusted as bias-free; it skips its own
    /// bias estimation and anchors everyone else's.
    ///
    /// The bias update only observes the offset between an agent's raw
    /// measurements and the fused track, so the average of all bias
    /// estimates is unobservable: with every agent estimating, a constant
    /// offset splits between them and the common part drifts freely. A
    /// declared reference pins that freedom and makes the other agents'
    /// estimates converge to their true offsets.
    pub spbc_reference: Option<u32>,
}

impl Default for TrackerTuning {
    fn default() -> Self {
        TrackerTuning {
            confidence_threshold: 0.5,
            bias_gain: 0.02,
            init_pos_std: 0.75,
            init_vel_std: 0.3,
            spbc_reference: None,
        }
    }
}

/// Complete description of one simulated run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScenarioConfig {
    /// Simulated time (s).
    pub duration: f64,
    pub n_agents: u32,
    pub seeds: Seeds,
    pub camera: CameraConfig,
    /// Person height prior used both to sample the true person and as the
    /// tracker's backprojection prior.
    pub height: HeightModel,
    pub detector: DetectorConfig,
    pub motion: MotionModel,
    pub fusion: FusionParams,
    pub roi: RoiParams,
    pub formation: FormationConfig,
    pub link: LinkModel,
    pub trajectory: TrajectoryConfig,
    pub ablation: AblationFlags,
    pub localization: LocalizationConfig,
    pub tracker: TrackerTuning,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        ScenarioConfig {
            duration: 120.0,
            n_agents: 2,
            seeds: Seeds::default(),
            camera: CameraConfig::default(),
            height: HeightModel {
                mean: 1.7,
                std: 0.1,
            },
            detector: DetectorConfig::default(),
            motion: MotionModel::default(),
            fusion: FusionParams::default(),
            roi: RoiParams::default(),
            formation: FormationConfig::default(),
            link: LinkModel::default(),
            trajectory: TrajectoryConfig::default(),
            ablation: AblationFlags::default(),
            localization: LocalizationConfig::default(),
            tracker: TrackerTuning::default(),
        }
    }
}

impl ScenarioConfig {
    /// Parse and validate a TOML document. An empty document yields the
    /// default scenario.
    pub fn from_toml_str(text: &str) -> Result<ScenarioConfig, ConfigError> {
        let cfg: ScenarioConfig = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<ScenarioConfig, ConfigError> {
        ScenarioConfig::from_toml_str(&std::fs::read_to_string(path)?)
    }

    /// Canonical serialization; the digest is computed over this form.
    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Hex SHA-256 over the canonical serialization. Identical digests
    /// mean identical effective configurations.
    pub fn digest(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(self.to_toml().as_bytes());
        hex::encode(hasher.finalize())
    }

    /// Mounting pitch that centers a person at the nominal standoff.
    pub fn nominal_pitch_down(&self) -> f64 {
        let person_z = 0.5 * self.height.mean;
        let dz = self.formation.h_mav - person_z;
        let r = (self.formation.d_per * self.formation.d_per - dz * dz)
            .max(self.formation.min_radius * self.formation.min_radius)
            .sqrt();
        dz.atan2(r)
    }

    pub fn build_camera(&self) -> CameraModel {
        let pitch = self
            .camera
            .pitch_down
            .unwrap_or_else(|| self.nominal_pitch_down());
        CameraModel::with_pitch(
            self.camera.fx,
            self.camera.fy,
            self.camera.cx,
            self.camera.cy,
            self.camera.width,
            self.camera.height,
            pitch,
        )
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        ensure(
            self.duration > 0.0 && self.duration.is_finite(),
            "duration",
            "must be positive",
        )?;
        ensure(self.n_agents >= 1, "n_agents", "need at least one agent")?;
        ensure(
            (self.n_agents as usize) <= self.formation.azimuth_offsets.len(),
            "formation.azimuth_offsets",
            "need one azimuth per agent",
        )?;
        ensure(
            self.camera.fx > 0.0 && self.camera.fy > 0.0,
            "camera",
            "focal lengths must be positive",
        )?;
        ensure(
            self.camera.width > 0.0 && self.camera.height > 0.0,
            "camera",
            "image dimensions must be positive",
        )?;
        if let Some(pitch) = self.camera.pitch_down {
            ensure(
                pitch > 0.0 && pitch < std::f64::consts::FRAC_PI_2,
                "camera.pitch_down",
                "must lie in (0, pi/2)",
            )?;
        }
        ensure(self.height.mean > 0.0, "height.mean", "must be positive")?;
        ensure(self.height.std >= 0.0, "height.std", "must be nonnegative")?;

        let n = &self.detector.noise;
        ensure(
            n.var_top >= 0.0 && n.var_bottom >= 0.0 && n.var_left >= 0.0 && n.var_right >= 0.0,
            "detector.noise",
            "variances must be nonnegative",
        )?;
        ensure(
            n.p_max > 0.0 && n.p_max <= 1.0,
            "detector.noise.p_max",
            "must lie in (0, 1]",
        )?;
        ensure(
            0.0 <= n.knee_low && n.knee_low < n.knee_high && n.knee_high <= 1.0,
            "detector.noise",
            "knees must satisfy 0 <= knee_low < knee_high <= 1",
        )?;
        ensure(
            (0.0..1.0).contains(&n.false_positive_prob),
            "detector.noise.false_positive_prob",
            "must lie in [0, 1)",
        )?;
        ensure(
            self.detector.processing_period > 0.0,
            "detector.processing_period",
            "must be positive",
        )?;

        ensure(
            self.motion.decay_rate > 0.0,
            "motion.decay_rate",
            "must be positive",
        )?;
        ensure(
            self.motion.accel_noise_std >= 0.0,
            "motion.accel_noise_std",
            "must be nonnegative",
        )?;
        ensure(
            self.fusion.gate_threshold > 0.0,
            "fusion.gate_threshold",
            "must be positive",
        )?;
        ensure(
            self.fusion.max_lag >= 0.0,
            "fusion.max_lag",
            "must be nonnegative",
        )?;
        ensure(
            self.roi.margin_factor >= 1.0,
            "roi.margin_factor",
            "must be at least 1",
        )?;
        ensure(self.roi.aspect > 0.0, "roi.aspect", "must be positive")?;

        let f = &self.formation;
        ensure(f.d_per > 0.0, "formation.d_per", "must be positive")?;
        ensure(f.h_mav > 0.0, "formation.h_mav", "must be positive")?;
        ensure(
            f.min_radius > 0.0,
            "formation.min_radius",
            "must be positive",
        )?;
        ensure(f.max_speed > 0.0, "formation.max_speed", "must be positive")?;
        ensure(f.gain > 0.0, "formation.gain", "must be positive")?;

        ensure(
            self.link.base_latency >= 0.0,
            "link.base_latency",
            "must be nonnegative",
        )?;
        ensure(
            self.link.jitter_std >= 0.0,
            "link.jitter_std",
            "must be nonnegative",
        )?;
        ensure(
            (0.0..1.0).contains(&self.link.drop_probability),
            "link.drop_probability",
            "must lie in [0, 1)",
        )?;

        match &self.trajectory {
            TrajectoryConfig::Stationary { .. } => {}
            TrajectoryConfig::SquareWalk { edge, speed, .. } => {
                ensure(*edge > 0.0, "trajectory.edge", "must be positive")?;
                ensure(*speed >= 0.0, "trajectory.speed", "must be nonnegative")?;
            }
            TrajectoryConfig::Waypoints { points, speed } => {
                ensure(
                    !points.is_empty(),
                    "trajectory.points",
                    "need at least one waypoint",
                )?;
                ensure(*speed >= 0.0, "trajectory.speed", "must be nonnegative")?;
            }
            TrajectoryConfig::Drift {
                decay_rate,
                accel_noise_std,
                vertical_accel_std,
                ..
            } => {
                ensure(
                    *decay_rate > 0.0,
                    "trajectory.decay_rate",
                    "must be positive",
                )?;
                ensure(
                    *accel_noise_std >= 0.0,
                    "trajectory.accel_noise_std",
                    "must be nonnegative",
                )?;
                ensure(
                    vertical_accel_std.is_none_or(|s| s >= 0.0),
                    "trajectory.vertical_accel_std",
                    "must be nonnegative",
                )?;
            }
        }

        let loc = &self.localization;
        ensure(
            loc.pos_noise_std.iter().all(|s| *s >= 0.0),
            "localization.pos_noise_std",
            "must be nonnegative",
        )?;
        ensure(
            loc.rot_noise_std.iter().all(|s| *s >= 0.0),
            "localization.rot_noise_std",
            "must be nonnegative",
        )?;
        for (i, b) in loc.bias.iter().enumerate() {
            ensure(
                b.period > 0.0,
                "localization.bias.period",
                "must be positive",
            )?;
            if b.amplitude != [0.0; 3] {
                ensure(
                    b.period >= 60.0,
                    "localization.bias.period",
                    &format!("agent {i}: drifting bias must be slow (period >= 60 s)"),
                )?;
            }
        }

        let t = &self.tracker;
        ensure(
            (0.0..=1.0).contains(&t.confidence_threshold),
            "tracker.confidence_threshold",
            "must lie in [0, 1]",
        )?;
        ensure(
            t.bias_gain > 0.0 && t.bias_gain <= 1.0,
            "tracker.bias_gain",
            "must lie in (0, 1]",
        )?;
        ensure(
            t.init_pos_std >= 0.0 && t.init_vel_std >= 0.0,
            "tracker",
            "initial stds must be nonnegative",
        )?;
        if let Some(agent) = t.spbc_reference {
            ensure(
                agent < self.n_agents,
                "tracker.spbc_reference",
                "must name an existing agent",
            )?;
        }
        Ok(())
    }
}
