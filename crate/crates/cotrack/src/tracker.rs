//! Per-agent cooperative person tracking.
//!
//! Each agent runs the same loop on every camera frame:
//!
//! 1. run the detector on the region of interest selected last frame (when
//!    the detection pipeline is free);
//! 2. backproject the best detection to a world-frame position measurement
//!    and broadcast it together with the agent's own reported pose;
//! 3. EKF-predict the track to the frame time and fuse the own measurement
//!    first, then teammate measurements ordered by (timestamp, agent);
//! 4. predict the track one detection period ahead and select the next ROI
//!    around the projected head/feet band;
//! 5. update the self-pose bias estimate from the difference between the
//!    own raw measurement and the fused estimate.
//!
//! The motion model is an exponentially decelerating velocity driven by
//! white acceleration noise; its exact discretization makes prediction a
//! semigroup (predicting in two legs equals one combined leg).

use crate::detector::{detect, DetectorClock, DetectorNoiseModel, SimFrame};
use crate::geometry::{
    compose_pose, project_point, project_point_with_cov, backproject_with_height, CameraModel,
    GeometryError, HeightModel, Pose6D, Roi,
};
use crate::AgentId;
use nalgebra::{Matrix3, Matrix6, Vector3};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Innovation covariances with a condition number beyond this are rejected.
pub const MAX_CONDITION: f64 = 1e12;

/// Tracker errors.
#[derive(Debug, Clone, Error, PartialEq)]
pub enum TrackerError {
    /// Prediction must move forward in time.
    #[error("negative prediction step dt = {0:.6} s")]
    NegativeDt(f64),
    /// Measurement too old (or too far in the future) to fuse at the
    /// current filter time.
    #[error("stale measurement: lag {lag:.3} s exceeds {max_lag:.3} s")]
    StaleMeasurement { lag: f64, max_lag: f64 },
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Detector(#[from] crate::detector::DetectorError),
}

/// Exponentially decelerating velocity model.
///
/// Between updates the continuous dynamics are `dp = v dt`,
/// `dv = -decay_rate * v dt + accel_noise_std * dW`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MotionModel {
    /// Velocity decay rate (1/s).
    pub decay_rate: f64,
    /// White acceleration noise density (m/s^1.5).
    pub accel_noise_std: f64,
}

impl Default for MotionModel {
    fn default() -> Self {
        MotionModel {
            decay_rate: 1.0,
            accel_noise_std: 1.0,
        }
    }
}

/// Gating configuration for measurement fusion.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FusionParams {
    /// Mahalanobis distance gate (not squared).
    pub gate_threshold: f64,
    /// Maximum |measurement time - filter time| accepted for fusion.
    pub max_lag: f64,
}

impl Default for FusionParams {
    fn default() -> Self {
        FusionParams {
            gate_threshold: 5.0,
            max_lag: 0.5,
        }
    }
}

/// ROI construction parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RoiParams {
    /// Minimum ROI height as a multiple of the predicted person pixel
    /// height (margin for detector context).
    pub margin_factor: f64,
    /// Width over height of the ROI before clipping.
    pub aspect: f64,
}

impl Default for RoiParams {
    fn default() -> Self {
        RoiParams {
            margin_factor: 1.25,
            aspect: 4.0 / 3.0,
        }
    }
}

/// Tracked person state: position and velocity with joint covariance,
/// valid at `timestamp`.
#[derive(Debug, Clone, PartialEq)]
pub struct TrackState {
    pub position: Vector3<f64>,
    pub velocity: Vector3<f64>,
    /// 6x6 covariance over (position, velocity).
    pub covariance: Matrix6<f64>,
    pub timestamp: f64,
}

/// A person position measurement in the world frame, as exchanged between
/// agents.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectionMeasurement {
    pub mean: Vector3<f64>,
    pub covariance: Matrix3<f64>,
    pub source: AgentId,
    pub timestamp: f64,
}

/// Exponential-moving-average estimate of the agent's self-pose position
/// bias.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BiasEstimate {
    pub bias: Vector3<f64>,
    /// EMA gain applied per own-detection event.
    pub gain: f64,
}

impl BiasEstimate {
    pub fn new(gain: f64) -> BiasEstimate {
        BiasEstimate {
            bias: Vector3::zeros(),
            gain,
        }
    }
}

/// What happened to one measurement during fusion.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum UpdateOutcome {
    Fused,
    /// Mahalanobis distance beyond the gate; state unchanged.
    GateRejected { distance: f64 },
    /// Innovation covariance numerically unusable; state unchanged.
    IllConditioned { condition: f64 },
}

/// Messages an agent emits during one step, to be wrapped and broadcast by
/// the network layer.
#[derive(Debug, Clone, PartialEq)]
pub enum MessagePayload {
    SelfPose(Pose6D),
    Measurement(DetectionMeasurement),
}

/// Exact per-axis discretization of the motion model over `dt`:
/// transition coefficients and process noise entries.
pub(crate) fn transition_coeffs(model: &MotionModel, dt: f64) -> (f64, f64) {
    let x = model.decay_rate * dt;
    let decay = (-x).exp();
    // Taylor limit of (1 - e^{-x}) / decay_rate for vanishing decay.
    let alpha = if x < 1e-8 {
        dt
    } else {
        -(-x).exp_m1() / model.decay_rate
    };
    (alpha, decay)
}

/// Process noise entries (q_pp, q_pv, q_vv) of the exact discretization.
///
/// These are the integrals of the white-acceleration noise pushed through
/// the decelerating dynamics; they reduce to the familiar double-integrator
/// form (dt^3/3, dt^2/2, dt) as the decay rate vanishes, and satisfy the
/// semigroup identity Q(a+b) = F(b) Q(a) F(b)^T + Q(b) exactly.
pub(crate) fn process_noise_entries(model: &MotionModel, dt: f64) -> (f64, f64, f64) {
    let s2 = model.accel_noise_std * model.accel_noise_std;
    let l = model.decay_rate;
    let x = l * dt;
    if x < 1e-3 {
        // Series in x; truncation error below 1e-12 relative at the switch.
        let q_pp = s2 * dt * dt * dt
            * (1.0 / 3.0 - x / 4.0 + 7.0 * x * x / 60.0 - x * x * x / 24.0);
        let q_pv =
            s2 * dt * dt * (0.5 - x / 2.0 + 7.0 * x * x / 24.0 - x * x * x / 8.0);
        let q_vv = s2 * dt * (1.0 - x + 2.0 * x * x / 3.0 - x * x * x / 3.0);
        (q_pp, q_pv, q_vv)
    } else {
        let em1 = -(-x).exp_m1(); // 1 - e^{-x}
        let em2 = -(-2.0 * x).exp_m1(); // 1 - e^{-2x}
        let q_vv = s2 * em2 / (2.0 * l);
        let q_pv = s2 / l * (em1 / l - em2 / (2.0 * l));
        let q_pp = s2 / (l * l) * (dt - 2.0 * em1 / l + em2 / (2.0 * l));
        (q_pp, q_pv, q_vv)
    }
}

/// Propagate the track forward by `dt` seconds.
///
/// # Errors
///
/// [`TrackerError::NegativeDt`] when `dt < 0`.
pub fn ekf_predict(
    state: &TrackState,
    dt: f64,
    model: &MotionModel,
) -> Result<TrackState, TrackerError> {
    if dt < 0.0 {
        return Err(TrackerError::NegativeDt(dt));
    }
    if dt == 0.0 {
        return Ok(state.clone());
    }
    let (alpha, decay) = transition_coeffs(model, dt);
    let position = state.position + alpha * state.velocity;
    let velocity = decay * state.velocity;

    let mut f = Matrix6::<f64>::identity();
    f.fixed_view_mut::<3, 3>(0, 3)
        .copy_from(&(Matrix3::identity() * alpha));
    f.fixed_view_mut::<3, 3>(3, 3)
        .copy_from(&(Matrix3::identity() * decay));
    let (q_pp, q_pv, q_vv) = process_noise_entries(model, dt);
    let mut q = Matrix6::<f64>::zeros();
    for i in 0..3 {
        q[(i, i)] = q_pp;
        q[(i, i + 3)] = q_pv;
        q[(i + 3, i)] = q_pv;
        q[(i + 3, i + 3)] = q_vv;
    }
    let cov = f * state.covariance * f.transpose() + q;
    Ok(TrackState {
        position,
        velocity,
        covariance: 0.5 * (cov + cov.transpose()),
        timestamp: state.timestamp + dt,
    })
}

/// Fuse one position measurement into the track at the current filter time.
///
/// The innovation is gated on Mahalanobis distance and on the condition
/// number of the innovation covariance; rejected measurements leave the
/// state untouched and report why. The covariance update uses the Joseph
/// form, which keeps the result symmetric positive semidefinite and makes
/// fusing a batch of compatible measurements independent of their order.
///
/// # Errors
///
/// [`TrackerError::StaleMeasurement`] when the measurement is further than
/// `params.max_lag` from the filter time; the caller decides whether to
/// drop or log it.
pub fn ekf_update(
    state: &TrackState,
    z: &DetectionMeasurement,
    params: &FusionParams,
) -> Result<(TrackState, UpdateOutcome), TrackerError> {
    let lag = (z.timestamp - state.timestamp).abs();
    if lag > params.max_lag {
        return Err(TrackerError::StaleMeasurement {
            lag,
            max_lag: params.max_lag,
        });
    }
    let p_pos = state.covariance.fixed_view::<3, 3>(0, 0).into_owned();
    let s = p_pos + z.covariance;
    let eig = nalgebra::SymmetricEigen::new(s);
    let max_eig = eig.eigenvalues.max();
    let min_eig = eig.eigenvalues.min();
    if !min_eig.is_finite() || min_eig <= 0.0 || max_eig / min_eig > MAX_CONDITION {
        let condition = if min_eig > 0.0 {
            max_eig / min_eig
        } else {
            f64::INFINITY
        };
        return Ok((state.clone(), UpdateOutcome::IllConditioned { condition }));
    }
    let chol = match nalgebra::Cholesky::new(s) {
        Some(c) => c,
        None => {
            return Ok((
                state.clone(),
                UpdateOutcome::IllConditioned {
                    condition: max_eig / min_eig,
                },
            ))
        }
    };
    let innovation = z.mean - state.position;
    let distance = innovation.dot(&chol.solve(&innovation)).sqrt();
    if distance > params.gate_threshold {
        return Ok((state.clone(), UpdateOutcome::GateRejected { distance }));
    }

    let s_inv = chol.inverse();
    let ph_t = state.covariance.fixed_view::<6, 3>(0, 0).into_owned();
    let k = ph_t * s_inv;
    let dx = k * innovation;
    let position = state.position + dx.fixed_view::<3, 1>(0, 0).into_owned();
    let velocity = state.velocity + dx.fixed_view::<3, 1>(3, 0).into_owned();

    let mut kh = Matrix6::<f64>::zeros();
    kh.fixed_view_mut::<6, 3>(0, 0).copy_from(&k);
    let i_kh = Matrix6::identity() - kh;
    let cov = i_kh * state.covariance * i_kh.transpose() + k * z.covariance * k.transpose();
    Ok((
        TrackState {
            position,
            velocity,
            covariance: 0.5 * (cov + cov.transpose()),
            timestamp: state.timestamp,
        },
        UpdateOutcome::Fused,
    ))
}

/// Where the ROI for the next frame came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RoiBasis {
    /// Constructed around the predicted person projection.
    Predicted,
    /// Target not projectable (behind the camera); full image used instead.
    FullImageFallback,
}

/// Select the region of interest for the next detection.
///
/// The track is predicted `lead_time` ahead; the projected head and feet of
/// the person (position offset by half the height prior, with the vertical
/// variance inflated by the height-prior spread) bound the ROI vertically
/// at three projected standard deviations outward. The ROI is never shorter
/// than `margin_factor` times the predicted person pixel height, gets its
/// width from the fixed aspect ratio, and is clipped to the image.
pub fn predict_roi(
    state: &TrackState,
    model: &MotionModel,
    lead_time: f64,
    camera: &CameraModel,
    cam_world_pose: &nalgebra::Isometry3<f64>,
    height: &HeightModel,
    params: &RoiParams,
) -> (Roi, RoiBasis) {
    let full = (Roi::full_image(camera), RoiBasis::FullImageFallback);
    let predicted = match ekf_predict(state, lead_time.max(0.0), model) {
        Ok(p) => p,
        Err(_) => return full,
    };
    let pos = predicted.position;
    let pos_cov = predicted.covariance.fixed_view::<3, 3>(0, 0).into_owned();
    let half_h = Vector3::new(0.0, 0.0, height.mean / 2.0);
    let mut ends_cov = pos_cov;
    ends_cov[(2, 2)] += height.std * height.std / 4.0;

    let center = match project_point(camera, cam_world_pose, &pos) {
        Ok(c) => c,
        Err(_) => return full,
    };
    let head = match project_point_with_cov(camera, cam_world_pose, &(pos + half_h), &ends_cov) {
        Ok(h) => h,
        Err(_) => return full,
    };
    let feet = match project_point_with_cov(camera, cam_world_pose, &(pos - half_h), &ends_cov) {
        Ok(f) => f,
        Err(_) => return full,
    };
    let sigma_v_head = head.1[(1, 1)].max(0.0).sqrt();
    let sigma_v_feet = feet.1[(1, 1)].max(0.0).sqrt();
    let v_top = head.0.v - 3.0 * sigma_v_head;
    let v_bottom = feet.0.v + 3.0 * sigma_v_feet;

    let person_px_height = (feet.0.v - head.0.v).max(1.0);
    let band_center = 0.5 * (v_top + v_bottom);
    let roi_height = (v_bottom - v_top).max(params.margin_factor * person_px_height);
    let roi_width = params.aspect * roi_height;
    let roi = Roi::clamped(
        center.u - 0.5 * roi_width,
        band_center - 0.5 * roi_height,
        center.u + 0.5 * roi_width,
        band_center + 0.5 * roi_height,
        camera,
    );
    (roi, RoiBasis::Predicted)
}

/// One EMA step of the self-pose bias estimate.
///
/// `own_raw_measurement` is the agent's *uncorrected* world-frame
/// measurement; `fused_position` the track position after fusing all
/// measurements of the cycle.
pub fn update_bias(
    estimate: &BiasEstimate,
    own_raw_measurement: &Vector3<f64>,
    fused_position: &Vector3<f64>,
) -> BiasEstimate {
    BiasEstimate {
        bias: (1.0 - estimate.gain) * estimate.bias
            + estimate.gain * (own_raw_measurement - fused_position),
        gain: estimate.gain,
    }
}

/// Behaviour switches and tuning of the per-agent pipeline.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrackerParams {
    pub motion: MotionModel,
    pub fusion: FusionParams,
    pub roi: RoiParams,
    /// How far ahead the next ROI is predicted (one detection period).
    pub roi_lead_time: f64,
    /// Detections below this confidence are ignored.
    pub confidence_threshold: f64,
    /// EMA gain of the self-pose bias estimate.
    pub bias_gain: f64,
    /// Select the ROI actively; otherwise detect on the full frame.
    pub active_roi: bool,
    /// Estimate and subtract the self-pose bias.
    pub bias_correction: bool,
    /// Fuse teammate measurements.
    pub cooperative: bool,
}

impl Default for TrackerParams {
    fn default() -> Self {
        TrackerParams {
            motion: MotionModel::default(),
            fusion: FusionParams::default(),
            roi: RoiParams::default(),
            roi_lead_time: 1.0 / 3.89,
            confidence_threshold: 0.5,
            bias_gain: 0.05,
            active_roi: true,
            bias_correction: true,
            cooperative: true,
        }
    }
}

/// Result of one pipeline step, for logging and transmission.
#[derive(Debug, Clone)]
pub struct StepOutput {
    /// The detector ran on this frame.
    pub attempted: bool,
    /// The detector produced a usable measurement.
    pub detected: bool,
    /// Bias-corrected own measurement, as broadcast to teammates.
    pub own_measurement: Option<DetectionMeasurement>,
    /// ROI the detector ran on.
    pub roi_used: Roi,
    /// ROI selected for the next frame and how it was obtained.
    pub next_roi: Roi,
    pub next_roi_basis: RoiBasis,
    /// Messages to broadcast.
    pub outbound: Vec<MessagePayload>,
    /// Teammate measurements rejected by gating or staleness this step.
    pub rejected: usize,
}

/// Per-agent tracking pipeline state.
#[derive(Debug, Clone)]
pub struct TrackerPipeline {
    pub agent: AgentId,
    pub camera: CameraModel,
    pub height: HeightModel,
    pub detector_model: DetectorNoiseModel,
    pub params: TrackerParams,
    pub track: TrackState,
    pub roi: Roi,
    pub bias: BiasEstimate,
    pub clock: DetectorClock,
}

impl TrackerPipeline {
    pub fn new(
        agent: AgentId,
        camera: CameraModel,
        height: HeightModel,
        detector_model: DetectorNoiseModel,
        params: TrackerParams,
        initial: TrackState,
        clock: DetectorClock,
    ) -> TrackerPipeline {
        let roi = Roi::full_image(&camera);
        TrackerPipeline {
            agent,
            camera,
            height,
            detector_model,
            params,
            track: initial,
            roi,
            bias: BiasEstimate::new(params.bias_gain),
            clock,
        }
    }

    /// The body pose used for measurement/ROI geometry: reported pose with
    /// the estimated position bias removed (when correction is enabled).
    fn corrected_body_pose(&self, reported: &Pose6D) -> Pose6D {
        let mut pose = reported.clone();
        if self.params.bias_correction {
            pose.position -= self.bias.bias;
        }
        pose
    }

    /// Run one frame through the pipeline.
    ///
    /// `inbox` carries teammate measurements delivered since the last
    /// frame; `rng` drives the simulated detector.
    pub fn step(
        &mut self,
        frame: &SimFrame,
        reported_pose: &Pose6D,
        inbox: &[DetectionMeasurement],
        rng: &mut impl Rng,
    ) -> Result<StepOutput, TrackerError> {
        let roi_used = if self.params.active_roi {
            self.roi
        } else {
            Roi::full_image(&self.camera)
        };

        // Step 1: detection on the previously selected ROI, when the
        // pipeline is free.
        let attempted = self.clock.try_accept(frame.timestamp);
        let detections = if attempted {
            detect(frame, &roi_used, &self.detector_model, rng)?
        } else {
            Vec::new()
        };

        // Predict to the frame time (needed both for candidate selection
        // and fusion).
        let dt = frame.timestamp - self.track.timestamp;
        let mut track = ekf_predict(&self.track, dt, &self.params.motion)?;

        // Step 2: world-frame measurement from the best candidate box.
        // Raw measurements use the reported pose; the broadcast and fused
        // measurement subtracts the current bias estimate.
        let reported_cam = compose_pose(reported_pose, &self.camera.body_from_cam());
        let mut best: Option<(f64, Vector3<f64>, Matrix3<f64>)> = None;
        for det in &detections {
            if det.confidence < self.params.confidence_threshold {
                continue;
            }
            let abs_noise = det.noise.to_absolute(roi_used.width(), roi_used.height());
            let Ok((mean, cov)) = backproject_with_height(
                &self.camera,
                &reported_cam,
                &det.bbox,
                &abs_noise,
                &self.height,
            ) else {
                continue;
            };
            let p_pos = track.covariance.fixed_view::<3, 3>(0, 0).into_owned();
            let s = p_pos + cov;
            let Some(chol) = nalgebra::Cholesky::new(s) else {
                continue;
            };
            let innov = mean - track.position;
            let d2 = innov.dot(&chol.solve(&innov));
            if best.as_ref().is_none_or(|(bd, _, _)| d2 < *bd) {
                best = Some((d2, mean, cov));
            }
        }

        let mut outbound = Vec::new();
        let mut own_raw: Option<Vector3<f64>> = None;
        let own_measurement = best.map(|(_, raw_mean, cov)| {
            own_raw = Some(raw_mean);
            let corrected = if self.params.bias_correction {
                raw_mean - self.bias.bias
            } else {
                raw_mean
            };
            DetectionMeasurement {
                mean: corrected,
                covariance: cov,
                source: self.agent,
                timestamp: frame.timestamp,
            }
        });
        // Step 3: transmit before fusing, as the loop does on hardware.
        if let Some(meas) = &own_measurement {
            outbound.push(MessagePayload::SelfPose(reported_pose.clone()));
            outbound.push(MessagePayload::Measurement(meas.clone()));
        }

        // Steps 4-7: fuse own measurement first, then teammates ordered by
        // (timestamp, agent id). Stale or gated messages are counted, not
        // fatal.
        let mut rejected = 0usize;
        let mut own_fused = false;
        if let Some(meas) = &own_measurement {
            let (next, outcome) = ekf_update(&track, meas, &self.params.fusion)?;
            track = next;
            if matches!(outcome, UpdateOutcome::Fused) {
                own_fused = true;
            } else {
                rejected += 1;
            }
        }
        if self.params.cooperative {
            let mut teammates: Vec<&DetectionMeasurement> = inbox.iter().collect();
            teammates.sort_by(|a, b| {
                a.timestamp
                    .total_cmp(&b.timestamp)
                    .then(a.source.cmp(&b.source))
            });
            for meas in teammates {
                match ekf_update(&track, meas, &self.params.fusion) {
                    Ok((next, UpdateOutcome::Fused)) => track = next,
                    Ok((_, _)) | Err(TrackerError::StaleMeasurement { .. }) => rejected += 1,
                    Err(e) => return Err(e),
                }
            }
        }

        // Steps 8-9: next ROI from the prediction, through the corrected
        // pose geometry.
        let (next_roi, next_roi_basis) = if self.params.active_roi {
            let corrected_cam = compose_pose(
                &self.corrected_body_pose(reported_pose),
                &self.camera.body_from_cam(),
            );
            predict_roi(
                &track,
                &self.params.motion,
                self.params.roi_lead_time,
                &self.camera,
                &corrected_cam.isometry(),
                &self.height,
                &self.params.roi,
            )
        } else {
            (Roi::full_image(&self.camera), RoiBasis::Predicted)
        };
        self.roi = next_roi;

        // Step 10: bias EMA per own-detection event (only when the own
        // measurement was actually fused; a gated own box is an outlier).
        if self.params.bias_correction && own_fused {
            if let Some(raw) = own_raw {
                self.bias = update_bias(&self.bias, &raw, &track.position);
            }
        }

        self.track = track.clone();
        Ok(StepOutput {
            attempted,
            detected: own_measurement.is_some(),
            own_measurement,
            roi_used,
            next_roi,
            next_roi_basis,
            outbound,
            rejected,
        })
    }
}
