//! Ground-truth world: person trajectories, MAV kinematics with a
//! formation controller, self-localization error injection, and the master
//! simulation clock.
//!
//! The world lives in an ENU frame (x east, y north, z up, ground at
//! z = 0). Time advances on a fixed microtick and every periodic activity
//! (state integration, camera frames, pose keepalives) is a multiple of
//! it, so event order is exact integer arithmetic and runs replay
//! identically.

use crate::geometry::{project_point, BBox, CameraModel, Pose6D};
use crate::AgentId;
use nalgebra::{Isometry3, UnitQuaternion, Vector3};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

/// Master clock resolution (s). 100 Hz state, 40 Hz frames and 10 Hz
/// keepalives are all integer multiples.
pub const BASE_TICK: f64 = 0.005;
/// State/controller integration every `STATE_EVERY` ticks (100 Hz).
pub const STATE_EVERY: u64 = 2;
/// Camera frames every `FRAME_EVERY` ticks (40 Hz).
pub const FRAME_EVERY: u64 = 5;
/// Self-pose keepalive broadcasts every `KEEPALIVE_EVERY` ticks (10 Hz).
pub const KEEPALIVE_EVERY: u64 = 20;

/// Ground-truth person motion. Positions are the person centroid; the
/// caller puts half the true body height into the z component of
/// `origin`/`center`/waypoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum PersonTrajectory {
    Stationary {
        origin: Vector3<f64>,
    },
    /// Axis-aligned (north-aligned) square walked counter-clockwise at
    /// constant speed, starting at the south-west corner heading east.
    SquareWalk {
        center: Vector3<f64>,
        edge: f64,
        speed: f64,
    },
    /// Piecewise-linear path at constant speed; the person stops at the
    /// last waypoint.
    Waypoints {
        points: Vec<Vector3<f64>>,
        speed: f64,
    },
    /// Pre-sampled path on a fixed grid (see [`sample_drift_path`]).
    /// Queries snap to the nearest grid point plus a first-order velocity
    /// correction; the simulation clock only ever lands on grid points.
    Sampled {
        dt: f64,
        path: Vec<PathSample>,
    },
}

/// One grid point of a pre-sampled trajectory.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PathSample {
    pub position: Vector3<f64>,
    pub velocity: Vector3<f64>,
}

/// Sample a decaying-velocity random walk: the exact discretization of
/// `dp = v dt`, `dv = -decay_rate v dt + accel_noise_std dW` on a `dt`
/// grid, axes independent with per-axis noise levels. Matching the levels
/// to the tracking filter's motion model gives runs that probe filter
/// consistency rather than model mismatch; a zero vertical level keeps
/// the walker on the ground.
pub fn sample_drift_path<R: Rng + ?Sized>(
    origin: Vector3<f64>,
    decay_rate: f64,
    accel_noise_std: Vector3<f64>,
    dt: f64,
    steps: usize,
    rng: &mut R,
) -> Vec<PathSample> {
    let unit = crate::tracker::MotionModel {
        decay_rate,
        accel_noise_std: 1.0,
    };
    let (alpha, decay) = crate::tracker::transition_coeffs(&unit, dt);
    let (q_pp, q_pv, q_vv) = crate::tracker::process_noise_entries(&unit, dt);
    // Cholesky factor of the unit-noise 2x2 process block; the per-axis
    // factor scales linearly with that axis' noise level.
    let (l11, l21, l22) = if q_pp > 0.0 {
        let l11 = q_pp.sqrt();
        let l21 = q_pv / l11;
        (l11, l21, (q_vv - l21 * l21).max(0.0).sqrt())
    } else {
        (0.0, 0.0, q_vv.max(0.0).sqrt())
    };
    let mut path = Vec::with_capacity(steps + 1);
    let mut pos = origin;
    let mut vel = Vector3::zeros();
    path.push(PathSample {
        position: pos,
        velocity: vel,
    });
    for _ in 0..steps {
        for k in 0..3 {
            let w1: f64 = rng.sample(StandardNormal);
            let w2: f64 = rng.sample(StandardNormal);
            let s = accel_noise_std[k];
            let p = pos[k] + alpha * vel[k] + s * l11 * w1;
            let v = decay * vel[k] + s * (l21 * w1 + l22 * w2);
            pos[k] = p;
            vel[k] = v;
        }
        path.push(PathSample {
            position: pos,
            velocity: vel,
        });
    }
    path
}

/// Person centroid at time `t`.
pub fn person_position(traj: &PersonTrajectory, t: f64) -> Vector3<f64> {
    match traj {
        PersonTrajectory::Stationary { origin } => *origin,
        PersonTrajectory::SquareWalk {
            center,
            edge,
            speed,
        } => {
            let half = 0.5 * edge;
            // Corner order: SW, SE, NE, NW; legs head east, north, west,
            // south.
            let corners = [
                Vector3::new(center.x - half, center.y - half, center.z),
                Vector3::new(center.x + half, center.y - half, center.z),
                Vector3::new(center.x + half, center.y + half, center.z),
                Vector3::new(center.x - half, center.y + half, center.z),
            ];
            let dirs = [
                Vector3::new(1.0, 0.0, 0.0),
                Vector3::new(0.0, 1.0, 0.0),
                Vector3::new(-1.0, 0.0, 0.0),
                Vector3::new(0.0, -1.0, 0.0),
            ];
            let perimeter = 4.0 * edge;
            let s = (speed * t).rem_euclid(perimeter);
            let leg = ((s / edge) as usize).min(3);
            let along = s - leg as f64 * edge;
            corners[leg] + dirs[leg] * along
        }
        PersonTrajectory::Waypoints { points, speed } => {
            if points.is_empty() {
                return Vector3::zeros();
            }
            let mut s = (speed * t).max(0.0);
            for w in points.windows(2) {
                let seg = w[1] - w[0];
                let len = seg.norm();
                if s <= len {
                    return if len > 0.0 { w[0] + seg * (s / len) } else { w[0] };
                }
                s -= len;
            }
            *points.last().unwrap()
        }
        PersonTrajectory::Sampled { dt, path } => {
            let (sample, tau) = sampled_at(*dt, path, t);
            sample.position + sample.velocity * tau
        }
    }
}

/// Nearest grid sample and the residual time offset to it.
fn sampled_at(dt: f64, path: &[PathSample], t: f64) -> (PathSample, f64) {
    debug_assert!(!path.is_empty());
    let idx = ((t / dt).round().max(0.0) as usize).min(path.len() - 1);
    (path[idx], t - idx as f64 * dt)
}

/// Person centroid velocity at time `t` (discontinuous at corners and
/// waypoints; the value on the current leg).
pub fn person_velocity(traj: &PersonTrajectory, t: f64) -> Vector3<f64> {
    match traj {
        PersonTrajectory::Stationary { .. } => Vector3::zeros(),
        PersonTrajectory::SquareWalk { edge, speed, .. } => {
            let dirs = [
                Vector3::new(1.0, 0.0, 0.0),
                Vector3::new(0.0, 1.0, 0.0),
                Vector3::new(-1.0, 0.0, 0.0),
                Vector3::new(0.0, -1.0, 0.0),
            ];
            let perimeter = 4.0 * edge;
            let s = (speed * t).rem_euclid(perimeter);
            let leg = ((s / edge) as usize).min(3);
            dirs[leg] * *speed
        }
        PersonTrajectory::Waypoints { points, speed } => {
            let mut s = (speed * t).max(0.0);
            for w in points.windows(2) {
                let seg = w[1] - w[0];
                let len = seg.norm();
                if s <= len {
                    return if len > 0.0 { seg * (*speed / len) } else { Vector3::zeros() };
                }
                s -= len;
            }
            Vector3::zeros()
        }
        PersonTrajectory::Sampled { dt, path } => sampled_at(*dt, path, t).0.velocity,
    }
}

/// Ground truth of one MAV plus its localization error model.
#[derive(Debug, Clone, PartialEq)]
pub struct MavTruth {
    /// True body pose (zero covariance).
    pub true_pose: Pose6D,
    /// Additive position bias of the reported pose (m). Not reflected in
    /// the reported covariance; the tracking loop has to absorb it.
    pub localization_bias: Vector3<f64>,
    /// Per-axis position noise std of the reported pose (m).
    pub pos_noise_std: Vector3<f64>,
    /// Per-axis orientation noise std of the reported pose (rad,
    /// body-frame small angles).
    pub rot_noise_std: Vector3<f64>,
}

impl MavTruth {
    /// A level MAV at `position` with the given yaw and no localization
    /// error.
    pub fn level_at(position: Vector3<f64>, yaw: f64) -> MavTruth {
        MavTruth {
            true_pose: Pose6D {
                position,
                orientation: UnitQuaternion::from_euler_angles(0.0, 0.0, yaw),
                covariance: nalgebra::Matrix6::zeros(),
            },
            localization_bias: Vector3::zeros(),
            pos_noise_std: Vector3::zeros(),
            rot_noise_std: Vector3::zeros(),
        }
    }
}

/// Formation geometry and first-order go-to-point dynamics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FormationConfig {
    /// Desired slant distance to the person estimate (m).
    pub d_per: f64,
    /// Flight altitude above ground (m).
    pub h_mav: f64,
    /// Minimum horizontal standoff radius (m).
    pub min_radius: f64,
    /// Per-agent bearing from the person estimate (rad, east = 0).
    pub azimuth_offsets: Vec<f64>,
    /// Speed limit (m/s).
    pub max_speed: f64,
    /// Proportional gain toward the target point (1/s).
    pub gain: f64,
}

impl Default for FormationConfig {
    fn default() -> Self {
        FormationConfig {
            d_per: 8.0,
            h_mav: 8.0,
            min_radius: 2.0,
            azimuth_offsets: vec![0.0, std::f64::consts::FRAC_PI_2],
            max_speed: 5.0,
            gain: 1.0,
        }
    }
}

impl FormationConfig {
    /// Hover point for an agent at `azimuth`: on the circle of horizontal
    /// radius r around the person estimate at altitude `h_mav`, where r
    /// makes the slant distance equal `d_per` (or `min_radius` when the
    /// altitude difference alone exceeds `d_per`).
    pub fn target(&self, person_estimate: &Vector3<f64>, azimuth: f64) -> Vector3<f64> {
        let dz = self.h_mav - person_estimate.z;
        let r = (self.d_per * self.d_per - dz * dz)
            .max(self.min_radius * self.min_radius)
            .sqrt();
        Vector3::new(
            person_estimate.x + r * azimuth.cos(),
            person_estimate.y + r * azimuth.sin(),
            self.h_mav,
        )
    }
}

/// Advance one MAV by `dt` toward its formation slot: first-order motion
/// `v = clamp(gain * (target - position), max_speed)`, body level, yaw
/// facing the person estimate exactly.
pub fn formation_step(
    truth: &MavTruth,
    person_estimate: &Vector3<f64>,
    azimuth: f64,
    cfg: &FormationConfig,
    dt: f64,
) -> MavTruth {
    let target = cfg.target(person_estimate, azimuth);
    let mut velocity = cfg.gain * (target - truth.true_pose.position);
    let speed = velocity.norm();
    if speed > cfg.max_speed {
        velocity *= cfg.max_speed / speed;
    }
    let position = truth.true_pose.position + velocity * dt;
    let yaw = (person_estimate.y - position.y).atan2(person_estimate.x - position.x);
    MavTruth {
        true_pose: Pose6D {
            position,
            orientation: UnitQuaternion::from_euler_angles(0.0, 0.0, yaw),
            covariance: nalgebra::Matrix6::zeros(),
        },
        ..truth.clone()
    }
}

/// The pose the MAV believes it has: truth plus bias plus per-axis
/// Gaussian noise. The reported covariance carries only the noise
/// variances -- the bias is invisible to the agent.
///
/// Draw order is fixed (three position normals, then three orientation
/// normals) so runs replay exactly.
pub fn observe_self_pose(truth: &MavTruth, rng: &mut impl Rng) -> Pose6D {
    let mut pos_noise = Vector3::zeros();
    for i in 0..3 {
        let n: f64 = rng.sample(StandardNormal);
        pos_noise[i] = truth.pos_noise_std[i] * n;
    }
    let mut rot_noise = Vector3::zeros();
    for i in 0..3 {
        let n: f64 = rng.sample(StandardNormal);
        rot_noise[i] = truth.rot_noise_std[i] * n;
    }
    let mut covariance = nalgebra::Matrix6::zeros();
    for i in 0..3 {
        covariance[(i, i)] = truth.pos_noise_std[i] * truth.pos_noise_std[i];
        covariance[(i + 3, i + 3)] = truth.rot_noise_std[i] * truth.rot_noise_std[i];
    }
    Pose6D {
        position: truth.true_pose.position + truth.localization_bias + pos_noise,
        orientation: truth.true_pose.orientation * UnitQuaternion::from_scaled_axis(rot_noise),
        covariance,
    }
}

/// Constant-plus-sinusoid localization bias over time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiasSchedule {
    pub constant: Vector3<f64>,
    pub amplitude: Vector3<f64>,
    /// Sinusoid period (s); slow drift only, keep >= 60 s.
    pub period: f64,
}

impl Default for BiasSchedule {
    fn default() -> Self {
        BiasSchedule {
            constant: Vector3::zeros(),
            amplitude: Vector3::zeros(),
            period: 120.0,
        }
    }
}

impl BiasSchedule {
    pub fn bias_at(&self, t: f64) -> Vector3<f64> {
        let phase = (2.0 * std::f64::consts::PI * t / self.period).sin();
        self.constant + self.amplitude * phase
    }
}

/// One scheduler event.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SimEventKind {
    /// World/controller integration step.
    StateTick,
    /// Camera frame for one agent.
    Frame(AgentId),
    /// Self-pose keepalive broadcast for one agent.
    Keepalive(AgentId),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimEvent {
    pub tick: u64,
    pub time: f64,
    pub kind: SimEventKind,
}

/// Deterministic merged event stream over `duration` seconds: state ticks
/// at 100 Hz, frames at 40 Hz and keepalives at 10 Hz per agent. Ties on
/// the same microtick are ordered state < frame < keepalive, then by agent
/// id.
pub fn tick_schedule(duration: f64, n_agents: u32) -> Vec<SimEvent> {
    assert!(duration > 0.0, "duration must be positive");
    let total = (duration / BASE_TICK).round() as u64;
    let mut events = Vec::new();
    for tick in 0..total {
        let time = tick as f64 * BASE_TICK;
        if tick % STATE_EVERY == 0 {
            events.push(SimEvent {
                tick,
                time,
                kind: SimEventKind::StateTick,
            });
        }
        if tick % FRAME_EVERY == 0 {
            for a in 0..n_agents {
                events.push(SimEvent {
                    tick,
                    time,
                    kind: SimEventKind::Frame(AgentId(a)),
                });
            }
        }
        if tick % KEEPALIVE_EVERY == 0 {
            for a in 0..n_agents {
                events.push(SimEvent {
                    tick,
                    time,
                    kind: SimEventKind::Keepalive(AgentId(a)),
                });
            }
        }
    }
    events
}

/// Ground-truth person bounding box as seen by `camera` at the true
/// camera pose, or `None` when the person is not in view. The box spans
/// the projected head and feet vertically and the projected body width
/// horizontally at the centroid depth.
pub fn true_person_bbox(
    camera: &CameraModel,
    cam_world_pose: &Isometry3<f64>,
    person_center: &Vector3<f64>,
    true_height: f64,
    body_width: f64,
) -> Option<BBox> {
    let half_h = Vector3::new(0.0, 0.0, 0.5 * true_height);
    let head = project_point(camera, cam_world_pose, &(person_center + half_h)).ok()?;
    let feet = project_point(camera, cam_world_pose, &(person_center - half_h)).ok()?;
    let center = project_point(camera, cam_world_pose, person_center).ok()?;
    let p_cam = cam_world_pose.inverse_transform_point(&nalgebra::Point3::from(*person_center));
    let half_w_px = camera.fx * (0.5 * body_width) / p_cam.z;
    let bbox = BBox {
        top: head.v.min(feet.v),
        bottom: head.v.max(feet.v),
        left: center.u - half_w_px,
        right: center.u + half_w_px,
    };
    // Outside the field of view entirely -> no box on this frame.
    if bbox.right <= 0.0
        || bbox.left >= camera.width
        || bbox.bottom <= 0.0
        || bbox.top >= camera.height
    {
        return None;
    }
    Some(bbox)
}
