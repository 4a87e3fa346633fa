//! The closed simulation loop.
//!
//! [`run_scenario`] wires world truth, detector simulation, tracking
//! pipelines and the message bus together over the deterministic event
//! schedule: 100 Hz MAV motion, 40 Hz camera frames, 10 Hz pose
//! keepalives. Three seeded streams (world, per-agent detector, network)
//! make runs replay bit for bit.

use crate::metrics::{RunLog, RunRecord};
use crate::netbus::{NetBus, NetBusStats};
use crate::scenario::config::{ConfigError, ScenarioConfig};
use crate::tracker::{
    DetectionMeasurement, MessagePayload, TrackState, TrackerError, TrackerParams,
    TrackerPipeline,
};
use crate::world::{
    formation_step, observe_self_pose, person_position, person_velocity, tick_schedule,
    true_person_bbox, BiasSchedule, MavTruth, SimEventKind, BASE_TICK, FRAME_EVERY, STATE_EVERY,
};
use crate::AgentId;
use crate::detector::{DetectorClock, SimFrame};
use nalgebra::{Matrix6, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use std::io::Write;
use thiserror::Error;

/// Shoulder width of the simulated person (m), used for the true box.
const BODY_WIDTH: f64 = 0.5;
/// Floor for the sampled person height, guarding absurd tail draws.
const MIN_TRUE_HEIGHT: f64 = 0.5;

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("tracker failed: {0}")]
    Tracker(#[from] TrackerError),
    #[error("metrics failed: {0}")]
    Metrics(#[from] crate::metrics::MetricsError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// Everything a finished run produces.
#[derive(Debug)]
pub struct RunOutput {
    pub log: RunLog,
    pub net_stats: NetBusStats,
    /// The person height sampled for this run (the trackers only know the
    /// prior).
    pub true_height: f64,
}

/// SplitMix64 step; decorrelates seeds derived from one master seed.
pub fn derive_seed(seed: u64, salt: u64) -> u64 {
    let mut z = seed ^ salt.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Run one scenario to completion.
pub fn run_scenario(cfg: &ScenarioConfig) -> Result<RunOutput, ScenarioError> {
    run_scenario_with_trace(cfg, None)
}

/// Run one scenario, optionally streaming the network trace as JSON lines.
pub fn run_scenario_with_trace(
    cfg: &ScenarioConfig,
    trace: Option<Box<dyn Write + Send>>,
) -> Result<RunOutput, ScenarioError> {
    cfg.validate()?;
    let n = cfg.n_agents as usize;
    let camera = cfg.build_camera();
    let frame_interval = FRAME_EVERY as f64 * BASE_TICK;
    let state_dt = STATE_EVERY as f64 * BASE_TICK;

    let mut world_rng = ChaCha8Rng::seed_from_u64(cfg.seeds.world);
    let mut net_rng = ChaCha8Rng::seed_from_u64(cfg.seeds.net);
    let mut det_rngs: Vec<ChaCha8Rng> = (0..n)
        .map(|i| ChaCha8Rng::seed_from_u64(derive_seed(cfg.seeds.detector, i as u64)))
        .collect();

    // Ground truth person: height sampled once from the shared prior, the
    // 2D path lifted to centroid height.
    let draw: f64 = world_rng.sample(StandardNormal);
    let true_height = (cfg.height.mean + cfg.height.std * draw).max(MIN_TRUE_HEIGHT);
    let trajectory = cfg
        .trajectory
        .build(0.5 * true_height, cfg.duration, &mut world_rng);
    let person0 = person_position(&trajectory, 0.0);
    let vel0 = person_velocity(&trajectory, 0.0);

    let bias_schedules: Vec<BiasSchedule> =
        (0..n).map(|i| cfg.localization.bias_for(i)).collect();
    let azimuths: Vec<f64> = cfg.formation.azimuth_offsets[..n].to_vec();

    // MAVs start on their formation slots, camera on the person.
    let mut mavs: Vec<MavTruth> = (0..n)
        .map(|i| {
            let slot = cfg.formation.target(&person0, azimuths[i]);
            let yaw = (person0.y - slot.y).atan2(person0.x - slot.x);
            let mut mav = MavTruth::level_at(slot, yaw);
            mav.pos_noise_std = Vector3::from(cfg.localization.pos_noise_std);
            mav.rot_noise_std = Vector3::from(cfg.localization.rot_noise_std);
            mav.localization_bias = bias_schedules[i].bias_at(0.0);
            mav
        })
        .collect();

    let params = TrackerParams {
        motion: cfg.motion,
        fusion: cfg.fusion,
        roi: cfg.roi,
        roi_lead_time: cfg.detector.processing_period,
        confidence_threshold: cfg.tracker.confidence_threshold,
        bias_gain: cfg.tracker.bias_gain,
        active_roi: cfg.ablation.active_roi,
        bias_correction: cfg.ablation.bias_correction,
        cooperative: cfg.ablation.cooperative,
    };

    // Initial track estimates: truth perturbed per the configured stds,
    // covariance set to match.
    let mut pipelines: Vec<TrackerPipeline> = (0..n)
        .map(|i| {
            let mut position = person0;
            let mut velocity = vel0;
            for k in 0..3 {
                let d: f64 = world_rng.sample(StandardNormal);
                position[k] += cfg.tracker.init_pos_std * d;
            }
            for k in 0..3 {
                let d: f64 = world_rng.sample(StandardNormal);
                velocity[k] += cfg.tracker.init_vel_std * d;
            }
            let mut covariance = Matrix6::zeros();
            for k in 0..3 {
                covariance[(k, k)] = cfg.tracker.init_pos_std * cfg.tracker.init_pos_std;
                covariance[(k + 3, k + 3)] = cfg.tracker.init_vel_std * cfg.tracker.init_vel_std;
            }
            let mut agent_params = params;
            if cfg.tracker.spbc_reference == Some(i as u32) {
                // The declared reference trusts its own poses: its bias
                // estimate stays zero and anchors the others.
                agent_params.bias_correction = false;
            }
            TrackerPipeline::new(
                AgentId(i as u32),
                camera.clone(),
                cfg.height,
                cfg.detector.noise,
                agent_params,
                TrackState {
                    position,
                    velocity,
                    covariance,
                    timestamp: 0.0,
                },
                DetectorClock::new(cfg.detector.processing_period, frame_interval),
            )
        })
        .collect();

    let mut bus = NetBus::new(n, cfg.link);
    if let Some(writer) = trace {
        bus.set_trace(writer);
    }

    let mut log = RunLog::default();
    for event in tick_schedule(cfg.duration, cfg.n_agents) {
        let t = event.time;
        match event.kind {
            SimEventKind::StateTick => {
                for i in 0..n {
                    let estimate = pipelines[i].track.position;
                    mavs[i] = formation_step(&mavs[i], &estimate, azimuths[i], &cfg.formation, state_dt);
                }
            }
            SimEventKind::Frame(agent) => {
                let i = agent.index();
                mavs[i].localization_bias = bias_schedules[i].bias_at(t);
                let reported = observe_self_pose(&mavs[i], &mut world_rng);
                let person = person_position(&trajectory, t);
                let cam_pose = mavs[i].true_pose.isometry() * camera.body_from_cam();
                let frame = SimFrame {
                    timestamp: t,
                    agent,
                    person_bbox: true_person_bbox(&camera, &cam_pose, &person, true_height, BODY_WIDTH),
                };
                let inbox: Vec<DetectionMeasurement> = bus
                    .deliver_due(agent, t)
                    .into_iter()
                    .filter_map(|m| match m.payload {
                        MessagePayload::Measurement(d) => Some(d),
                        MessagePayload::SelfPose(_) => None,
                    })
                    .collect();
                let out = pipelines[i].step(&frame, &reported, &inbox, &mut det_rngs[i])?;
                for payload in out.outbound {
                    bus.send(agent, t, payload, &mut net_rng);
                }
                log.records.push(RunRecord {
                    time: t,
                    agent,
                    person_true: person,
                    est_position: pipelines[i].track.position,
                    est_velocity: pipelines[i].track.velocity,
                    est_covariance: pipelines[i].track.covariance,
                    attempted: out.attempted,
                    detected: out.detected,
                    measurement: out.own_measurement.map(|m| m.mean),
                    roi: out.roi_used,
                    self_true: mavs[i].true_pose.position,
                    self_reported: reported.position,
                    bias_true: mavs[i].localization_bias,
                    bias_estimate: pipelines[i].bias.bias,
                    rejected: out.rejected as u32,
                });
            }
            SimEventKind::Keepalive(agent) => {
                let i = agent.index();
                mavs[i].localization_bias = bias_schedules[i].bias_at(t);
                let reported = observe_self_pose(&mavs[i], &mut world_rng);
                bus.send(agent, t, MessagePayload::SelfPose(reported), &mut net_rng);
            }
        }
    }

    Ok(RunOutput {
        log,
        net_stats: bus.stats(),
        true_height,
    })
}
