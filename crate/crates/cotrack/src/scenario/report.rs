//! Metrics reports and the ablation suite.
//!
//! A [`MetricsReport`] condenses one run into the numbers the study cares
//! about: path-referenced MSE, detection rates, NEES consistency and
//! message statistics. [`run_ablation_suite`] produces the standard five
//! reports (full system, no bias correction, no active ROI, each agent
//! solo) over identical ground truth so the columns compare directly.

use crate::metrics::{
    detection_rate, fit_reference_square, mse_stationary, nees, MetricsError, RunLog,
};
use crate::netbus::NetBusStats;
use crate::scenario::config::{ScenarioConfig, Seeds, TrajectoryConfig};
use crate::scenario::run::{run_scenario, RunOutput, ScenarioError};
use crate::AgentId;
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::Path;

/// One column of the ablation study.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    /// Everything enabled.
    Online,
    /// Self-pose bias correction disabled.
    NoBiasCorrection,
    /// Active ROI selection disabled (full-frame detection).
    NoActiveRoi,
    /// No cooperation; evaluated on this agent's estimates only.
    Solo(u32),
}

impl Variant {
    /// The standard suite, in report order.
    pub fn suite(n_agents: u32) -> Vec<Variant> {
        let mut variants = vec![
            Variant::Online,
            Variant::NoBiasCorrection,
            Variant::NoActiveRoi,
        ];
        for a in 0..n_agents {
            variants.push(Variant::Solo(a));
        }
        variants
    }

    pub fn name(&self) -> String {
        match self {
            Variant::Online => "online".into(),
            Variant::NoBiasCorrection => "no-spbc".into(),
            Variant::NoActiveRoi => "no-as-roi".into(),
            Variant::Solo(a) => format!("mav{}-only", a + 1),
        }
    }

    pub fn parse(name: &str) -> Option<Variant> {
        match name {
            "online" => Some(Variant::Online),
            "no-spbc" => Some(Variant::NoBiasCorrection),
            "no-as-roi" => Some(Variant::NoActiveRoi),
            _ => {
                let idx: u32 = name.strip_prefix("mav")?.strip_suffix("-only")?.parse().ok()?;
                (idx >= 1).then(|| Variant::Solo(idx - 1))
            }
        }
    }

    /// The configuration this variant runs (same world, flipped switches).
    pub fn apply(&self, base: &ScenarioConfig) -> ScenarioConfig {
        let mut cfg = base.clone();
        match self {
            Variant::Online => {}
            Variant::NoBiasCorrection => cfg.ablation.bias_correction = false,
            Variant::NoActiveRoi => cfg.ablation.active_roi = false,
            Variant::Solo(_) => cfg.ablation.cooperative = false,
        }
        cfg
    }

    /// The agent whose estimates are evaluated (`None` pools all agents).
    pub fn focus_agent(&self) -> Option<AgentId> {
        match self {
            Variant::Solo(a) => Some(AgentId(*a)),
            _ => None,
        }
    }
}

/// Injected localization bias of one agent, echoed into the report so
/// downstream tooling knows the disturbance was synthetic.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InjectedBias {
    pub agent: u32,
    pub constant: [f64; 3],
    pub amplitude: [f64; 3],
    pub period: f64,
    pub synthetic: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AgentRate {
    pub agent: u32,
    /// Detections per attempt, in percent.
    pub rate_percent: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MessageStats {
    pub sent: u64,
    pub delivered: u64,
    pub dropped: u64,
}

impl From<NetBusStats> for MessageStats {
    fn from(s: NetBusStats) -> MessageStats {
        MessageStats {
            sent: s.sent,
            delivered: s.delivered,
            dropped: s.dropped,
        }
    }
}

/// Summary metrics of one run, as written to `report-<variant>.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub variant: String,
    /// SHA-256 of the effective configuration (after variant switches).
    pub config_digest: String,
    pub seeds: Seeds,
    pub duration: f64,
    pub trajectory_kind: String,
    /// What the MSE is measured against: `mean-point` for a stationary
    /// person, `fitted-square` for the square walk, `ground-truth`
    /// otherwise.
    pub reference: String,
    /// Center of the fitted square, when that reference is used.
    pub square_center: Option<[f64; 3]>,
    pub mse_2d: f64,
    pub mse_3d: f64,
    /// MSE against the true person position (uses truth the estimator
    /// never sees; diagnostic only).
    pub truth_mse_3d: f64,
    pub detection_rates: Vec<AgentRate>,
    pub nees_mean: f64,
    pub nees_samples: usize,
    pub nees_skipped: usize,
    pub messages: Option<MessageStats>,
    pub injected_bias: Vec<InjectedBias>,
    /// True sampled person height, when known (absent when metrics are
    /// recomputed from a bare log).
    pub true_height: Option<f64>,
}

fn focus_log(log: &RunLog, focus: Option<AgentId>) -> RunLog {
    match focus {
        None => log.clone(),
        Some(agent) => RunLog {
            records: log
                .records
                .iter()
                .filter(|r| r.agent == agent)
                .cloned()
                .collect(),
        },
    }
}

fn agents_in(log: &RunLog) -> Vec<AgentId> {
    let mut ids: Vec<AgentId> = log.records.iter().map(|r| r.agent).collect();
    ids.sort();
    ids.dedup();
    ids
}

/// Compute the report for one finished run. `net`/`true_height` may be
/// absent when evaluating a log loaded from disk.
pub fn evaluate_log(
    cfg: &ScenarioConfig,
    variant: Variant,
    log: &RunLog,
    net: Option<NetBusStats>,
    true_height: Option<f64>,
) -> Result<MetricsReport, MetricsError> {
    let focused = focus_log(log, variant.focus_agent());
    if focused.records.is_empty() {
        return Err(MetricsError::EmptyInput);
    }
    let estimates: Vec<_> = focused.records.iter().map(|r| r.est_position).collect();

    let (reference, square_center, mse_2d, mse_3d) = match &cfg.trajectory {
        TrajectoryConfig::Stationary { .. } => {
            let (m2, m3) = mse_stationary(&estimates)?;
            ("mean-point".to_string(), None, m2, m3)
        }
        TrajectoryConfig::SquareWalk { edge, .. } => {
            let (square, m2, m3) = fit_reference_square(&estimates, *edge)?;
            (
                "fitted-square".to_string(),
                Some([square.center.x, square.center.y, square.center.z]),
                m2,
                m3,
            )
        }
        TrajectoryConfig::Waypoints { .. } | TrajectoryConfig::Drift { .. } => {
            // No landmark-free reference for a free path; score against
            // truth.
            let n = focused.records.len() as f64;
            let mut m2 = 0.0;
            let mut m3 = 0.0;
            for r in &focused.records {
                let e = r.est_position - r.person_true;
                m2 += e.x * e.x + e.y * e.y;
                m3 += e.norm_squared();
            }
            ("ground-truth".to_string(), None, m2 / n, m3 / n)
        }
    };

    let truth_mse_3d = focused
        .records
        .iter()
        .map(|r| (r.est_position - r.person_true).norm_squared())
        .sum::<f64>()
        / focused.records.len() as f64;

    let detection_rates = agents_in(log)
        .into_iter()
        .map(|agent| {
            Ok(AgentRate {
                agent: agent.0,
                rate_percent: detection_rate(log, agent)?,
            })
        })
        .collect::<Result<Vec<_>, MetricsError>>()?;

    let nees_summary = nees(&focused)?;

    let injected_bias = cfg
        .localization
        .bias
        .iter()
        .enumerate()
        .filter(|(_, b)| !b.is_zero())
        .map(|(i, b)| InjectedBias {
            agent: i as u32,
            constant: b.constant,
            amplitude: b.amplitude,
            period: b.period,
            synthetic: true,
        })
        .collect();

    Ok(MetricsReport {
        variant: variant.name(),
        config_digest: cfg.digest(),
        seeds: cfg.seeds,
        duration: cfg.duration,
        trajectory_kind: cfg.trajectory.kind().to_string(),
        reference,
        square_center,
        mse_2d,
        mse_3d,
        truth_mse_3d,
        detection_rates,
        nees_mean: nees_summary.mean,
        nees_samples: nees_summary.samples,
        nees_skipped: nees_summary.skipped,
        messages: net.map(MessageStats::from),
        injected_bias,
        true_height,
    })
}

/// Run one variant of a base scenario and evaluate it.
pub fn run_variant(
    base: &ScenarioConfig,
    variant: Variant,
) -> Result<(ScenarioConfig, RunOutput, MetricsReport), ScenarioError> {
    let cfg = variant.apply(base);
    let out = run_scenario(&cfg)?;
    let report = evaluate_log(
        &cfg,
        variant,
        &out.log,
        Some(out.net_stats),
        Some(out.true_height),
    )?;
    Ok((cfg, out, report))
}

/// The full ablation suite over shared ground truth: online, no-spbc,
/// no-as-roi, then each agent solo. Seeds are taken from `base`, so every
/// variant sees the same person and the same noise streams.
pub fn run_ablation_suite(base: &ScenarioConfig) -> Result<Vec<MetricsReport>, ScenarioError> {
    Variant::suite(base.n_agents)
        .into_iter()
        .map(|v| run_variant(base, v).map(|(_, _, report)| report))
        .collect()
}

/// Write `bytes` to `path` atomically (temp file in the same directory,
/// then rename), so partially written outputs never appear.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty());
    let mut tmp = match dir {
        Some(d) => tempfile::NamedTempFile::new_in(d)?,
        None => tempfile::NamedTempFile::new_in(".")?,
    };
    tmp.write_all(bytes)?;
    tmp.flush()?;
    tmp.persist(path).map_err(|e| e.error)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn short_base() -> ScenarioConfig {
        let mut cfg = ScenarioConfig::default();
        cfg.duration = 8.0;
        cfg
    }

    #[test]
    fn suite_produces_the_five_standard_reports() {
        let reports = run_ablation_suite(&short_base()).unwrap();
        let names: Vec<&str> = reports.iter().map(|r| r.variant.as_str()).collect();
        assert_eq!(
            names,
            ["online", "no-spbc", "no-as-roi", "mav1-only", "mav2-only"]
        );
    }

    #[test]
    fn variants_share_identical_ground_truth() {
        let base = short_base();
        let (_, online, _) = run_variant(&base, Variant::Online).unwrap();
        let (_, no_roi, _) = run_variant(&base, Variant::NoActiveRoi).unwrap();
        assert_eq!(online.true_height, no_roi.true_height);
        for (a, b) in online.log.records.iter().zip(&no_roi.log.records) {
            assert_eq!(a.time, b.time);
            assert_eq!(a.agent, b.agent);
            assert_eq!(a.person_true, b.person_true);
        }
    }

    #[test]
    fn solo_variants_come_from_the_same_uncooperative_world() {
        let base = short_base();
        let (_, run1, r1) = run_variant(&base, Variant::Solo(0)).unwrap();
        let (_, run2, r2) = run_variant(&base, Variant::Solo(1)).unwrap();
        // Determinism makes the two solo runs literally the same world.
        assert_eq!(run1.true_height, run2.true_height);
        assert_eq!(r1.config_digest, r2.config_digest);
        assert_ne!(r1.variant, r2.variant);
        // But the evaluation focuses on different agents.
        assert_ne!(r1.mse_3d, r2.mse_3d);
    }

    #[test]
    fn variant_names_roundtrip() {
        for v in Variant::suite(3) {
            assert_eq!(Variant::parse(&v.name()), Some(v));
        }
        assert_eq!(Variant::parse("mav0-only"), None);
        assert_eq!(Variant::parse("offline"), None);
    }

    #[test]
    fn report_labels_injected_bias_as_synthetic() {
        let (_, _, report) = run_variant(&short_base(), Variant::Online).unwrap();
        assert_eq!(report.injected_bias.len(), 1);
        let b = &report.injected_bias[0];
        assert_eq!(b.agent, 1);
        assert!(b.synthetic);
        assert_eq!(b.constant, [0.5, -0.3, 0.2]);
    }

    #[test]
    fn digest_differs_between_variants_and_matches_config() {
        let base = short_base();
        let (cfg, _, report) = run_variant(&base, Variant::NoActiveRoi).unwrap();
        assert_eq!(report.config_digest, cfg.digest());
        assert_ne!(report.config_digest, base.digest());
    }

    #[test]
    fn report_json_roundtrips() {
        let (_, _, report) = run_variant(&short_base(), Variant::Online).unwrap();
        let text = serde_json::to_string_pretty(&report).unwrap();
        let back: MetricsReport = serde_json::from_str(&text).unwrap();
        assert_eq!(back, report);
    }

    #[test]
    fn write_atomic_replaces_content() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("out.json");
        write_atomic(&path, b"first").unwrap();
        write_atomic(&path, b"second").unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), b"second");
    }
}
