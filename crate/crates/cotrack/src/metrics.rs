//! Post-hoc evaluation over run logs: MSE against reference geometry,
//! detection rates, filter consistency (NEES), and detector noise
//! characterization.
//!
//! A [`RunLog`] is one comma-separated record per (frame tick, agent) with
//! floats at 9 significant digits, so identical runs produce byte-identical
//! files and logs diff cleanly.

use crate::geometry::{BBox, Roi, SideVariances};
use crate::AgentId;
use nalgebra::{Matrix3, Matrix6, Vector3};
use std::io::{BufRead, Write};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("empty input")]
    EmptyInput,
    #[error("need at least {need} samples, got {got}")]
    InsufficientSamples { got: usize, need: usize },
    #[error("degenerate input: all points identical")]
    DegenerateInput,
    #[error("no detection attempts in log")]
    NoAttempts,
    #[error("malformed log at line {line}: {reason}")]
    MalformedLog { line: usize, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// One log record: the state of one agent's tracker at one frame tick.
#[derive(Debug, Clone, PartialEq)]
pub struct RunRecord {
    pub time: f64,
    pub agent: AgentId,
    pub person_true: Vector3<f64>,
    pub est_position: Vector3<f64>,
    pub est_velocity: Vector3<f64>,
    pub est_covariance: Matrix6<f64>,
    pub attempted: bool,
    pub detected: bool,
    /// Own world-frame measurement, when the detector produced one.
    pub measurement: Option<Vector3<f64>>,
    /// ROI the detector ran on (or would have run on).
    pub roi: Roi,
    pub self_true: Vector3<f64>,
    pub self_reported: Vector3<f64>,
    pub bias_true: Vector3<f64>,
    pub bias_estimate: Vector3<f64>,
    /// Measurements rejected by gating/staleness at this tick.
    pub rejected: u32,
}

/// Complete log of one scenario run.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunLog {
    pub records: Vec<RunRecord>,
}

const COLUMNS: usize = 54;

fn header() -> String {
    let mut cols: Vec<String> = vec!["time".into(), "agent".into()];
    for name in ["person", "est"] {
        for ax in ["x", "y", "z"] {
            cols.push(format!("{name}_{ax}"));
        }
    }
    for ax in ["vx", "vy", "vz"] {
        cols.push(format!("est_{ax}"));
    }
    for r in 0..6 {
        for c in r..6 {
            cols.push(format!("p{r}{c}"));
        }
    }
    cols.push("attempted".into());
    cols.push("detected".into());
    for ax in ["x", "y", "z"] {
        cols.push(format!("meas_{ax}"));
    }
    for side in ["left", "top", "right", "bottom"] {
        cols.push(format!("roi_{side}"));
    }
    for name in ["self_true", "self_rep", "bias_true", "bias_est"] {
        for ax in ["x", "y", "z"] {
            cols.push(format!("{name}_{ax}"));
        }
    }
    cols.push("rejected".into());
    debug_assert_eq!(cols.len(), COLUMNS);
    cols.join(",")
}

/// 9 significant digits: enough to make logs stable and diff-able without
/// dumping full binary precision.
fn fmt_f64(x: f64) -> String {
    format!("{x:.8e}")
}

impl RunLog {
    pub fn write_csv(&self, w: &mut impl Write) -> std::io::Result<()> {
        writeln!(w, "{}", header())?;
        for r in &self.records {
            let mut fields: Vec<String> = Vec::with_capacity(COLUMNS);
            fields.push(fmt_f64(r.time));
            fields.push(r.agent.0.to_string());
            for v in [&r.person_true, &r.est_position, &r.est_velocity] {
                for i in 0..3 {
                    fields.push(fmt_f64(v[i]));
                }
            }
            for row in 0..6 {
                for col in row..6 {
                    fields.push(fmt_f64(r.est_covariance[(row, col)]));
                }
            }
            fields.push((r.attempted as u8).to_string());
            fields.push((r.detected as u8).to_string());
            match &r.measurement {
                Some(m) => {
                    for i in 0..3 {
                        fields.push(fmt_f64(m[i]));
                    }
                }
                None => {
                    for _ in 0..3 {
                        fields.push(String::new());
                    }
                }
            }
            for v in [r.roi.left, r.roi.top, r.roi.right, r.roi.bottom] {
                fields.push(fmt_f64(v));
            }
            for v in [&r.self_true, &r.self_reported, &r.bias_true, &r.bias_estimate] {
                for i in 0..3 {
                    fields.push(fmt_f64(v[i]));
                }
            }
            fields.push(r.rejected.to_string());
            writeln!(w, "{}", fields.join(","))?;
        }
        Ok(())
    }

    pub fn read_csv(r: impl BufRead) -> Result<RunLog, MetricsError> {
        let mut records = Vec::new();
        for (idx, line) in r.lines().enumerate() {
            let line = line?;
            if idx == 0 {
                if line != header() {
                    return Err(MetricsError::MalformedLog {
                        line: 1,
                        reason: "unexpected header".into(),
                    });
                }
                continue;
            }
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != COLUMNS {
                return Err(MetricsError::MalformedLog {
                    line: idx + 1,
                    reason: format!("expected {COLUMNS} fields, got {}", fields.len()),
                });
            }
            let bad = |reason: &str| MetricsError::MalformedLog {
                line: idx + 1,
                reason: reason.into(),
            };
            let mut it = fields.into_iter();
            let next_f64 = |it: &mut std::vec::IntoIter<&str>| -> Result<f64, MetricsError> {
                it.next()
                    .ok_or_else(|| bad("missing field"))?
                    .parse::<f64>()
                    .map_err(|e| bad(&format!("bad float: {e}")))
            };
            let next_v3 = |it: &mut std::vec::IntoIter<&str>| -> Result<Vector3<f64>, MetricsError> {
                Ok(Vector3::new(next_f64(it)?, next_f64(it)?, next_f64(it)?))
            };
            let time = next_f64(&mut it)?;
            let agent = AgentId(
                it.next()
                    .ok_or_else(|| bad("missing agent"))?
                    .parse::<u32>()
                    .map_err(|e| bad(&format!("bad agent: {e}")))?,
            );
            let person_true = next_v3(&mut it)?;
            let est_position = next_v3(&mut it)?;
            let est_velocity = next_v3(&mut it)?;
            let mut est_covariance = Matrix6::<f64>::zeros();
            for row in 0..6 {
                for col in row..6 {
                    let v = next_f64(&mut it)?;
                    est_covariance[(row, col)] = v;
                    est_covariance[(col, row)] = v;
                }
            }
            let attempted = next_f64(&mut it)? != 0.0;
            let detected = next_f64(&mut it)? != 0.0;
            let meas_fields: Vec<&str> =
                [it.next(), it.next(), it.next()].map(|f| f.unwrap_or("")).to_vec();
            let measurement = if meas_fields.iter().all(|f| f.is_empty()) {
                None
            } else {
                let mut m = Vector3::zeros();
                for (i, f) in meas_fields.iter().enumerate() {
                    m[i] = f.parse::<f64>().map_err(|e| bad(&format!("bad float: {e}")))?;
                }
                Some(m)
            };
            let roi = Roi {
                left: next_f64(&mut it)?,
                top: next_f64(&mut it)?,
                right: next_f64(&mut it)?,
                bottom: next_f64(&mut it)?,
            };
            let self_true = next_v3(&mut it)?;
            let self_reported = next_v3(&mut it)?;
            let bias_true = next_v3(&mut it)?;
            let bias_estimate = next_v3(&mut it)?;
            let rejected = it
                .next()
                .ok_or_else(|| bad("missing rejected"))?
                .parse::<u32>()
                .map_err(|e| bad(&format!("bad rejected: {e}")))?;
            records.push(RunRecord {
                time,
                agent,
                person_true,
                est_position,
                est_velocity,
                est_covariance,
                attempted,
                detected,
                measurement,
                roi,
                self_true,
                self_reported,
                bias_true,
                bias_estimate,
                rejected,
            });
        }
        Ok(RunLog { records })
    }
}

/// MSE of a stationary-person run, the protocol way: the reference point is
/// the mean of the estimates themselves, and the error is the distance to
/// it (full 3D and ground-plane 2D).
pub fn mse_stationary(estimates: &[Vector3<f64>]) -> Result<(f64, f64), MetricsError> {
    if estimates.len() < 2 {
        return Err(MetricsError::EmptyInput);
    }
    let n = estimates.len() as f64;
    let mean: Vector3<f64> = estimates.iter().sum::<Vector3<f64>>() / n;
    let mut mse2d = 0.0;
    let mut mse3d = 0.0;
    for e in estimates {
        let d = e - mean;
        mse3d += d.norm_squared();
        mse2d += d.x * d.x + d.y * d.y;
    }
    Ok((mse2d / n, mse3d / n))
}

/// The reference square of the moving-person protocol: horizontal,
/// north-aligned, fixed edge; only the center is fitted.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReferenceSquare {
    pub center: Vector3<f64>,
    pub edge: f64,
}

impl ReferenceSquare {
    /// Horizontal distance from `p` to the square's outline (ignoring z).
    pub fn horizontal_distance(&self, p: &Vector3<f64>) -> f64 {
        let half = 0.5 * self.edge;
        let ax = (p.x - self.center.x).abs();
        let ay = (p.y - self.center.y).abs();
        if ax <= half && ay <= half {
            half - ax.max(ay)
        } else {
            let dx = (ax - half).max(0.0);
            let dy = (ay - half).max(0.0);
            (dx * dx + dy * dy).sqrt()
        }
    }

    /// 3D distance from `p` to the closest point of the outline.
    pub fn distance(&self, p: &Vector3<f64>) -> f64 {
        let dh = self.horizontal_distance(p);
        let dz = p.z - self.center.z;
        (dh * dh + dz * dz).sqrt()
    }
}

fn square_objective(estimates: &[Vector3<f64>], center: &Vector3<f64>, edge: f64) -> f64 {
    let square = ReferenceSquare {
        center: *center,
        edge,
    };
    estimates
        .iter()
        .map(|p| {
            let d = square.distance(p);
            d * d
        })
        .sum::<f64>()
        / estimates.len() as f64
}

/// Fit the reference square's center to the estimates by minimizing the
/// mean squared 3D distance to the outline, with a Nelder-Mead simplex
/// started at the centroid. Returns the square, the 2D MSE (horizontal
/// distances) and the 3D MSE.
pub fn fit_reference_square(
    estimates: &[Vector3<f64>],
    edge: f64,
) -> Result<(ReferenceSquare, f64, f64), MetricsError> {
    if estimates.len() < 8 {
        return Err(MetricsError::InsufficientSamples {
            got: estimates.len(),
            need: 8,
        });
    }
    let n = estimates.len() as f64;
    let centroid: Vector3<f64> = estimates.iter().sum::<Vector3<f64>>() / n;
    let spread = estimates
        .iter()
        .map(|p| (p - centroid).norm_squared())
        .sum::<f64>();
    if spread == 0.0 {
        return Err(MetricsError::DegenerateInput);
    }

    // Nelder-Mead over the center, standard coefficients, simplex seeded
    // half a meter around the centroid.
    let f = |c: &Vector3<f64>| square_objective(estimates, c, edge);
    let mut simplex: Vec<(Vector3<f64>, f64)> = Vec::with_capacity(4);
    simplex.push((centroid, f(&centroid)));
    for i in 0..3 {
        let mut v = centroid;
        v[i] += 0.5;
        simplex.push((v, f(&v)));
    }
    for _ in 0..500 {
        simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
        if simplex[3].1 - simplex[0].1 < 1e-9 {
            break;
        }
        let centroid3: Vector3<f64> =
            (simplex[0].0 + simplex[1].0 + simplex[2].0) / 3.0;
        let worst = simplex[3];
        let reflected = centroid3 + (centroid3 - worst.0);
        let fr = f(&reflected);
        if fr < simplex[0].1 {
            let expanded = centroid3 + 2.0 * (centroid3 - worst.0);
            let fe = f(&expanded);
            simplex[3] = if fe < fr { (expanded, fe) } else { (reflected, fr) };
        } else if fr < simplex[2].1 {
            simplex[3] = (reflected, fr);
        } else {
            let contracted = centroid3 + 0.5 * (worst.0 - centroid3);
            let fc = f(&contracted);
            if fc < worst.1 {
                simplex[3] = (contracted, fc);
            } else {
                // Shrink toward the best vertex.
                let best = simplex[0].0;
                for v in simplex.iter_mut().skip(1) {
                    v.0 = best + 0.5 * (v.0 - best);
                    v.1 = f(&v.0);
                }
            }
        }
    }
    simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
    let square = ReferenceSquare {
        center: simplex[0].0,
        edge,
    };
    let mse3d = simplex[0].1;
    let mse2d = estimates
        .iter()
        .map(|p| {
            let d = square.horizontal_distance(p);
            d * d
        })
        .sum::<f64>()
        / n;
    Ok((square, mse2d, mse3d))
}

/// Percentage of positive detections over attempted frames for one agent.
pub fn detection_rate(log: &RunLog, agent: AgentId) -> Result<f64, MetricsError> {
    let mut attempted = 0u64;
    let mut detected = 0u64;
    for r in &log.records {
        if r.agent == agent && r.attempted {
            attempted += 1;
            if r.detected {
                detected += 1;
            }
        }
    }
    if attempted == 0 {
        return Err(MetricsError::NoAttempts);
    }
    Ok(100.0 * detected as f64 / attempted as f64)
}

/// Normalized estimation error squared over a log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NeesSummary {
    /// Mean of e' S^-1 e over usable records (3 position dof).
    pub mean: f64,
    pub samples: usize,
    /// Records skipped because the position covariance was not invertible.
    pub skipped: usize,
}

/// Average position NEES of the fused estimate against ground truth.
/// Records with a singular position covariance are skipped and counted.
pub fn nees(log: &RunLog) -> Result<NeesSummary, MetricsError> {
    let mut sum = 0.0;
    let mut samples = 0usize;
    let mut skipped = 0usize;
    for r in &log.records {
        let p: Matrix3<f64> = r.est_covariance.fixed_view::<3, 3>(0, 0).into_owned();
        let e = r.est_position - r.person_true;
        match nalgebra::Cholesky::new(p) {
            Some(chol) => {
                sum += e.dot(&chol.solve(&e));
                samples += 1;
            }
            None => skipped += 1,
        }
    }
    if samples == 0 {
        return Err(MetricsError::EmptyInput);
    }
    Ok(NeesSummary {
        mean: sum / samples as f64,
        samples,
        skipped,
    })
}

/// One detector characterization sample: the true box, what the detector
/// returned, and the ROI dimensions the detection ran on.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseSample {
    pub true_bbox: BBox,
    pub detected_bbox: BBox,
    pub roi_width: f64,
    pub roi_height: f64,
}

/// Moments of one side's relative error distribution.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SideStats {
    pub mean: f64,
    pub variance: f64,
    pub skewness: f64,
    pub excess_kurtosis: f64,
}

/// Detector noise characterization: per-side relative-error moments plus
/// pairwise correlations (side order: top, bottom, left, right).
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseCharacterization {
    pub top: SideStats,
    pub bottom: SideStats,
    pub left: SideStats,
    pub right: SideStats,
    pub correlations: nalgebra::Matrix4<f64>,
    pub samples: usize,
}

impl NoiseCharacterization {
    /// The fitted constant-variance model, ready to configure a simulated
    /// detector.
    pub fn variances(&self) -> SideVariances {
        SideVariances {
            top: self.top.variance,
            bottom: self.bottom.variance,
            left: self.left.variance,
            right: self.right.variance,
        }
    }
}

fn side_stats(errors: &[f64]) -> SideStats {
    let n = errors.len() as f64;
    let mean = errors.iter().sum::<f64>() / n;
    let mut m2 = 0.0;
    let mut m3 = 0.0;
    let mut m4 = 0.0;
    for e in errors {
        let d = e - mean;
        m2 += d * d;
        m3 += d * d * d;
        m4 += d * d * d * d;
    }
    m2 /= n;
    m3 /= n;
    m4 /= n;
    let variance = m2 * n / (n - 1.0);
    let (skewness, excess_kurtosis) = if m2 > 0.0 {
        (m3 / m2.powf(1.5), m4 / (m2 * m2) - 3.0)
    } else {
        (0.0, 0.0)
    };
    SideStats {
        mean,
        variance,
        skewness,
        excess_kurtosis,
    }
}

/// Characterize detector noise from (true box, detected box) pairs: per
/// side, the error relative to the ROI dimension (height for top/bottom,
/// width for left/right), with Gaussianity diagnostics and pairwise
/// correlations.
pub fn characterize_noise(samples: &[NoiseSample]) -> Result<NoiseCharacterization, MetricsError> {
    const NEED: usize = 30;
    if samples.len() < NEED {
        return Err(MetricsError::InsufficientSamples {
            got: samples.len(),
            need: NEED,
        });
    }
    let mut errors: [Vec<f64>; 4] = [Vec::new(), Vec::new(), Vec::new(), Vec::new()];
    for s in samples {
        errors[0].push((s.detected_bbox.top - s.true_bbox.top) / s.roi_height);
        errors[1].push((s.detected_bbox.bottom - s.true_bbox.bottom) / s.roi_height);
        errors[2].push((s.detected_bbox.left - s.true_bbox.left) / s.roi_width);
        errors[3].push((s.detected_bbox.right - s.true_bbox.right) / s.roi_width);
    }
    let stats: Vec<SideStats> = errors.iter().map(|e| side_stats(e)).collect();
    let n = samples.len() as f64;
    let mut correlations = nalgebra::Matrix4::<f64>::identity();
    for i in 0..4 {
        for j in (i + 1)..4 {
            let mi = stats[i].mean;
            let mj = stats[j].mean;
            let cov = errors[i]
                .iter()
                .zip(&errors[j])
                .map(|(a, b)| (a - mi) * (b - mj))
                .sum::<f64>()
                / (n - 1.0);
            let denom = (stats[i].variance * stats[j].variance).sqrt();
            let corr = if denom > 0.0 { cov / denom } else { 0.0 };
            correlations[(i, j)] = corr;
            correlations[(j, i)] = corr;
        }
    }
    Ok(NoiseCharacterization {
        top: stats[0],
        bottom: stats[1],
        left: stats[2],
        right: stats[3],
        correlations,
        samples: samples.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal, StandardNormal};

    #[test]
    fn mse_stationary_two_point_anchor() {
        let pts = vec![Vector3::zeros(), Vector3::new(2.0, 0.0, 0.0)];
        let (mse2d, mse3d) = mse_stationary(&pts).unwrap();
        assert_relative_eq!(mse2d, 1.0, epsilon = 1e-15);
        assert_relative_eq!(mse3d, 1.0, epsilon = 1e-15);

        let same = vec![Vector3::new(1.0, 2.0, 3.0); 5];
        assert_eq!(mse_stationary(&same).unwrap(), (0.0, 0.0));
        assert!(matches!(
            mse_stationary(&[Vector3::zeros()]),
            Err(MetricsError::EmptyInput)
        ));
    }

    #[test]
    fn mse_stationary_is_translation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let pts: Vec<Vector3<f64>> = (0..200)
            .map(|_| Vector3::from_fn(|_, _| rng.random_range(-2.0..2.0)))
            .collect();
        let (a2, a3) = mse_stationary(&pts).unwrap();
        let shift = Vector3::new(13.7, -4.2, 8.8);
        let shifted: Vec<Vector3<f64>> = pts.iter().map(|p| p + shift).collect();
        let (b2, b3) = mse_stationary(&shifted).unwrap();
        assert!((a2 - b2).abs() <= 1e-12);
        assert!((a3 - b3).abs() <= 1e-12);
    }

    /// Points spread along the square perimeter, parameterized directly
    /// (independent of any trajectory code).
    fn square_points(center: Vector3<f64>, edge: f64, n: usize) -> Vec<Vector3<f64>> {
        let half = edge / 2.0;
        (0..n)
            .map(|i| {
                let s = i as f64 / n as f64 * 4.0 * edge;
                let leg = (s / edge) as usize;
                let a = s - leg as f64 * edge;
                let (x, y) = match leg {
                    0 => (-half + a, -half),
                    1 => (half, -half + a),
                    2 => (half - a, half),
                    _ => (-half, half - a),
                };
                center + Vector3::new(x, y, 0.0)
            })
            .collect()
    }

    #[test]
    fn square_fit_is_exact_on_clean_points() {
        let center = Vector3::new(1.3, -0.7, 0.85);
        let pts = square_points(center, 3.0, 200);
        let (square, mse2d, mse3d) = fit_reference_square(&pts, 3.0).unwrap();
        assert!(mse3d <= 1e-10, "mse3d {mse3d}");
        assert!(mse2d <= mse3d + 1e-15);
        assert!((square.center - center).norm() < 1e-5);
    }

    #[test]
    fn square_fit_recovers_center_under_noise() {
        // Horizontal scatter sigma = 0.1 m: one degree of freedom is
        // perpendicular to the (locally straight) outline, so the expected
        // squared distance is sigma^2 = 0.01 m^2.
        let center = Vector3::new(0.4, 2.1, 0.9);
        let clean = square_points(center, 3.0, 1000);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let normal = Normal::new(0.0, 0.1).unwrap();
        let noisy: Vec<Vector3<f64>> = clean
            .iter()
            .map(|p| {
                p + Vector3::new(normal.sample(&mut rng), normal.sample(&mut rng), 0.0)
            })
            .collect();
        let (square, _mse2d, mse3d) = fit_reference_square(&noisy, 3.0).unwrap();
        assert!((square.center - center).norm() < 0.05);
        assert!((mse3d - 0.01).abs() < 0.003, "mse3d {mse3d}");
    }

    #[test]
    fn square_fit_never_worse_than_centroid_start() {
        let mut rng = ChaCha8Rng::seed_from_u64(30);
        for _ in 0..20 {
            let center = Vector3::from_fn(|_, _| rng.random_range(-3.0..3.0));
            let clean = square_points(center, 3.0, 60);
            let noisy: Vec<Vector3<f64>> = clean
                .iter()
                .map(|p| p + Vector3::from_fn(|_, _| rng.random_range(-0.3..0.3)))
                .collect();
            let n = noisy.len() as f64;
            let centroid: Vector3<f64> = noisy.iter().sum::<Vector3<f64>>() / n;
            let at_centroid = square_objective(&noisy, &centroid, 3.0);
            let (_, _, mse3d) = fit_reference_square(&noisy, 3.0).unwrap();
            assert!(mse3d <= at_centroid + 1e-12);
        }
    }

    #[test]
    fn square_fit_rejects_bad_inputs() {
        let few = vec![Vector3::zeros(); 5];
        assert!(matches!(
            fit_reference_square(&few, 3.0),
            Err(MetricsError::InsufficientSamples { got: 5, need: 8 })
        ));
        let same = vec![Vector3::new(1.0, 1.0, 1.0); 50];
        assert!(matches!(
            fit_reference_square(&same, 3.0),
            Err(MetricsError::DegenerateInput)
        ));
    }

    fn blank_record(agent: AgentId) -> RunRecord {
        RunRecord {
            time: 0.0,
            agent,
            person_true: Vector3::zeros(),
            est_position: Vector3::zeros(),
            est_velocity: Vector3::zeros(),
            est_covariance: Matrix6::identity(),
            attempted: false,
            detected: false,
            measurement: None,
            roi: Roi {
                left: 0.0,
                top: 0.0,
                right: 100.0,
                bottom: 100.0,
            },
            self_true: Vector3::zeros(),
            self_reported: Vector3::zeros(),
            bias_true: Vector3::zeros(),
            bias_estimate: Vector3::zeros(),
            rejected: 0,
        }
    }

    #[test]
    fn detection_rate_arithmetic() {
        let mut log = RunLog::default();
        for i in 0..8 {
            let mut r = blank_record(AgentId(0));
            r.attempted = true;
            r.detected = i < 5;
            log.records.push(r);
        }
        // A second agent's records must not leak in.
        let mut other = blank_record(AgentId(1));
        other.attempted = true;
        other.detected = true;
        log.records.push(other);
        assert_relative_eq!(detection_rate(&log, AgentId(0)).unwrap(), 62.5);
        assert_relative_eq!(detection_rate(&log, AgentId(1)).unwrap(), 100.0);
        assert!(matches!(
            detection_rate(&log, AgentId(2)),
            Err(MetricsError::NoAttempts)
        ));
    }

    #[test]
    fn nees_definition_anchors() {
        let mut log = RunLog::default();
        // Perfect estimate: NEES 0.
        log.records.push(blank_record(AgentId(0)));
        assert_eq!(nees(&log).unwrap().mean, 0.0);

        // Identity covariance, |e|^2 = 3 at every tick: NEES 3.
        let mut log = RunLog::default();
        for _ in 0..10 {
            let mut r = blank_record(AgentId(0));
            r.est_position = Vector3::new(1.0, 1.0, 1.0);
            log.records.push(r);
        }
        assert_relative_eq!(nees(&log).unwrap().mean, 3.0, epsilon = 1e-12);
    }

    #[test]
    fn nees_is_consistent_on_sampled_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let mut log = RunLog::default();
        for _ in 0..20_000 {
            let mut r = blank_record(AgentId(0));
            let stds = Vector3::new(
                rng.random_range(0.05..0.5),
                rng.random_range(0.05..0.5),
                rng.random_range(0.05..0.5),
            );
            let mut cov = Matrix6::<f64>::identity();
            for i in 0..3 {
                cov[(i, i)] = stds[i] * stds[i];
                let n: f64 = rng.sample(StandardNormal);
                r.est_position[i] = stds[i] * n;
            }
            r.est_covariance = cov;
            log.records.push(r);
        }
        let summary = nees(&log).unwrap();
        assert_eq!(summary.skipped, 0);
        // Mean of chi-square(3) samples: 3 +- ~4 sigma/sqrt(n).
        assert!((summary.mean - 3.0).abs() < 0.07, "mean {}", summary.mean);
    }

    #[test]
    fn nees_skips_singular_covariances() {
        let mut log = RunLog::default();
        for i in 0..10 {
            let mut r = blank_record(AgentId(0));
            if i % 2 == 0 {
                r.est_covariance = Matrix6::zeros();
            }
            r.est_position = Vector3::new(1.0, 1.0, 1.0);
            log.records.push(r);
        }
        let summary = nees(&log).unwrap();
        assert_eq!(summary.samples, 5);
        assert_eq!(summary.skipped, 5);
    }

    fn planted_samples(
        sigmas: [f64; 4],
        n: usize,
        rng: &mut impl Rng,
    ) -> Vec<NoiseSample> {
        let true_bbox = BBox {
            top: 100.0,
            bottom: 300.0,
            left: 150.0,
            right: 250.0,
        };
        let (roi_w, roi_h) = (400.0, 300.0);
        (0..n)
            .map(|_| {
                let draw = |std: f64, rng: &mut dyn rand::RngCore| -> f64 {
                    let n: f64 = Normal::new(0.0, std).unwrap().sample(rng);
                    n
                };
                let detected_bbox = BBox {
                    top: true_bbox.top + draw(sigmas[0], rng) * roi_h,
                    bottom: true_bbox.bottom + draw(sigmas[1], rng) * roi_h,
                    left: true_bbox.left + draw(sigmas[2], rng) * roi_w,
                    right: true_bbox.right + draw(sigmas[3], rng) * roi_w,
                };
                NoiseSample {
                    true_bbox,
                    detected_bbox,
                    roi_width: roi_w,
                    roi_height: roi_h,
                }
            })
            .collect()
    }

    #[test]
    fn characterization_recovers_planted_variances() {
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let sigmas = [
            0.0014_f64.sqrt(),
            0.0045_f64.sqrt(),
            0.0039_f64.sqrt(),
            0.0035_f64.sqrt(),
        ];
        let samples = planted_samples(sigmas, 10_000, &mut rng);
        let ch = characterize_noise(&samples).unwrap();
        assert!((ch.top.variance - 0.0014).abs() < 0.1 * 0.0014);
        assert!((ch.bottom.variance - 0.0045).abs() < 0.1 * 0.0045);
        assert!((ch.left.variance - 0.0039).abs() < 0.1 * 0.0039);
        assert!((ch.right.variance - 0.0035).abs() < 0.1 * 0.0035);
        // Independently planted sides: no significant correlations.
        for i in 0..4 {
            for j in 0..4 {
                if i != j {
                    assert!(ch.correlations[(i, j)].abs() <= 0.05);
                }
            }
        }
        // Gaussian plants: symmetric, mesokurtic.
        for s in [&ch.top, &ch.bottom, &ch.left, &ch.right] {
            assert!(s.mean.abs() < 0.002);
            assert!(s.skewness.abs() < 0.1);
            assert!(s.excess_kurtosis.abs() < 0.15);
        }
        let v = ch.variances();
        assert_relative_eq!(v.top, ch.top.variance);
    }

    #[test]
    fn characterization_edge_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(20);
        let zero = planted_samples([0.0; 4], 50, &mut rng);
        let ch = characterize_noise(&zero).unwrap();
        assert_eq!(ch.top.variance, 0.0);
        assert_eq!(ch.right.variance, 0.0);

        let few = planted_samples([0.01; 4], 29, &mut rng);
        assert!(matches!(
            characterize_noise(&few),
            Err(MetricsError::InsufficientSamples { got: 29, need: 30 })
        ));
    }

    #[test]
    fn characterization_variance_tightens_with_more_samples() {
        // Estimator consistency: four times the samples roughly halves the
        // spread of the variance estimate.
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let spread = |n: usize, rng: &mut ChaCha8Rng| -> f64 {
            let reps = 40;
            let mut estimates = Vec::with_capacity(reps);
            for _ in 0..reps {
                let samples = planted_samples([0.05, 0.05, 0.05, 0.05], n, rng);
                estimates.push(characterize_noise(&samples).unwrap().top.variance);
            }
            let mean = estimates.iter().sum::<f64>() / reps as f64;
            (estimates.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / reps as f64).sqrt()
        };
        let s_small = spread(500, &mut rng);
        let s_large = spread(2000, &mut rng);
        let ratio = s_small / s_large;
        assert!(ratio > 1.4 && ratio < 2.9, "ratio {ratio}");
    }

    #[test]
    fn csv_roundtrip_is_stable() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let mut log = RunLog::default();
        for k in 0..25 {
            let mut r = blank_record(AgentId(k % 2));
            r.time = k as f64 * 0.025;
            r.person_true = Vector3::from_fn(|_, _| rng.random_range(-5.0..5.0));
            r.est_position = Vector3::from_fn(|_, _| rng.random_range(-5.0..5.0));
            r.est_velocity = Vector3::from_fn(|_, _| rng.random_range(-1.0..1.0));
            let a = Matrix6::from_fn(|_, _| rng.random_range(-0.5..0.5));
            r.est_covariance = a * a.transpose();
            r.attempted = k % 3 != 0;
            r.detected = r.attempted && k % 2 == 0;
            r.measurement = if r.detected {
                Some(Vector3::from_fn(|_, _| rng.random_range(-5.0..5.0)))
            } else {
                None
            };
            r.rejected = k % 4;
            log.records.push(r);
        }
        let mut first = Vec::new();
        log.write_csv(&mut first).unwrap();
        let parsed = RunLog::read_csv(&first[..]).unwrap();
        assert_eq!(parsed.records.len(), log.records.len());
        // Written at 9 significant digits, the parsed log re-serializes
        // byte-identically.
        let mut second = Vec::new();
        parsed.write_csv(&mut second).unwrap();
        assert_eq!(first, second);
        for (a, b) in log.records.iter().zip(&parsed.records) {
            assert_eq!(a.agent, b.agent);
            assert_eq!(a.attempted, b.attempted);
            assert_eq!(a.detected, b.detected);
            assert_eq!(a.measurement.is_some(), b.measurement.is_some());
            assert_relative_eq!(a.est_position, b.est_position, max_relative = 1e-8);
        }
    }

    #[test]
    fn csv_rejects_malformed_input() {
        let text = "not,a,header\n";
        assert!(matches!(
            RunLog::read_csv(text.as_bytes()),
            Err(MetricsError::MalformedLog { line: 1, .. })
        ));
        let mut good = Vec::new();
        let mut log = RunLog::default();
        log.records.push(blank_record(AgentId(0)));
        log.write_csv(&mut good).unwrap();
        let mut text = String::from_utf8(good).unwrap();
        text.push_str("1.0,0,garbage\n");
        assert!(matches!(
            RunLog::read_csv(text.as_bytes()),
            Err(MetricsError::MalformedLog { line: 3, .. })
        ));
    }
}
