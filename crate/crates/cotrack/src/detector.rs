//! Statistical stand-in for a DNN person detector.
//!
//! The detector is treated as a black box characterized by measured
//! statistics rather than emulated internally:
//!
//! - detection probability as a piecewise-linear curve over the person's
//!   apparent height relative to the ROI, scaled by the visible fraction of
//!   the person inside the ROI;
//! - zero-mean Gaussian noise on each bounding-box side, with per-side
//!   variances expressed relative to the ROI dimensions (top/bottom scale
//!   with ROI height, left/right with ROI width);
//! - a processing budget modelled as a busy window: the pipeline always
//!   works on the freshest available frame and attempts detections at its
//!   characteristic processing rate.

use crate::geometry::{BBox, Roi, SideVariances};
use crate::AgentId;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Detector errors.
#[derive(Debug, Clone, Error, PartialEq)]
pub enum DetectorError {
    /// The ROI is smaller than the detector can operate on.
    #[error("ROI too small for detection ({width:.1} x {height:.1} px)")]
    InvalidRoi { width: f64, height: f64 },
}

/// Smallest ROI side length (px) the detector accepts.
const MIN_ROI_SIDE: f64 = 8.0;

/// One camera frame as seen by an agent's detector.
#[derive(Debug, Clone)]
pub struct SimFrame {
    pub timestamp: f64,
    pub agent: AgentId,
    /// Ground-truth person box in full-image pixels, or `None` when the
    /// person is outside the field of view.
    pub person_bbox: Option<BBox>,
}

/// One detected bounding box.
#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    pub bbox: BBox,
    /// Detector confidence in [0.6, 1.0].
    pub confidence: f64,
    /// Per-side noise variances relative to the ROI dimensions, as
    /// characterized for this detector.
    pub noise: SideVariances,
}

/// Empirical noise and sensitivity model of the detector.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectorNoiseModel {
    /// Top-side variance relative to ROI height.
    pub var_top: f64,
    /// Bottom-side variance relative to ROI height.
    pub var_bottom: f64,
    /// Left-side variance relative to ROI width.
    pub var_left: f64,
    /// Right-side variance relative to ROI width.
    pub var_right: f64,
    /// Plateau detection probability.
    pub p_max: f64,
    /// Relative height below which nothing is detected.
    pub knee_low: f64,
    /// Relative height where the probability reaches the plateau.
    pub knee_high: f64,
    /// Probability of emitting one spurious box per frame.
    pub false_positive_prob: f64,
}

impl Default for DetectorNoiseModel {
    fn default() -> Self {
        DetectorNoiseModel {
            var_top: 0.0014,
            var_bottom: 0.0045,
            var_left: 0.0039,
            var_right: 0.0035,
            p_max: 0.9,
            knee_low: 0.10,
            knee_high: 0.30,
            false_positive_prob: 0.0,
        }
    }
}

impl DetectorNoiseModel {
    pub fn side_variances(&self) -> SideVariances {
        SideVariances {
            top: self.var_top,
            bottom: self.var_bottom,
            left: self.var_left,
            right: self.var_right,
        }
    }
}

/// Detection probability as a function of the person's apparent height
/// relative to the ROI height.
///
/// Zero at or below `knee_low`, linear up to `p_max` at `knee_high`, flat up
/// to relative height 1, then linearly back to zero at 1.2 (a person much
/// larger than the ROI is cropped too heavily to detect).
pub fn detection_probability(model: &DetectorNoiseModel, relative_height: f64) -> f64 {
    let rh = relative_height;
    if rh <= model.knee_low {
        0.0
    } else if rh <= model.knee_high {
        model.p_max * (rh - model.knee_low) / (model.knee_high - model.knee_low)
    } else if rh <= 1.0 {
        model.p_max
    } else if rh <= 1.2 {
        model.p_max * (1.2 - rh) / 0.2
    } else {
        0.0
    }
}

/// Run the simulated detector over one frame restricted to `roi`.
///
/// When the true person box overlaps the ROI, a detection is drawn with
/// probability `detection_probability(h_rel) * visible_fraction`, where
/// `h_rel` is the true box height over the ROI height and the visible
/// fraction is the area share of the box inside the ROI. On success the true
/// box is first clipped to the ROI, then each side is perturbed with
/// Gaussian noise scaled by the ROI dimensions. Confidence is uniform in
/// [0.6, 1.0]. With probability `false_positive_prob` one spurious uniform
/// box is appended.
///
/// Draw order per frame is fixed (presence, side noises top/bottom/left/
/// right, confidence, false positive), so one seed reproduces one detection
/// stream bit for bit.
pub fn detect(
    frame: &SimFrame,
    roi: &Roi,
    model: &DetectorNoiseModel,
    rng: &mut impl Rng,
) -> Result<Vec<Detection>, DetectorError> {
    if roi.width() < MIN_ROI_SIDE || roi.height() < MIN_ROI_SIDE {
        return Err(DetectorError::InvalidRoi {
            width: roi.width(),
            height: roi.height(),
        });
    }
    let mut detections = Vec::new();
    if let Some(true_box) = &frame.person_bbox {
        if let Some(visible) = true_box.intersect(&roi.as_bbox()) {
            let h_rel = true_box.height() / roi.height();
            let visible_fraction = visible.area() / true_box.area();
            let p = (detection_probability(model, h_rel) * visible_fraction).clamp(0.0, 1.0);
            if rng.random_bool(p) {
                let normal = Normal::new(0.0, 1.0).unwrap();
                let sh = roi.height();
                let sw = roi.width();
                // A real detector never reports an inverted box; redraw the
                // rare degenerate samples (possible for thin visible slivers).
                let mut bbox = BBox {
                    top: 0.0,
                    bottom: 0.0,
                    left: 0.0,
                    right: 0.0,
                };
                for attempt in 0..32 {
                    bbox = BBox {
                        top: visible.top + model.var_top.sqrt() * sh * normal.sample(rng),
                        bottom: visible.bottom + model.var_bottom.sqrt() * sh * normal.sample(rng),
                        left: visible.left + model.var_left.sqrt() * sw * normal.sample(rng),
                        right: visible.right + model.var_right.sqrt() * sw * normal.sample(rng),
                    };
                    if bbox.is_valid() {
                        break;
                    }
                    if attempt == 31 {
                        bbox = BBox {
                            top: bbox.top.min(bbox.bottom),
                            bottom: bbox.top.max(bbox.bottom) + 1.0,
                            left: bbox.left.min(bbox.right),
                            right: bbox.left.max(bbox.right) + 1.0,
                        };
                    }
                }
                let confidence = rng.random_range(0.6..=1.0);
                detections.push(Detection {
                    bbox,
                    confidence,
                    noise: model.side_variances(),
                });
            }
        }
    }
    if model.false_positive_prob > 0.0 && rng.random_bool(model.false_positive_prob.clamp(0.0, 1.0))
    {
        let mut vs = [
            rng.random_range(roi.top..roi.bottom),
            rng.random_range(roi.top..roi.bottom),
        ];
        let mut us = [
            rng.random_range(roi.left..roi.right),
            rng.random_range(roi.left..roi.right),
        ];
        vs.sort_by(f64::total_cmp);
        us.sort_by(f64::total_cmp);
        let bbox = BBox {
            top: vs[0],
            bottom: vs[1].max(vs[0] + 1.0),
            left: us[0],
            right: us[1].max(us[0] + 1.0),
        };
        detections.push(Detection {
            bbox,
            confidence: rng.random_range(0.6..=1.0),
            noise: model.side_variances(),
        });
    }
    Ok(detections)
}

/// Processing cadence of the detector pipeline.
///
/// Detection hardware is modelled as a single pipeline that always grabs the
/// freshest captured frame the moment it becomes free. A frame is accepted
/// when the pipeline frees up before the next frame would replace it, and
/// the busy window then advances by one processing period from the grab
/// instant. The long-run attempt rate is therefore `1 / processing_period`
/// independent of the camera phase, and with a zero period every frame is
/// processed.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DetectorClock {
    busy_until: f64,
    pub processing_period: f64,
    /// Spacing of the camera frames feeding this pipeline.
    pub frame_interval: f64,
}

impl DetectorClock {
    pub fn new(processing_period: f64, frame_interval: f64) -> DetectorClock {
        DetectorClock {
            busy_until: 0.0,
            processing_period,
            frame_interval,
        }
    }

    /// Whether the frame captured at `frame_time` gets processed; advances
    /// the busy window when it does.
    pub fn try_accept(&mut self, frame_time: f64) -> bool {
        if self.busy_until < frame_time + self.frame_interval {
            self.busy_until = self.busy_until.max(frame_time) + self.processing_period;
            true
        } else {
            false
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn frame_with_box(bbox: BBox) -> SimFrame {
        SimFrame {
            timestamp: 0.0,
            agent: AgentId(0),
            person_bbox: Some(bbox),
        }
    }

    #[test]
    fn probability_curve_anchor_points() {
        let m = DetectorNoiseModel::default();
        assert_eq!(detection_probability(&m, 0.05), 0.0);
        assert_eq!(detection_probability(&m, 0.10), 0.0);
        assert_relative_eq!(detection_probability(&m, 0.20), 0.45, epsilon = 1e-12);
        assert_relative_eq!(detection_probability(&m, 0.30), 0.9, epsilon = 1e-12);
        assert_relative_eq!(detection_probability(&m, 0.65), 0.9, epsilon = 1e-12);
        assert_relative_eq!(detection_probability(&m, 1.0), 0.9, epsilon = 1e-12);
        assert_relative_eq!(detection_probability(&m, 1.1), 0.45, epsilon = 1e-12);
        assert_eq!(detection_probability(&m, 1.2), 0.0);
        assert_eq!(detection_probability(&m, 1.5), 0.0);
    }

    #[test]
    fn probability_monotone_up_to_plateau() {
        let m = DetectorNoiseModel::default();
        let mut last = -1.0;
        for i in 0..=100 {
            let rh = i as f64 * 0.01;
            let p = detection_probability(&m, rh);
            assert!(p >= last - 1e-15, "dip at rh={rh}");
            assert!((0.0..=m.p_max).contains(&p));
            last = p;
        }
    }

    #[test]
    fn invalid_roi_is_rejected() {
        let m = DetectorNoiseModel::default();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let roi = Roi {
            left: 0.0,
            top: 0.0,
            right: 7.0,
            bottom: 100.0,
        };
        let frame = frame_with_box(BBox {
            top: 10.0,
            bottom: 50.0,
            left: 1.0,
            right: 5.0,
        });
        assert!(matches!(
            detect(&frame, &roi, &m, &mut rng),
            Err(DetectorError::InvalidRoi { .. })
        ));
    }

    #[test]
    fn plateau_detection_rate_and_side_variances() {
        let m = DetectorNoiseModel::default();
        let mut rng = ChaCha8Rng::seed_from_u64(1234);
        // ROI 400x600, person 300 px tall: relative height 0.5 (plateau).
        let roi = Roi {
            left: 200.0,
            top: 100.0,
            right: 600.0,
            bottom: 700.0,
        };
        let true_box = BBox {
            top: 250.0,
            bottom: 550.0,
            left: 350.0,
            right: 450.0,
        };
        let frame = frame_with_box(true_box);
        let n = 20_000;
        let mut hits = 0usize;
        let mut errs: [Vec<f64>; 4] = Default::default();
        for _ in 0..n {
            let dets = detect(&frame, &roi, &m, &mut rng).unwrap();
            if let Some(d) = dets.first() {
                hits += 1;
                errs[0].push((d.bbox.top - true_box.top) / roi.height());
                errs[1].push((d.bbox.bottom - true_box.bottom) / roi.height());
                errs[2].push((d.bbox.left - true_box.left) / roi.width());
                errs[3].push((d.bbox.right - true_box.right) / roi.width());
                assert!((0.6..=1.0).contains(&d.confidence));
            }
        }
        let rate = hits as f64 / n as f64;
        assert!((rate - m.p_max).abs() < 0.01, "rate {rate}");
        let expected = [m.var_top, m.var_bottom, m.var_left, m.var_right];
        for (errs, exp) in errs.iter().zip(expected) {
            let mean: f64 = errs.iter().sum::<f64>() / errs.len() as f64;
            let var: f64 =
                errs.iter().map(|e| (e - mean) * (e - mean)).sum::<f64>() / (errs.len() - 1) as f64;
            assert!(
                (var - exp).abs() / exp < 0.10,
                "variance {var} vs expected {exp}"
            );
            assert!(mean.abs() < 3.0 * (exp / errs.len() as f64).sqrt() + 1e-3);
        }
    }

    #[test]
    fn truncation_scales_probability_and_clips_before_noise() {
        let m = DetectorNoiseModel::default();
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        // Person half inside the ROI horizontally.
        let roi = Roi {
            left: 400.0,
            top: 100.0,
            right: 800.0,
            bottom: 700.0,
        };
        let true_box = BBox {
            top: 250.0,
            bottom: 550.0,
            left: 350.0,
            right: 450.0,
        };
        let frame = frame_with_box(true_box);
        let n = 40_000;
        let mut hits = 0usize;
        let mut left_sum = 0.0;
        for _ in 0..n {
            let dets = detect(&frame, &roi, &m, &mut rng).unwrap();
            if let Some(d) = dets.first() {
                hits += 1;
                left_sum += d.bbox.left;
            }
        }
        let rate = hits as f64 / n as f64;
        assert!((rate - 0.5 * m.p_max).abs() < 0.02, "rate {rate}");
        // The visible part starts at the ROI edge, so the mean detected left
        // side sits near the ROI boundary (within a fraction of the side
        // noise), not at the true box side 50 px away.
        let mean_left = left_sum / hits as f64;
        assert!((mean_left - roi.left).abs() < 5.0, "mean left {mean_left}");
    }

    #[test]
    fn no_person_no_detection_without_false_positives() {
        let m = DetectorNoiseModel::default();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let roi = Roi {
            left: 0.0,
            top: 0.0,
            right: 100.0,
            bottom: 100.0,
        };
        let frame = SimFrame {
            timestamp: 0.0,
            agent: AgentId(0),
            person_bbox: None,
        };
        for _ in 0..100 {
            assert!(detect(&frame, &roi, &m, &mut rng).unwrap().is_empty());
        }
    }

    #[test]
    fn false_positives_appear_inside_roi() {
        let m = DetectorNoiseModel {
            false_positive_prob: 1.0,
            ..Default::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let roi = Roi {
            left: 50.0,
            top: 60.0,
            right: 250.0,
            bottom: 400.0,
        };
        let frame = SimFrame {
            timestamp: 0.0,
            agent: AgentId(0),
            person_bbox: None,
        };
        for _ in 0..200 {
            let dets = detect(&frame, &roi, &m, &mut rng).unwrap();
            assert_eq!(dets.len(), 1);
            let b = &dets[0].bbox;
            assert!(b.is_valid());
            assert!(b.left >= roi.left && b.top >= roi.top);
        }
    }

    #[test]
    fn same_seed_same_detections() {
        let m = DetectorNoiseModel::default();
        let roi = Roi {
            left: 200.0,
            top: 100.0,
            right: 600.0,
            bottom: 700.0,
        };
        let frame = frame_with_box(BBox {
            top: 250.0,
            bottom: 550.0,
            left: 350.0,
            right: 450.0,
        });
        let run = |seed: u64| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..500)
                .map(|_| detect(&frame, &roi, &m, &mut rng).unwrap())
                .collect::<Vec<_>>()
        };
        assert_eq!(run(7), run(7));
        assert_ne!(run(7), run(8));
    }

    #[test]
    fn clock_accepts_first_frame_and_zero_period_accepts_all() {
        let mut clock = DetectorClock::new(0.0, 0.025);
        for k in 0..50 {
            assert!(clock.try_accept(k as f64 * 0.025));
        }
        let mut clock = DetectorClock::new(0.1, 0.025);
        assert!(clock.try_accept(0.0));
    }

    #[test]
    fn clock_long_run_rate_matches_processing_period() {
        let period = 1.0 / 3.89;
        let mut clock = DetectorClock::new(period, 0.025);
        let mut accepted = 0usize;
        let frames = (120.0 / 0.025) as usize;
        for k in 0..frames {
            if clock.try_accept(k as f64 * 0.025) {
                accepted += 1;
            }
        }
        let rate = accepted as f64 / 120.0;
        assert!(
            (3.7..=3.9).contains(&rate),
            "long-run attempt rate {rate} Hz ({accepted} attempts)"
        );
    }

    #[test]
    fn clock_skips_frames_while_busy() {
        // Period between 3 and 4 frame intervals: gaps alternate 3/4 frames
        // and the attempt rate converges to 1/period.
        let mut clock = DetectorClock::new(0.09, 0.025);
        let mut accepted = Vec::new();
        for k in 0..120 {
            let t = k as f64 * 0.025;
            if clock.try_accept(t) {
                accepted.push(k);
            }
        }
        for pair in accepted.windows(2) {
            let gap = pair[1] - pair[0];
            assert!(gap == 3 || gap == 4, "gap {gap} frames");
        }
        let rate = accepted.len() as f64 / 3.0;
        assert!((rate - 1.0 / 0.09).abs() < 0.4, "rate {rate}");
    }
}
