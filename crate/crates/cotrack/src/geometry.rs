//! Camera geometry and pose types.
//!
//! Conventions used throughout the crate:
//!
//! - World frame: right-handed, x east, y north, z up.
//! - Body frame: x forward, y left, z up.
//! - Camera frame: x right, y down, z forward (optical axis).
//! - Image coordinates: u right, v down, origin at the top-left corner.
//!
//! Pose uncertainty is a 6x6 covariance over (position, small-angle
//! orientation). Position perturbations are expressed in the world frame
//! (`p = p_hat + dp`), orientation perturbations as small right-applied
//! rotations in the body frame (`q = q_hat * exp(dtheta)`). This matches how
//! self-localization noise is injected and reported by the world simulator.

use nalgebra::{
    Isometry3, Matrix2, Matrix3, Matrix6, Point3, Rotation3, SMatrix, UnitQuaternion, Vector3,
    Vector6,
};
use thiserror::Error;

/// Minimum depth (m) in front of the camera for a point to be projectable.
pub const EPS_DEPTH: f64 = 1e-6;

/// Relative step for finite-difference Jacobians.
const FD_REL_STEP: f64 = 1e-5;
/// Absolute step floor for finite-difference Jacobians.
const FD_ABS_STEP: f64 = 1e-7;

/// Geometry errors.
#[derive(Debug, Clone, Error, PartialEq)]
pub enum GeometryError {
    /// The point is behind the camera (or closer than [`EPS_DEPTH`]).
    #[error("point behind camera (depth {0:.3e} m)")]
    PointBehindCamera(f64),
    /// The bounding box is too small to infer a distance from.
    #[error("degenerate bounding box (pixel height {0:.3e})")]
    DegenerateBox(f64),
}

/// A point in image coordinates (pixels).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PixelPoint {
    pub u: f64,
    pub v: f64,
}

/// An axis-aligned bounding box in full-image pixel coordinates.
///
/// Valid boxes satisfy `top < bottom` and `left < right` (v grows downward).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BBox {
    pub top: f64,
    pub bottom: f64,
    pub left: f64,
    pub right: f64,
}

impl BBox {
    pub fn width(&self) -> f64 {
        self.right - self.left
    }

    pub fn height(&self) -> f64 {
        self.bottom - self.top
    }

    pub fn area(&self) -> f64 {
        self.width().max(0.0) * self.height().max(0.0)
    }

    pub fn center(&self) -> PixelPoint {
        PixelPoint {
            u: 0.5 * (self.left + self.right),
            v: 0.5 * (self.top + self.bottom),
        }
    }

    pub fn is_valid(&self) -> bool {
        self.top < self.bottom && self.left < self.right
    }

    /// Intersection with another box, or `None` when they do not overlap.
    pub fn intersect(&self, other: &BBox) -> Option<BBox> {
        let b = BBox {
            top: self.top.max(other.top),
            bottom: self.bottom.min(other.bottom),
            left: self.left.max(other.left),
            right: self.right.min(other.right),
        };
        if b.is_valid() {
            Some(b)
        } else {
            None
        }
    }
}

/// Region of interest handed to the detector, in full-image pixels.
///
/// Invariants (enforced by [`Roi::clamped`]): the rectangle lies inside the
/// image and is at least [`Roi::MIN_WIDTH`] x [`Roi::MIN_HEIGHT`] pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Roi {
    pub left: f64,
    pub top: f64,
    pub right: f64,
    pub bottom: f64,
}

impl Roi {
    /// Smallest ROI width the detector accepts comfortably.
    pub const MIN_WIDTH: f64 = 32.0;
    /// Smallest ROI height the detector accepts comfortably.
    pub const MIN_HEIGHT: f64 = 24.0;

    pub fn width(&self) -> f64 {
        self.right - self.left
    }

    pub fn height(&self) -> f64 {
        self.bottom - self.top
    }

    pub fn as_bbox(&self) -> BBox {
        BBox {
            top: self.top,
            bottom: self.bottom,
            left: self.left,
            right: self.right,
        }
    }

    pub fn contains(&self, p: &PixelPoint) -> bool {
        p.u >= self.left && p.u <= self.right && p.v >= self.top && p.v <= self.bottom
    }

    /// The full image as an ROI.
    pub fn full_image(camera: &CameraModel) -> Roi {
        Roi {
            left: 0.0,
            top: 0.0,
            right: camera.width,
            bottom: camera.height,
        }
    }

    /// Clip a raw rectangle to the image and enforce the minimum size by
    /// growing back into the image where needed. Requires the image itself to
    /// be at least [`Roi::MIN_WIDTH`] x [`Roi::MIN_HEIGHT`].
    pub fn clamped(left: f64, top: f64, right: f64, bottom: f64, camera: &CameraModel) -> Roi {
        let clamp_span = |lo: f64, hi: f64, min_len: f64, limit: f64| -> (f64, f64) {
            let mut lo = lo.clamp(0.0, limit);
            let mut hi = hi.clamp(0.0, limit);
            if hi - lo < min_len {
                let mid = 0.5 * (lo + hi);
                lo = mid - 0.5 * min_len;
                hi = mid + 0.5 * min_len;
                if lo < 0.0 {
                    hi -= lo;
                    lo = 0.0;
                }
                if hi > limit {
                    lo -= hi - limit;
                    hi = limit;
                }
                lo = lo.max(0.0);
            }
            (lo, hi)
        };
        let (l, r) = clamp_span(left, right, Self::MIN_WIDTH, camera.width);
        let (t, b) = clamp_span(top, bottom, Self::MIN_HEIGHT, camera.height);
        Roi {
            left: l,
            top: t,
            right: r,
            bottom: b,
        }
    }
}

/// Per-side bounding-box variances. Depending on context these are either
/// relative to the ROI dimensions (detector output) or absolute in squared
/// pixels (backprojection input); see [`SideVariances::to_absolute`].
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SideVariances {
    pub top: f64,
    pub bottom: f64,
    pub left: f64,
    pub right: f64,
}

impl SideVariances {
    /// Convert ROI-relative variances to absolute squared pixels. Top and
    /// bottom scale with the ROI height, left and right with the ROI width.
    pub fn to_absolute(&self, roi_width: f64, roi_height: f64) -> SideVariances {
        SideVariances {
            top: self.top * roi_height * roi_height,
            bottom: self.bottom * roi_height * roi_height,
            left: self.left * roi_width * roi_width,
            right: self.right * roi_width * roi_width,
        }
    }
}

/// Prior on the tracked person's height (m).
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct HeightModel {
    pub mean: f64,
    pub std: f64,
}

/// Pinhole camera with fixed mounting on the agent body.
///
/// `cam_from_body` maps body-frame coordinates into camera-frame
/// coordinates; its inverse chained onto the body pose gives the
/// camera-to-world pose used for projection.
#[derive(Debug, Clone)]
pub struct CameraModel {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    /// Image width in pixels.
    pub width: f64,
    /// Image height in pixels.
    pub height: f64,
    pub cam_from_body: Isometry3<f64>,
}

impl CameraModel {
    /// Camera with the optical axis pitched down from the body x axis by
    /// `pitch_down` radians, mounted at the body origin.
    ///
    /// At `pitch_down = 0` the camera looks along body x with image right
    /// along body -y (right-hand side) and image down along body -z.
    pub fn with_pitch(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        width: f64,
        height: f64,
        pitch_down: f64,
    ) -> CameraModel {
        let (s, c) = pitch_down.sin_cos();
        // Rows are the camera axes expressed in the body frame.
        let rot = Rotation3::from_matrix_unchecked(Matrix3::new(
            0.0, -1.0, 0.0, // camera x (image right)
            -s, 0.0, -c, // camera y (image down)
            c, 0.0, -s, // camera z (optical axis)
        ));
        CameraModel {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
            cam_from_body: Isometry3::from_parts(
                nalgebra::Translation3::identity(),
                UnitQuaternion::from_rotation_matrix(&rot),
            ),
        }
    }

    /// Body-to-camera transform inverted for pose chaining.
    pub fn body_from_cam(&self) -> Isometry3<f64> {
        self.cam_from_body.inverse()
    }
}

/// A rigid pose with 6x6 covariance over (position, small-angle orientation).
#[derive(Debug, Clone, PartialEq)]
pub struct Pose6D {
    pub position: Vector3<f64>,
    pub orientation: UnitQuaternion<f64>,
    pub covariance: Matrix6<f64>,
}

impl Pose6D {
    pub fn new(
        position: Vector3<f64>,
        orientation: UnitQuaternion<f64>,
        covariance: Matrix6<f64>,
    ) -> Pose6D {
        Pose6D {
            position,
            orientation,
            covariance,
        }
    }

    /// A pose known exactly (zero covariance).
    pub fn exact(iso: &Isometry3<f64>) -> Pose6D {
        Pose6D {
            position: iso.translation.vector,
            orientation: iso.rotation,
            covariance: Matrix6::zeros(),
        }
    }

    pub fn isometry(&self) -> Isometry3<f64> {
        Isometry3::from_parts(self.position.into(), self.orientation)
    }
}

/// Skew-symmetric cross-product matrix of `v`.
pub(crate) fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Chain a fixed rigid transform onto an uncertain pose: `c = a * b`.
///
/// Covariance is transported through the exact linearization of the
/// composition under the crate's perturbation convention: with `R_a` the
/// nominal rotation of `a` and `(R_b, t_b)` the fixed transform,
///
/// ```text
/// dp_c     = dp_a - R_a [t_b]x dtheta_a
/// dtheta_c = R_b^T dtheta_a
/// ```
///
/// Used to obtain the camera-to-world pose from the body pose and the
/// mounting transform, keeping the body-pose uncertainty attached.
pub fn compose_pose(a: &Pose6D, b: &Isometry3<f64>) -> Pose6D {
    let iso = a.isometry() * b;
    let r_a = a.orientation.to_rotation_matrix();
    let r_b_t = b.rotation.to_rotation_matrix().matrix().transpose();
    let mut jac = Matrix6::<f64>::zeros();
    jac.fixed_view_mut::<3, 3>(0, 0).copy_from(&Matrix3::identity());
    jac.fixed_view_mut::<3, 3>(0, 3)
        .copy_from(&(-r_a.matrix() * skew(&b.translation.vector)));
    jac.fixed_view_mut::<3, 3>(3, 3).copy_from(&r_b_t);
    let cov = jac * a.covariance * jac.transpose();
    Pose6D {
        position: iso.translation.vector,
        orientation: iso.rotation,
        covariance: 0.5 * (cov + cov.transpose()),
    }
}

/// Project a world point through `camera` posed at `cam_world_pose`
/// (camera-to-world). Fails when the point is behind the camera.
pub fn project_point(
    camera: &CameraModel,
    cam_world_pose: &Isometry3<f64>,
    world_point: &Vector3<f64>,
) -> Result<PixelPoint, GeometryError> {
    let p_cam = cam_world_pose.inverse_transform_point(&Point3::from(*world_point));
    if p_cam.z <= EPS_DEPTH {
        return Err(GeometryError::PointBehindCamera(p_cam.z));
    }
    Ok(PixelPoint {
        u: camera.cx + camera.fx * p_cam.x / p_cam.z,
        v: camera.cy + camera.fy * p_cam.y / p_cam.z,
    })
}

/// Project a world point and propagate its 3x3 position covariance to a 2x2
/// pixel covariance through the analytic projection Jacobian.
pub fn project_point_with_cov(
    camera: &CameraModel,
    cam_world_pose: &Isometry3<f64>,
    world_point: &Vector3<f64>,
    world_cov: &Matrix3<f64>,
) -> Result<(PixelPoint, Matrix2<f64>), GeometryError> {
    let p_cam = cam_world_pose.inverse_transform_point(&Point3::from(*world_point));
    if p_cam.z <= EPS_DEPTH {
        return Err(GeometryError::PointBehindCamera(p_cam.z));
    }
    let px = PixelPoint {
        u: camera.cx + camera.fx * p_cam.x / p_cam.z,
        v: camera.cy + camera.fy * p_cam.y / p_cam.z,
    };
    let z = p_cam.z;
    let j_cam = SMatrix::<f64, 2, 3>::new(
        camera.fx / z,
        0.0,
        -camera.fx * p_cam.x / (z * z),
        0.0,
        camera.fy / z,
        -camera.fy * p_cam.y / (z * z),
    );
    let r_cw = cam_world_pose
        .rotation
        .inverse()
        .to_rotation_matrix()
        .into_inner();
    let j = j_cam * r_cw;
    Ok((px, j * world_cov * j.transpose()))
}

/// Inputs of the backprojection mean map, ordered as
/// (top, bottom, left, right, person height, pose position xyz, pose
/// small-angle rotation xyz).
const BP_INPUTS: usize = 11;

fn backproject_mean(
    camera: &CameraModel,
    pose: &Isometry3<f64>,
    x: &SMatrix<f64, BP_INPUTS, 1>,
    height_var_px: f64,
) -> Result<Vector3<f64>, GeometryError> {
    let (top, bottom, left, right, person_h) = (x[0], x[1], x[2], x[3], x[4]);
    let h_px = bottom - top;
    if h_px < 1.0 {
        return Err(GeometryError::DegenerateBox(h_px));
    }
    // Debias for the convexity of the depth in the box height under the
    // known pixel noise: widen the apparent span so the inferred depth is
    // unbiased to second order.
    let corr = 1.0 - height_var_px / (h_px * h_px);
    if corr <= 0.0 {
        return Err(GeometryError::DegenerateBox(h_px));
    }
    let u = 0.5 * (left + right);
    let v_mid = 0.5 * (top + bottom);
    let half_span = 0.5 * h_px / corr;

    let dp = Vector3::new(x[5], x[6], x[7]);
    let dtheta = Vector3::new(x[8], x[9], x[10]);
    let rot = pose.rotation * UnitQuaternion::from_scaled_axis(dtheta);
    let center = pose.translation.vector + dp;

    // World rays through the top-center and bottom-center pixels. For a
    // roll-free camera an upright person projects to a vertical image
    // segment, so these rays pass through the head and the feet. Solving
    // for the vertical segment of length `person_h` spanning both rays
    // recovers the depth at any viewing angle, including the steep
    // elevations where the apparent height is strongly foreshortened.
    let ray = |v: f64| {
        rot * Vector3::new(
            (u - camera.cx) / camera.fx,
            (v - camera.cy) / camera.fy,
            1.0,
        )
    };
    let r_head = ray(v_mid - half_span);
    let r_feet = ray(v_mid + half_span);

    // Least squares for head = c + a r_head, feet = c + b r_feet with
    // head - feet = person_h e_z (normal equations of [r_head, -r_feet]).
    let g00 = r_head.dot(&r_head);
    let g01 = -r_head.dot(&r_feet);
    let g11 = r_feet.dot(&r_feet);
    let rhs = Vector3::new(0.0, 0.0, person_h);
    let b0 = r_head.dot(&rhs);
    let b1 = -r_feet.dot(&rhs);
    let det = g00 * g11 - g01 * g01;
    if det <= 0.0 {
        return Err(GeometryError::DegenerateBox(h_px));
    }
    let a = (g11 * b0 - g01 * b1) / det;
    let b = (g00 * b1 - g01 * b0) / det;
    if a <= EPS_DEPTH || b <= EPS_DEPTH {
        return Err(GeometryError::PointBehindCamera(a.min(b)));
    }
    let head = center + a * r_head;
    let feet = center + b * r_feet;
    Ok(0.5 * (head + feet))
}

fn backproject_jacobian(
    camera: &CameraModel,
    pose: &Isometry3<f64>,
    nominal: &SMatrix<f64, BP_INPUTS, 1>,
    height_var_px: f64,
) -> Result<SMatrix<f64, 3, BP_INPUTS>, GeometryError> {
    let mut jac = SMatrix::<f64, 3, BP_INPUTS>::zeros();
    for i in 0..BP_INPUTS {
        let step = (FD_REL_STEP * nominal[i].abs()).max(FD_ABS_STEP);
        let mut hi = *nominal;
        let mut lo = *nominal;
        hi[i] += step;
        lo[i] -= step;
        let f_hi = backproject_mean(camera, pose, &hi, height_var_px)?;
        let f_lo = backproject_mean(camera, pose, &lo, height_var_px)?;
        jac.set_column(i, &((f_hi - f_lo) / (2.0 * step)));
    }
    Ok(jac)
}

/// Backproject a person bounding box to a world-frame position measurement.
///
/// The person is modeled as an upright segment of the prior height: the
/// rays through the top-center and bottom-center pixels are intersected
/// with a vertical segment of that length (least squares), which fixes the
/// depth even under strong foreshortening; a second-order debias corrects
/// the known box-height noise. The returned covariance propagates, through
/// a central finite-difference Jacobian of
/// the full image-to-world map:
///
/// - the four per-side box variances (`bbox_noise`, absolute squared pixels),
/// - the height-prior variance,
/// - the 6x6 camera-pose covariance.
///
/// # Errors
///
/// [`GeometryError::DegenerateBox`] when the box is under one pixel tall (or
/// the noise debias collapses the depth).
pub fn backproject_with_height(
    camera: &CameraModel,
    cam_world_pose: &Pose6D,
    bbox: &BBox,
    bbox_noise: &SideVariances,
    height: &HeightModel,
) -> Result<(Vector3<f64>, Matrix3<f64>), GeometryError> {
    let nominal = SMatrix::<f64, BP_INPUTS, 1>::from_column_slice(&[
        bbox.top,
        bbox.bottom,
        bbox.left,
        bbox.right,
        height.mean,
        0.0,
        0.0,
        0.0,
        0.0,
        0.0,
        0.0,
    ]);
    let pose = cam_world_pose.isometry();
    let height_var_px = bbox_noise.top + bbox_noise.bottom;
    let mean = backproject_mean(camera, &pose, &nominal, height_var_px)?;
    let jac = backproject_jacobian(camera, &pose, &nominal, height_var_px)?;

    let mut s = SMatrix::<f64, BP_INPUTS, BP_INPUTS>::zeros();
    s[(0, 0)] = bbox_noise.top;
    s[(1, 1)] = bbox_noise.bottom;
    s[(2, 2)] = bbox_noise.left;
    s[(3, 3)] = bbox_noise.right;
    s[(4, 4)] = height.std * height.std;
    s.fixed_view_mut::<6, 6>(5, 5).copy_from(&cam_world_pose.covariance);

    let cov = jac * s * jac.transpose();
    Ok((mean, 0.5 * (cov + cov.transpose())))
}

/// Sample a 6-vector from a 6x6 covariance using its (robust) square root.
/// Intended for simulation and test code.
pub fn sample_cov6(
    cov: &Matrix6<f64>,
    rng: &mut impl rand::Rng,
) -> Vector6<f64> {
    use rand_distr::{Distribution, StandardNormal};
    let root = match nalgebra::Cholesky::new(*cov) {
        Some(chol) => chol.l(),
        None => {
            // PSD with zero/tiny eigenvalues: fall back to eigendecomposition.
            let eig = nalgebra::SymmetricEigen::new(*cov);
            let vals = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
            eig.eigenvectors * Matrix6::from_diagonal(&vals)
        }
    };
    let z = Vector6::from_fn(|_, _| StandardNormal.sample(rng));
    root * z
}
