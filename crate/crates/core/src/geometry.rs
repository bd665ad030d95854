//! Rigid-motion algebra, pinhole projection, predicted optical flow and
//! 3D-3D registration.
//!
//! Conventions: a [`RigidMotion`] maps points `x -> R x + t`. Camera
//! extrinsics (`[R | T]`, world to camera) and body poses (body to world) are
//! both represented by this type; functions document which one they expect.
//! Camera frames are x right, y down, z forward.

use alloc::vec::Vec;

#[allow(unused_imports)]
use num_traits::Float;
use nalgebra::{Matrix2, Matrix3, Rotation3, UnitQuaternion, Vector2, Vector3};
use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

/// Depth below which a camera-frame point counts as behind the camera.
pub const MIN_DEPTH: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RigidMotion {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Default for RigidMotion {
    fn default() -> Self {
        Self::identity()
    }
}

impl RigidMotion {
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Self {
        Self {
            rotation,
            translation,
        }
    }

    pub fn from_translation(translation: Vector3<f64>) -> Self {
        Self::new(Matrix3::identity(), translation)
    }

    /// Rotation given as an axis-angle vector (radians).
    pub fn from_axis_angle(axis_angle: Vector3<f64>, translation: Vector3<f64>) -> Self {
        Self::new(so3_exp(&axis_angle), translation)
    }

    /// Applies `other` first, then `self`.
    pub fn compose(&self, other: &RigidMotion) -> RigidMotion {
        RigidMotion {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> RigidMotion {
        let rt = self.rotation.transpose();
        RigidMotion {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    /// Left-multiplicative rotation increment and additive translation
    /// increment: `R <- exp(omega) R`, `t <- t + delta`.
    pub fn retract(&self, omega: &Vector3<f64>, delta: &Vector3<f64>) -> RigidMotion {
        RigidMotion {
            rotation: so3_exp(omega) * self.rotation,
            translation: self.translation + delta,
        }
    }

    /// Largest deviation of `RᵀR` from identity and of `det R` from one.
    pub fn orthonormality_error(&self) -> f64 {
        let e = self.rotation.transpose() * self.rotation - Matrix3::identity();
        let det = self.rotation.determinant();
        e.amax().max((det - 1.0).abs())
    }

    pub fn is_valid(&self, tol: f64) -> bool {
        self.orthonormality_error() <= tol
    }

    /// Rotation angle of `R` in radians.
    pub fn rotation_angle(&self) -> f64 {
        so3_log(&self.rotation).norm()
    }

    /// Unit quaternion `[qx, qy, qz, qw]` with `qw >= 0`.
    pub fn quaternion(&self) -> [f64; 4] {
        let q = UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(
            self.rotation,
        ));
        let mut c = q.coords;
        if c.w < 0.0 {
            c = -c;
        }
        [c.x, c.y, c.z, c.w]
    }

    pub fn from_quaternion(q: [f64; 4], translation: Vector3<f64>) -> RigidMotion {
        let uq = UnitQuaternion::from_quaternion(nalgebra::Quaternion::new(q[3], q[0], q[1], q[2]));
        RigidMotion::new(*uq.to_rotation_matrix().matrix(), translation)
    }

    /// Largest elementwise difference to `other`.
    pub fn max_abs_diff(&self, other: &RigidMotion) -> f64 {
        (self.rotation - other.rotation)
            .amax()
            .max((self.translation - other.translation).amax())
    }
}

/// Applies `b` then `a`.
pub fn compose(a: &RigidMotion, b: &RigidMotion) -> RigidMotion {
    a.compose(b)
}

pub fn invert(m: &RigidMotion) -> RigidMotion {
    m.inverse()
}

pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

pub fn so3_exp(w: &Vector3<f64>) -> Matrix3<f64> {
    let theta = w.norm();
    let k = skew(w);
    if theta < 1e-8 {
        // second-order Taylor expansion, exact to double precision here
        return Matrix3::identity() + k + k * k * 0.5;
    }
    let a = theta.sin() / theta;
    let b = (1.0 - theta.cos()) / (theta * theta);
    Matrix3::identity() + k * a + k * k * b
}

pub fn so3_log(r: &Matrix3<f64>) -> Vector3<f64> {
    Rotation3::from_matrix_unchecked(*r).scaled_axis()
}

/// Rotation about the camera z axis by `deg` degrees.
pub fn rot_z(deg: f64) -> Matrix3<f64> {
    so3_exp(&(Vector3::z() * deg.to_radians()))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64) -> Result<Self> {
        if !(fx > 0.0 && fy > 0.0) || !cx.is_finite() || !cy.is_finite() {
            return Err(Error::InvalidParameter("intrinsics"));
        }
        Ok(Self { fx, fy, cx, cy })
    }

    pub fn matrix(&self) -> Matrix3<f64> {
        Matrix3::new(self.fx, 0.0, self.cx, 0.0, self.fy, self.cy, 0.0, 0.0, 1.0)
    }

    /// `K⁻¹` in closed form.
    pub fn inverse_matrix(&self) -> Matrix3<f64> {
        Matrix3::new(
            1.0 / self.fx,
            0.0,
            -self.cx / self.fx,
            0.0,
            1.0 / self.fy,
            -self.cy / self.fy,
            0.0,
            0.0,
            1.0,
        )
    }

    /// Projects a camera-frame point.
    pub fn project_camera(&self, pc: &Vector3<f64>) -> Result<Vector2<f64>> {
        if pc.z <= MIN_DEPTH {
            return Err(Error::NonPositiveDepth(pc.z));
        }
        Ok(Vector2::new(
            self.fx * pc.x / pc.z + self.cx,
            self.fy * pc.y / pc.z + self.cy,
        ))
    }

    /// Camera-frame point at depth `z` along the ray through `pixel`.
    pub fn back_project(&self, pixel: &Vector2<f64>, z: f64) -> Vector3<f64> {
        Vector3::new(
            (pixel.x - self.cx) / self.fx * z,
            (pixel.y - self.cy) / self.fy * z,
            z,
        )
    }
}

/// Projects world point `x` through the extrinsics `pose` (world to camera).
pub fn project(k: &CameraIntrinsics, pose: &RigidMotion, x: &Vector3<f64>) -> Result<Vector2<f64>> {
    k.project_camera(&pose.transform_point(x))
}

/// Pixel position a static point seen at `pixel` with depth `z` moves to
/// when the camera frame changes by `cam_motion` (frame k point to frame
/// k+1 point): `K R K⁻¹ x + K T / z`, normalized homogeneously.
pub fn predicted_flow(
    k: &CameraIntrinsics,
    cam_motion: &RigidMotion,
    pixel: &Vector2<f64>,
    z: f64,
) -> Result<Vector2<f64>> {
    if z <= MIN_DEPTH {
        return Err(Error::NonPositiveDepth(z));
    }
    let kmat = k.matrix();
    // The flow equation's K' is read as K⁻¹; this is the only place that matters.
    let k_prime = k.inverse_matrix();
    let x = Vector3::new(pixel.x, pixel.y, 1.0);
    let h = kmat * cam_motion.rotation * k_prime * x + kmat * cam_motion.translation / z;
    if h.z <= MIN_DEPTH {
        return Err(Error::NonPositiveDepth(h.z * z));
    }
    Ok(Vector2::new(h.x / h.z, h.y / h.z))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FlowCovariance(pub Matrix2<f64>);

impl FlowCovariance {
    pub fn new(m: Matrix2<f64>) -> Result<Self> {
        let c = FlowCovariance(m);
        if c.is_valid() {
            Ok(c)
        } else {
            Err(Error::SingularCovariance)
        }
    }

    pub fn isotropic(variance: f64) -> Result<Self> {
        Self::new(Matrix2::identity() * variance)
    }

    pub fn is_valid(&self) -> bool {
        let m = &self.0;
        if (m[(0, 1)] - m[(1, 0)]).abs() > 1e-12 {
            return false;
        }
        // 2x2 symmetric: positive definite iff a > 0 and det > 0
        m[(0, 0)] > 0.0 && m.determinant() > 0.0 && m.iter().all(|v| v.is_finite())
    }

    pub fn inverse(&self) -> Result<Matrix2<f64>> {
        if !self.is_valid() {
            return Err(Error::SingularCovariance);
        }
        self.0.try_inverse().ok_or(Error::SingularCovariance)
    }

    /// `rᵀ Σ⁻¹ r`.
    pub fn mahalanobis(&self, r: &Vector2<f64>) -> Result<f64> {
        Ok((r.transpose() * self.inverse()? * r)[(0, 0)])
    }
}

/// Closed-form least-squares rigid motion `M` minimizing `Σ ‖M pᵢ − qᵢ‖²`
/// (SVD of the cross-covariance with the usual reflection fix).
pub fn absolute_orientation(pairs: &[(Vector3<f64>, Vector3<f64>)]) -> Result<RigidMotion> {
    if pairs.len() < 3 {
        return Err(Error::DegenerateConfiguration("fewer than 3 pairs"));
    }
    let n = pairs.len() as f64;
    let (mut cp, mut cq) = (Vector3::zeros(), Vector3::zeros());
    for (p, q) in pairs {
        cp += p;
        cq += q;
    }
    cp /= n;
    cq /= n;
    let mut h = Matrix3::zeros();
    for (p, q) in pairs {
        h += (p - cp) * (q - cq).transpose();
    }
    let svd = h.svd(true, true);
    let mut sv: Vec<(f64, usize)> = svd
        .singular_values
        .iter()
        .copied()
        .enumerate()
        .map(|(i, s)| (s, i))
        .collect();
    sv.sort_by(|a, b| b.0.total_cmp(&a.0));
    if !(sv[0].0 > 0.0) || sv[1].0 < 1e-12 * sv[0].0 {
        return Err(Error::DegenerateConfiguration("collinear or coincident points"));
    }
    let u = svd.u.ok_or(Error::DegenerateConfiguration("svd failed"))?;
    let v_t = svd.v_t.ok_or(Error::DegenerateConfiguration("svd failed"))?;
    let v = v_t.transpose();
    let mut d = Matrix3::identity();
    if (v * u.transpose()).determinant() < 0.0 {
        // flip the axis of the smallest singular value
        d[(sv[2].1, sv[2].1)] = -1.0;
    }
    let r = v * d * u.transpose();
    Ok(RigidMotion::new(r, cq - r * cp))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Registration {
    pub motion: RigidMotion,
    pub inliers: Vec<bool>,
}

impl Registration {
    pub fn inlier_count(&self) -> usize {
        self.inliers.iter().filter(|&&b| b).count()
    }
}

const REFIT_ROUNDS: usize = 10;

/// RANSAC over 3-point hypotheses with a fixed iteration budget, followed by
/// least-squares refits on the consensus set until it stops changing.
pub fn ransac_registration(
    pairs: &[(Vector3<f64>, Vector3<f64>)],
    max_iters: usize,
    inlier_thresh: f64,
    seed: u64,
) -> Result<Registration> {
    if !(inlier_thresh > 0.0) {
        return Err(Error::InvalidParameter("inlier_thresh"));
    }
    if pairs.len() < 3 {
        return Err(Error::InsufficientInliers(pairs.len()));
    }
    let mut rng = rng::rng(seed);
    let thresh2 = inlier_thresh * inlier_thresh;
    let count = |m: &RigidMotion| {
        pairs
            .iter()
            .filter(|(p, q)| (m.transform_point(p) - q).norm_squared() < thresh2)
            .count()
    };
    let mut best: Option<(usize, RigidMotion)> = None;
    for _ in 0..max_iters.max(1) {
        let idx = sample(&mut rng, pairs.len(), 3);
        let sample_pairs: Vec<_> = idx.iter().map(|i| pairs[i]).collect();
        let Ok(m) = absolute_orientation(&sample_pairs) else {
            continue;
        };
        let c = count(&m);
        if best.as_ref().is_none_or(|(bc, _)| c > *bc) {
            best = Some((c, m));
        }
        if c == pairs.len() {
            break;
        }
    }
    let (best_count, best_motion) = best.ok_or(Error::InsufficientInliers(0))?;
    if best_count < 3 {
        return Err(Error::InsufficientInliers(best_count));
    }
    // refit on the inliers until the inlier set settles
    let classify = |m: &RigidMotion| -> Vec<bool> {
        pairs.iter().map(|(p, q)| (m.transform_point(p) - q).norm_squared() < thresh2).collect()
    };
    let mut motion = best_motion;
    let mut inliers = classify(&motion);
    for _ in 0..REFIT_ROUNDS {
        let inlier_pairs: Vec<_> = pairs.iter().zip(&inliers).filter(|(_, i)| **i).map(|(p, _)| *p).collect();
        let Ok(m) = absolute_orientation(&inlier_pairs) else { break };
        let next = classify(&m);
        if next.iter().filter(|i| **i).count() < 3 {
            break;
        }
        motion = m;
        if next == inliers {
            break;
        }
        inliers = next;
    }
    let inliers = classify(&motion);
    Ok(Registration { motion, inliers })
}
