//! Residual functions of the refinement objective and their Jacobians.
//!
//! Pose perturbations are `R ← exp(ω) R`, `t ← t + δ` with the local
//! parameter ordered `(ω, δ)`.

use nalgebra::{Matrix3, SMatrix, Vector2, Vector3};
#[allow(unused_imports)]
use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{skew, CameraIntrinsics, RigidMotion};

pub type Mat23 = SMatrix<f64, 2, 3>;
pub type Mat36 = SMatrix<f64, 3, 6>;
pub type Mat13 = SMatrix<f64, 1, 3>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    Ba2d,
    Ba3d,
    Nc1,
    Nc2,
    Tc1,
    Tc2,
    Bc,
}

impl Family {
    pub const ALL: [Family; 7] = [
        Family::Ba2d,
        Family::Ba3d,
        Family::Nc1,
        Family::Nc2,
        Family::Tc1,
        Family::Tc2,
        Family::Bc,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Family::Ba2d => "ba2d",
            Family::Ba3d => "ba3d",
            Family::Nc1 => "nc1",
            Family::Nc2 => "nc2",
            Family::Tc1 => "tc1",
            Family::Tc2 => "tc2",
            Family::Bc => "bc",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BoxVariant {
    /// Per-pair 3-vector bound.
    Bc1,
    /// Per-pair scalar bound shared by the three axes.
    Bc2,
    /// One 3-vector bound shared by all pairs of a body.
    Bc3,
    /// One scalar bound shared by all pairs and axes of a body.
    Bc4,
}

impl BoxVariant {
    pub fn bound_dim(self) -> usize {
        match self {
            BoxVariant::Bc1 | BoxVariant::Bc3 => 3,
            BoxVariant::Bc2 | BoxVariant::Bc4 => 1,
        }
    }

    pub fn per_pair(self) -> bool {
        matches!(self, BoxVariant::Bc1 | BoxVariant::Bc2)
    }
}

/// `observed − π(K (R X + T))` for a world-to-camera motion `(R, T)`.
pub fn residual_ba2d(
    pose: &RigidMotion,
    point: &Vector3<f64>,
    pixel: &Vector2<f64>,
    k: &CameraIntrinsics,
) -> Result<Vector2<f64>> {
    Ok(pixel - k.project_camera(&pose.transform_point(point))?)
}

/// `measured − (R X + T)`.
pub fn residual_ba3d(pose: &RigidMotion, point: &Vector3<f64>, measured: &Vector3<f64>) -> Vector3<f64> {
    measured - pose.transform_point(point)
}

/// `N · t`. `direction` should be unit length.
pub fn residual_nc1(direction: &Vector3<f64>, normal: &Vector3<f64>) -> f64 {
    normal.dot(direction)
}

/// Mean of `Nᵢ · t` over the normal hypotheses.
pub fn residual_nc2(direction: &Vector3<f64>, normals: &[Vector3<f64>]) -> Result<f64> {
    if normals.is_empty() {
        return Err(Error::InvalidParameter("normals"));
    }
    Ok(normals.iter().map(|n| n.dot(direction)).sum::<f64>() / normals.len() as f64)
}

/// `(Tᵏ − Tᵏ⁻¹) × Tᵏ`.
pub fn residual_tc1(prev: &Vector3<f64>, cur: &Vector3<f64>) -> Vector3<f64> {
    (cur - prev).cross(cur)
}

/// `Tᵏ⁺¹ − 2Tᵏ + Tᵏ⁻¹`.
pub fn residual_tc2(prev: &Vector3<f64>, cur: &Vector3<f64>, next: &Vector3<f64>) -> Vector3<f64> {
    next - 2.0 * cur + prev
}

/// Box bound value `β(u)` for unconstrained parameters `u`:
/// `δ ⊙ tanh(u)` for vector bounds, `δ_s tanh(u) (1, 1, 1)` for scalars,
/// where `δ_s` is the smallest component of `δ`.
pub fn bound_value(variant: BoxVariant, u: &[f64], delta: &Vector3<f64>) -> Vector3<f64> {
    if variant.bound_dim() == 3 {
        Vector3::new(delta.x * u[0].tanh(), delta.y * u[1].tanh(), delta.z * u[2].tanh())
    } else {
        Vector3::repeat(delta.min() * u[0].tanh())
    }
}

/// `∂β/∂u`, 3 × `bound_dim`.
pub fn bound_jacobian(variant: BoxVariant, u: &[f64], delta: &Vector3<f64>) -> nalgebra::DMatrix<f64> {
    let sech2 = |x: f64| 1.0 - x.tanh() * x.tanh();
    if variant.bound_dim() == 3 {
        let mut m = nalgebra::DMatrix::zeros(3, 3);
        for i in 0..3 {
            m[(i, i)] = delta[i] * sech2(u[i]);
        }
        m
    } else {
        nalgebra::DMatrix::from_element(3, 1, delta.min() * sech2(u[0]))
    }
}

/// Unconstrained parameter reproducing the bound closest to `target`.
pub fn bound_init(variant: BoxVariant, target: &Vector3<f64>, delta: &Vector3<f64>) -> alloc::vec::Vec<f64> {
    const LIMIT: f64 = 0.995;
    let inv = |v: f64, d: f64| if d > 0.0 { (v / d).clamp(-LIMIT, LIMIT).atanh() } else { 0.0 };
    if variant.bound_dim() == 3 {
        alloc::vec![inv(target.x, delta.x), inv(target.y, delta.y), inv(target.z, delta.z)]
    } else {
        alloc::vec![inv(target.mean(), delta.min())]
    }
}

/// `Xᵢ − Xⱼ − β(u)`.
pub fn residual_bc(
    variant: BoxVariant,
    xi: &Vector3<f64>,
    xj: &Vector3<f64>,
    u: &[f64],
    delta: &Vector3<f64>,
) -> Result<Vector3<f64>> {
    if u.len() != variant.bound_dim() {
        return Err(Error::ShapeMismatch("bound arity does not match box variant".into()));
    }
    Ok(xi - xj - bound_value(variant, u, delta))
}

/// Inner minimization over the bound for fixed points: the bound
/// minimizing `‖d − β‖²` subject to `|β| ≤ δ`.
pub fn optimal_bound(variant: BoxVariant, d: &Vector3<f64>, delta: &Vector3<f64>) -> Vector3<f64> {
    if variant.bound_dim() == 3 {
        Vector3::new(
            d.x.clamp(-delta.x, delta.x),
            d.y.clamp(-delta.y, delta.y),
            d.z.clamp(-delta.z, delta.z),
        )
    } else {
        let s = delta.min();
        Vector3::repeat(d.mean().clamp(-s, s))
    }
}

// ---- Jacobian building blocks ----

/// Camera-frame point for a camera-to-world pose and a world point, with
/// derivatives w.r.t. the pose `(ω, δ)` and the point.
pub fn world_to_camera(cam: &RigidMotion, xw: &Vector3<f64>) -> (Vector3<f64>, Mat36, Matrix3<f64>) {
    let rt = cam.rotation.transpose();
    let rel = xw - cam.translation;
    let xc = rt * rel;
    let mut jp = Mat36::zeros();
    jp.fixed_view_mut::<3, 3>(0, 0).copy_from(&(rt * skew(&rel)));
    jp.fixed_view_mut::<3, 3>(0, 3).copy_from(&(-rt));
    (xc, jp, rt)
}

/// Camera-frame point for a body-to-camera pose and a body point.
pub fn body_to_camera(v: &RigidMotion, xb: &Vector3<f64>) -> (Vector3<f64>, Mat36, Matrix3<f64>) {
    let rx = v.rotation * xb;
    let xc = rx + v.translation;
    let mut jp = Mat36::zeros();
    jp.fixed_view_mut::<3, 3>(0, 0).copy_from(&(-skew(&rx)));
    jp.fixed_view_mut::<3, 3>(0, 3).copy_from(&Matrix3::identity());
    (xc, jp, v.rotation)
}

/// `∂(observed − π(X))/∂X`.
pub fn projection_jacobian(k: &CameraIntrinsics, xc: &Vector3<f64>) -> Result<Mat23> {
    if !(xc.z > crate::geometry::MIN_DEPTH) {
        return Err(Error::NonPositiveDepth(xc.z));
    }
    let iz = 1.0 / xc.z;
    Ok(-Mat23::new(
        k.fx * iz,
        0.0,
        -k.fx * xc.x * iz * iz,
        0.0,
        k.fy * iz,
        -k.fy * xc.y * iz * iz,
    ))
}

/// World position of the body-fixed point `a` with derivatives w.r.t. the
/// camera pose and the body-to-camera pose.
pub fn body_anchor_world(
    cam: &RigidMotion,
    v: &RigidMotion,
    a: &Vector3<f64>,
) -> (Vector3<f64>, Mat36, Mat36) {
    let ra = v.rotation * a;
    let y = ra + v.translation;
    let q = cam.rotation * y;
    let p = q + cam.translation;
    let mut jc = Mat36::zeros();
    jc.fixed_view_mut::<3, 3>(0, 0).copy_from(&(-skew(&q)));
    jc.fixed_view_mut::<3, 3>(0, 3).copy_from(&Matrix3::identity());
    let mut jv = Mat36::zeros();
    jv.fixed_view_mut::<3, 3>(0, 0).copy_from(&(-(cam.rotation * skew(&ra))));
    jv.fixed_view_mut::<3, 3>(0, 3).copy_from(&cam.rotation);
    (p, jc, jv)
}

/// Unit direction of `d` and `∂u/∂d`; `None` when `d` is (numerically) zero.
pub fn normalize_with_jacobian(d: &Vector3<f64>) -> Option<(Vector3<f64>, Matrix3<f64>)> {
    let n = d.norm();
    if !(n > 1e-12) {
        return None;
    }
    let u = d / n;
    Some((u, (Matrix3::identity() - u * u.transpose()) / n))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::project;
    use crate::rng;
    use rand::Rng as _;

    fn rand_v(r: &mut crate::rng::Rng, s: f64) -> Vector3<f64> {
        Vector3::new(r.random_range(-s..s), r.random_range(-s..s), r.random_range(-s..s))
    }

    #[test]
    fn ba2d_examples() {
        let k = CameraIntrinsics::new(500.0, 500.0, 320.0, 240.0).unwrap();
        let pose = RigidMotion::identity();
        let x = Vector3::new(1.0, -0.5, 8.0);
        let px = project(&k, &pose, &x).unwrap();
        assert_eq!(residual_ba2d(&pose, &x, &px, &k).unwrap(), Vector2::zeros());
        // depth along the principal ray is unobservable
        let c = Vector3::new(0.0, 0.0, 5.0);
        let obs = project(&k, &pose, &c).unwrap();
        let moved = Vector3::new(0.0, 0.0, 9.0);
        assert_eq!(residual_ba2d(&pose, &moved, &obs, &k).unwrap(), Vector2::zeros());
        assert!(matches!(
            residual_ba2d(&pose, &Vector3::new(0.0, 0.0, -1.0), &obs, &k),
            Err(Error::NonPositiveDepth(_))
        ));
        let mut r = rng::rng(4);
        for _ in 0..20 {
            let pose = RigidMotion::from_axis_angle(rand_v(&mut r, 0.2), rand_v(&mut r, 1.0));
            let x = rand_v(&mut r, 2.0) + Vector3::new(0.0, 0.0, 10.0);
            let obs = Vector2::new(r.random_range(0.0..640.0), r.random_range(0.0..480.0));
            let oracle = obs - project(&k, &pose, &x).unwrap();
            assert!((residual_ba2d(&pose, &x, &obs, &k).unwrap() - oracle).amax() < 1e-12);
        }
    }

    #[test]
    fn ba3d_examples() {
        let pose = RigidMotion::from_axis_angle(Vector3::new(0.0, 0.0, 0.5), Vector3::new(1.0, 2.0, 3.0));
        let x = Vector3::new(0.3, -0.2, 4.0);
        assert!(residual_ba3d(&pose, &x, &pose.transform_point(&x)).amax() < 1e-15);
        let m = Vector3::new(1.0, 1.0, 1.0);
        assert_eq!(residual_ba3d(&RigidMotion::identity(), &x, &m), m - x);
        // hand computation: R = rot_z(90°), T = (1, 0, 0), X = (1, 0, 0) → RX+T = (1, 1, 0)
        let pose = RigidMotion::new(crate::geometry::rot_z(90.0), Vector3::new(1.0, 0.0, 0.0));
        let r = residual_ba3d(&pose, &Vector3::new(1.0, 0.0, 0.0), &Vector3::new(2.0, 2.0, 2.0));
        assert!((r - Vector3::new(1.0, 1.0, 2.0)).amax() < 1e-12);
    }

    #[test]
    fn nc_examples() {
        let n = Vector3::new(0.0, 0.0, 1.0);
        assert_eq!(residual_nc1(&Vector3::new(1.0, 0.0, 0.0), &n), 0.0);
        assert_eq!(residual_nc1(&Vector3::new(0.0, 0.0, -1.0), &n).abs(), 1.0);
        let a = 30f64.to_radians();
        let d = Vector3::new(a.cos(), 0.0, a.sin());
        assert!((residual_nc1(&d, &n) - 0.5).abs() < 1e-12);

        assert_eq!(residual_nc2(&d, &[n, n, n]).unwrap(), residual_nc1(&d, &n));
        assert_eq!(residual_nc2(&d, &[n]).unwrap(), residual_nc1(&d, &n));
        let t = 10f64.to_radians();
        let h1 = Vector3::new(t.sin(), 0.0, t.cos());
        let h2 = Vector3::new(-t.sin(), 0.0, t.cos());
        assert!(residual_nc2(&Vector3::new(1.0, 0.0, 0.0), &[h1, h2]).unwrap().abs() < 1e-15);
        assert!(residual_nc2(&d, &[]).is_err());
    }

    #[test]
    fn tc_examples() {
        let a = Vector3::new(1.0, 2.0, 3.0);
        assert_eq!(residual_tc1(&a, &(2.5 * a)), Vector3::zeros());
        assert_eq!(
            residual_tc1(&Vector3::new(1.0, 0.0, 0.0), &Vector3::new(0.0, 1.0, 0.0)),
            Vector3::new(0.0, 0.0, -1.0)
        );
        let p = |x: f64| Vector3::new(x, 0.0, 0.0);
        assert_eq!(residual_tc2(&p(0.0), &p(1.0), &p(2.0)), Vector3::zeros());
        assert_eq!(residual_tc2(&p(0.0), &p(1.0), &p(3.0)), p(1.0));
        assert_eq!(residual_tc2(&a, &a, &a), Vector3::zeros());
    }

    #[test]
    fn tc1_direction_only_on_normalized_input() {
        let mut r = rng::rng(8);
        for _ in 0..50 {
            let a = rand_v(&mut r, 1.0);
            let b = rand_v(&mut r, 1.0);
            let (s1, s2) = (r.random_range(0.1..10.0), r.random_range(0.1..10.0));
            let base = residual_tc1(&a.normalize(), &b.normalize());
            let scaled = residual_tc1(&(s1 * a).normalize(), &(s2 * b).normalize());
            assert!((base - scaled).amax() < 1e-12);
        }
    }

    #[test]
    fn bc_examples() {
        let delta = Vector3::repeat(1.0);
        let xi = Vector3::new(0.5, -0.3, 0.2);
        let xj = Vector3::new(0.1, 0.4, -0.4);
        // slack bound: the inner minimum is zero
        for v in [BoxVariant::Bc1, BoxVariant::Bc3] {
            let b = optimal_bound(v, &(xi - xj), &delta);
            assert!((xi - xj - b).amax() < 1e-15);
        }

        // BC4, difference (d, 0, 0) with d > δ: b minimizes (d − b)² + 2b²
        let d = 2.5;
        let diff = Vector3::new(d, 0.0, 0.0);
        let b = optimal_bound(BoxVariant::Bc4, &diff, &delta).x;
        let f = |b: f64| (d - b).powi(2) + 2.0 * b * b;
        let mut best = (f64::INFINITY, 0.0);
        for i in 0..=20_000 {
            let x = -1.0 + 2.0 * i as f64 / 20_000.0;
            if f(x) < best.0 {
                best = (f(x), x);
            }
        }
        assert!((b - best.1).abs() < 1e-3);
        assert!((b - (d / 3.0).min(1.0)).abs() < 1e-12);

        // BC3 with equal differences: bound equals the common difference
        let c = Vector3::new(0.2, -0.1, 0.3);
        let b = optimal_bound(BoxVariant::Bc3, &c, &delta);
        let u = bound_init(BoxVariant::Bc3, &b, &delta);
        let r = residual_bc(BoxVariant::Bc3, &(xj + c), &xj, &u, &delta).unwrap();
        assert!(r.amax() < 1e-12);

        assert!(residual_bc(BoxVariant::Bc1, &xi, &xj, &[0.0], &delta).is_err());
    }
}
