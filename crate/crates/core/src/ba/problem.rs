//! Parameter layout and residual evaluation for the refinement problem.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use nalgebra::{DMatrix, DVector, Matrix3, Vector2, Vector3};
#[allow(unused_imports)]
use num_traits::Float;
use serde::{Deserialize, Serialize};

use super::residuals::*;
use crate::error::{Error, Result};
use crate::geometry::{skew, CameraIntrinsics, RigidMotion, MIN_DEPTH};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormalVariant {
    Nc1,
    Nc2,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrajectoryVariant {
    Tc1,
    Tc2,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConstraintSet {
    pub normal: Option<NormalVariant>,
    pub trajectory: Option<TrajectoryVariant>,
    pub boxes: Option<BoxVariant>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum PointRef {
    Static(usize),
    Body(usize, usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub frame: usize,
    pub point: PointRef,
    pub pixel: Vector2<f64>,
    pub measured: Vector3<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BodyBlock {
    pub id: usize,
    pub first_frame: usize,
    /// Body-to-camera pose per frame from `first_frame`.
    pub poses: Vec<RigidMotion>,
    /// Extrapolated poses: held fixed and excluded from every residual.
    pub interpolated: Vec<bool>,
    /// Points in the body reference frame.
    pub points: Vec<Vector3<f64>>,
    pub tracks: Vec<u32>,
    /// Body-frame point whose world track feeds the trajectory constraints.
    pub anchor: Vector3<f64>,
    pub pairs: Vec<(usize, usize)>,
    /// Unconstrained bound parameters per pair (per-pair variants).
    pub pair_bounds: Vec<Vec<f64>>,
    /// Unconstrained shared bound parameters (shared variants).
    pub shared_bound: Vec<f64>,
}

impl BodyBlock {
    pub fn frames(&self) -> core::ops::Range<usize> {
        self.first_frame..self.first_frame + self.poses.len()
    }

    pub fn pose(&self, frame: usize) -> Option<&RigidMotion> {
        frame.checked_sub(self.first_frame).and_then(|i| self.poses.get(i))
    }

    fn usable(&self, frame: usize) -> bool {
        frame
            .checked_sub(self.first_frame)
            .is_some_and(|i| i < self.poses.len() && !self.interpolated[i])
    }

    /// Body-to-world poses given camera-to-world poses.
    pub fn world_poses(&self, cameras: &[RigidMotion]) -> Vec<(usize, RigidMotion)> {
        self.frames()
            .zip(&self.poses)
            .map(|(k, v)| (k, cameras[k].compose(v)))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaProblem {
    pub intrinsics: CameraIntrinsics,
    /// Camera-to-world pose for every frame.
    pub camera_poses: Vec<RigidMotion>,
    /// Frame whose camera pose is held fixed.
    pub fixed_camera: usize,
    pub static_points: Vec<Vector3<f64>>,
    pub static_tracks: Vec<u32>,
    pub bodies: Vec<BodyBlock>,
    pub observations: Vec<Observation>,
    /// Ground normal hypotheses (first one used by NC1).
    pub normals: Vec<Vector3<f64>>,
    pub constraints: ConstraintSet,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Huber {
    /// Threshold for pixel residuals.
    pub pixels: f64,
    /// Threshold for all other residuals.
    pub units: f64,
}

impl Default for Huber {
    fn default() -> Self {
        Self { pixels: 2.0, units: 0.2 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverConfig {
    pub max_iters: usize,
    pub gradient_tol: f64,
    pub relative_cost_tol: f64,
    /// Stop once the largest step component falls below this.
    pub step_tol: f64,
    pub damping_init: f64,
    pub damping_up: f64,
    pub damping_down: f64,
    pub huber: Option<Huber>,
    /// Weight of the 3D registration term.
    pub lambda: f64,
    pub w_nc: f64,
    pub w_tc: f64,
    pub w_bc: f64,
    /// Box half-extent per axis.
    pub delta: Vector3<f64>,
    /// Apply the normal and trajectory constraints to the camera path too.
    pub constrain_camera: bool,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            max_iters: 50,
            gradient_tol: 1e-10,
            relative_cost_tol: 1e-10,
            step_tol: 1e-12,
            damping_init: 1e-4,
            damping_up: 10.0,
            damping_down: 0.5,
            huber: None,
            lambda: 1.0,
            w_nc: 1.0,
            w_tc: 1.0,
            w_bc: 0.1,
            delta: Vector3::repeat(2.4),
            constrain_camera: true,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |f: &str| Err(Error::ConfigInvalid(f.into()));
        if self.max_iters == 0 {
            return bad("max_iters");
        }
        if !(self.gradient_tol > 0.0) {
            return bad("gradient_tol");
        }
        if !(self.relative_cost_tol > 0.0) {
            return bad("relative_cost_tol");
        }
        if !(self.step_tol > 0.0) {
            return bad("step_tol");
        }
        if !(self.damping_init > 0.0) {
            return bad("damping_init");
        }
        if !(self.damping_up > 1.0) {
            return bad("damping_up");
        }
        if !(self.damping_down > 0.0 && self.damping_down < 1.0) {
            return bad("damping_down");
        }
        if let Some(h) = self.huber {
            if !(h.pixels > 0.0 && h.units > 0.0) {
                return bad("huber");
            }
        }
        for (v, name) in [(self.lambda, "lambda"), (self.w_nc, "w_nc"), (self.w_tc, "w_tc"), (self.w_bc, "w_bc")] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(name);
            }
        }
        if !self.delta.iter().all(|d| *d >= 0.0 && d.is_finite()) {
            return bad("delta");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct FamilyCosts {
    pub ba2d: f64,
    pub ba3d: f64,
    pub nc: f64,
    pub tc: f64,
    pub bc: f64,
}

impl FamilyCosts {
    pub fn total(&self) -> f64 {
        self.ba2d + self.ba3d + self.nc + self.tc + self.bc
    }

    fn add(&mut self, f: Family, v: f64) {
        match f {
            Family::Ba2d => self.ba2d += v,
            Family::Ba3d => self.ba3d += v,
            Family::Nc1 | Family::Nc2 => self.nc += v,
            Family::Tc1 | Family::Tc2 => self.tc += v,
            Family::Bc => self.bc += v,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum BlockKind {
    Camera(usize),
    BodyPose(usize, usize),
    Static(usize),
    BodyPoint(usize, usize),
    SharedBound(usize),
    PairBound(usize, usize),
}

/// Maps free parameter blocks to solver indices. Poses and shared bounds
/// are dense "hub" blocks; points and per-pair bounds are sparse.
#[derive(Debug, Clone)]
pub(crate) struct Layout {
    pub kinds: Vec<BlockKind>,
    pub dims: Vec<usize>,
    pub hub: Vec<bool>,
    camera: Vec<Option<usize>>,
    body_pose: Vec<Vec<Option<usize>>>,
    static_point: Vec<usize>,
    body_point: Vec<Vec<usize>>,
    shared_bound: Vec<Option<usize>>,
    pair_bound: Vec<Vec<usize>>,
}

impl Layout {
    pub fn new(p: &BaProblem, c: &SolverConfig) -> Self {
        let mut l = Layout {
            kinds: Vec::new(),
            dims: Vec::new(),
            hub: Vec::new(),
            camera: vec![None; p.camera_poses.len()],
            body_pose: p.bodies.iter().map(|b| vec![None; b.poses.len()]).collect(),
            static_point: Vec::new(),
            body_point: vec![Vec::new(); p.bodies.len()],
            shared_bound: vec![None; p.bodies.len()],
            pair_bound: vec![Vec::new(); p.bodies.len()],
        };
        let push = |l: &mut Layout, kind, dim, hub| {
            l.kinds.push(kind);
            l.dims.push(dim);
            l.hub.push(hub);
            l.kinds.len() - 1
        };
        for k in 0..p.camera_poses.len() {
            if k != p.fixed_camera {
                l.camera[k] = Some(push(&mut l, BlockKind::Camera(k), 6, true));
            }
        }
        for (b, body) in p.bodies.iter().enumerate() {
            for i in 1..body.poses.len() {
                if !body.interpolated[i] {
                    l.body_pose[b][i] = Some(push(&mut l, BlockKind::BodyPose(b, i), 6, true));
                }
            }
        }
        for i in 0..p.static_points.len() {
            let id = push(&mut l, BlockKind::Static(i), 3, false);
            l.static_point.push(id);
        }
        for (b, body) in p.bodies.iter().enumerate() {
            for i in 0..body.points.len() {
                let id = push(&mut l, BlockKind::BodyPoint(b, i), 3, false);
                l.body_point[b].push(id);
            }
        }
        if let (Some(v), true) = (p.constraints.boxes, c.w_bc > 0.0) {
            for (b, body) in p.bodies.iter().enumerate() {
                if body.pairs.is_empty() {
                    continue;
                }
                if v.per_pair() {
                    for i in 0..body.pairs.len() {
                        let id = push(&mut l, BlockKind::PairBound(b, i), v.bound_dim(), false);
                        l.pair_bound[b].push(id);
                    }
                } else {
                    l.shared_bound[b] = Some(push(&mut l, BlockKind::SharedBound(b), v.bound_dim(), true));
                }
            }
        }
        l
    }

    pub fn label(&self, block: usize) -> String {
        match self.kinds[block] {
            BlockKind::Camera(k) => alloc::format!("camera[{k}]"),
            BlockKind::BodyPose(b, i) => alloc::format!("body[{b}].pose[{i}]"),
            BlockKind::Static(i) => alloc::format!("static_point[{i}]"),
            BlockKind::BodyPoint(b, i) => alloc::format!("body[{b}].point[{i}]"),
            BlockKind::SharedBound(b) => alloc::format!("body[{b}].bound"),
            BlockKind::PairBound(b, i) => alloc::format!("body[{b}].pair_bound[{i}]"),
        }
    }
}

/// One linearized residual block.
#[derive(Debug, Clone)]
pub(crate) struct ResidualBlock {
    pub family: Family,
    pub weight: f64,
    /// Huber threshold, if robust.
    pub huber: Option<f64>,
    pub r: DVector<f64>,
    pub jac: Vec<(usize, DMatrix<f64>)>,
    /// Label used in error reports.
    pub origin: usize,
}

impl ResidualBlock {
    /// `w ρ(‖r‖²)` with Huber `ρ(s) = 2k√s − k²` beyond the threshold.
    pub fn cost(&self) -> f64 {
        let s = self.r.norm_squared();
        self.weight
            * match self.huber {
                Some(k) if s > k * k => 2.0 * k * s.sqrt() - k * k,
                _ => s,
            }
    }

    /// IRLS weight for the Gauss-Newton system.
    pub fn effective_weight(&self) -> f64 {
        let s = self.r.norm_squared();
        self.weight
            * match self.huber {
                Some(k) if s > k * k => k / s.sqrt(),
                _ => 1.0,
            }
    }
}

pub(crate) struct Evaluation {
    pub blocks: Vec<ResidualBlock>,
    pub costs: FamilyCosts,
    pub skipped_depth: usize,
}

type PosJac = Vec<(usize, nalgebra::SMatrix<f64, 3, 6>)>;

struct Position {
    p: Vector3<f64>,
    jac: PosJac,
}

fn combine(terms: &[(&PosJac, DMatrix<f64>)]) -> Vec<(usize, DMatrix<f64>)> {
    let mut out: Vec<(usize, DMatrix<f64>)> = Vec::new();
    for (jac, coef) in terms {
        for (blk, j) in jac.iter() {
            let m = coef * DMatrix::from_column_slice(3, 6, j.as_slice());
            match out.iter_mut().find(|(b, _)| b == blk) {
                Some((_, acc)) => *acc += m,
                None => out.push((*blk, m)),
            }
        }
    }
    out
}

fn dm3(m: &Matrix3<f64>) -> DMatrix<f64> {
    DMatrix::from_column_slice(3, 3, m.as_slice())
}

fn to_dyn<const R: usize, const C: usize>(m: &nalgebra::SMatrix<f64, R, C>) -> DMatrix<f64> {
    DMatrix::from_column_slice(R, C, m.as_slice())
}

/// Residual blocks and costs of the objective. Without `jacobians`,
/// observation blocks carry residuals only.
pub(crate) fn evaluate(
    p: &BaProblem,
    c: &SolverConfig,
    layout: &Layout,
    only: Option<Family>,
    jacobians: bool,
) -> Result<Evaluation> {
    let mut blocks = Vec::new();
    let mut costs = FamilyCosts::default();
    let mut skipped = 0usize;
    let wants = |f: Family| only.is_none_or(|o| o == f);
    let huber_px = c.huber.map(|h| h.pixels);
    let huber_units = c.huber.map(|h| h.units);
    let mut push = |blocks: &mut Vec<ResidualBlock>, b: ResidualBlock| {
        costs.add(b.family, b.cost());
        blocks.push(b);
    };

    // observations
    for obs in &p.observations {
        let (xc, jpose, jpt, pose_blk, pt_blk) = match obs.point {
            PointRef::Static(i) => {
                let cam = &p.camera_poses[obs.frame];
                let (xc, jp, jx) = world_to_camera(cam, &p.static_points[i]);
                (xc, jp, jx, layout.camera[obs.frame], layout.static_point[i])
            }
            PointRef::Body(b, i) => {
                let body = &p.bodies[b];
                if !body.usable(obs.frame) {
                    continue;
                }
                let idx = obs.frame - body.first_frame;
                let (xc, jp, jx) = body_to_camera(&body.poses[idx], &body.points[i]);
                (xc, jp, jx, layout.body_pose[b][idx], layout.body_point[b][i])
            }
        };
        if wants(Family::Ba2d) {
            if xc.z > MIN_DEPTH {
                let r = obs.pixel - p.intrinsics.project_camera(&xc)?;
                let mut jac = Vec::new();
                if jacobians {
                    let jproj = projection_jacobian(&p.intrinsics, &xc)?;
                    if let Some(pb) = pose_blk {
                        jac.push((pb, to_dyn(&(jproj * jpose))));
                    }
                    jac.push((pt_blk, to_dyn(&(jproj * jpt))));
                }
                push(
                    &mut blocks,
                    ResidualBlock {
                        family: Family::Ba2d,
                        weight: 1.0,
                        huber: huber_px,
                        r: DVector::from_column_slice(r.as_slice()),
                        jac,
                        origin: pt_blk,
                    },
                );
            } else {
                skipped += 1;
            }
        }
        if wants(Family::Ba3d) && c.lambda > 0.0 {
            let r = obs.measured - xc;
            let mut jac = Vec::new();
            if jacobians {
                if let Some(pb) = pose_blk {
                    jac.push((pb, to_dyn(&(-jpose))));
                }
                jac.push((pt_blk, to_dyn(&(-jpt))));
            }
            push(
                &mut blocks,
                ResidualBlock {
                    family: Family::Ba3d,
                    weight: c.lambda,
                    huber: huber_units,
                    r: DVector::from_column_slice(r.as_slice()),
                    jac,
                    origin: pt_blk,
                },
            );
        }
    }

    // trajectory constraints on the camera path and each body
    let mut paths: Vec<Vec<Option<Position>>> = Vec::new();
    let need_paths = (p.constraints.normal.is_some() && c.w_nc > 0.0)
        || (p.constraints.trajectory.is_some() && c.w_tc > 0.0);
    if need_paths {
        if c.constrain_camera {
            paths.push(
                p.camera_poses
                    .iter()
                    .enumerate()
                    .map(|(k, cam)| {
                        let mut j = nalgebra::SMatrix::<f64, 3, 6>::zeros();
                        j.fixed_view_mut::<3, 3>(0, 3).copy_from(&Matrix3::identity());
                        Some(Position {
                            p: cam.translation,
                            jac: layout.camera[k].map(|blk| (blk, j)).into_iter().collect(),
                        })
                    })
                    .collect(),
            );
        }
        for (b, body) in p.bodies.iter().enumerate() {
            paths.push(
                body.frames()
                    .enumerate()
                    .map(|(i, k)| {
                        if body.interpolated[i] {
                            return None;
                        }
                        let (pos, jc, jv) = body_anchor_world(&p.camera_poses[k], &body.poses[i], &body.anchor);
                        let mut jac = Vec::new();
                        if let Some(blk) = layout.camera[k] {
                            jac.push((blk, jc));
                        }
                        if let Some(blk) = layout.body_pose[b][i] {
                            jac.push((blk, jv));
                        }
                        Some(Position { p: pos, jac })
                    })
                    .collect(),
            );
        }
    }
    let origin_of = |path: &[Option<Position>]| {
        path.iter().flatten().flat_map(|x| x.jac.first()).map(|(b, _)| *b).next().unwrap_or(0)
    };

    if let (Some(nv), true) = (p.constraints.normal, c.w_nc > 0.0) {
        let family = match nv {
            NormalVariant::Nc1 => Family::Nc1,
            NormalVariant::Nc2 => Family::Nc2,
        };
        if wants(family) {
            if p.normals.is_empty() {
                return Err(Error::InvalidParameter("normal constraint without ground normal"));
            }
            let used: &[Vector3<f64>] = match nv {
                NormalVariant::Nc1 => &p.normals[..1],
                NormalVariant::Nc2 => &p.normals,
            };
            let nbar = used.iter().sum::<Vector3<f64>>() / used.len() as f64;
            for path in &paths {
                let origin = origin_of(path);
                for w in path.windows(2) {
                    let (Some(a), Some(b)) = (&w[0], &w[1]) else { continue };
                    let Some((u, ju)) = normalize_with_jacobian(&(b.p - a.p)) else { continue };
                    let r = match nv {
                        NormalVariant::Nc1 => residual_nc1(&u, &used[0]),
                        NormalVariant::Nc2 => residual_nc2(&u, used)?,
                    };
                    let g = DMatrix::from_row_slice(1, 3, (nbar.transpose() * ju).as_slice());
                    let jac = combine(&[(&b.jac, g.clone()), (&a.jac, -g)]);
                    push(
                        &mut blocks,
                        ResidualBlock {
                            family,
                            weight: c.w_nc,
                            huber: huber_units,
                            r: DVector::from_element(1, r),
                            jac,
                            origin,
                        },
                    );
                }
            }
        }
    }

    if let (Some(tv), true) = (p.constraints.trajectory, c.w_tc > 0.0) {
        let family = match tv {
            TrajectoryVariant::Tc1 => Family::Tc1,
            TrajectoryVariant::Tc2 => Family::Tc2,
        };
        if wants(family) {
            for path in &paths {
                let origin = origin_of(path);
                for w in path.windows(3) {
                    let (Some(a), Some(b), Some(d)) = (&w[0], &w[1], &w[2]) else { continue };
                    let (r, jac) = match tv {
                        TrajectoryVariant::Tc1 => {
                            let (Some((u0, j0)), Some((u1, j1))) =
                                (normalize_with_jacobian(&(b.p - a.p)), normalize_with_jacobian(&(d.p - b.p)))
                            else {
                                continue;
                            };
                            let r = residual_tc1(&u0, &u1);
                            // r = (u1 − u0) × u1
                            let du1 = skew(&(u1 - u0)) - skew(&u1);
                            let du0 = skew(&u1);
                            let m0 = du0 * j0;
                            let m1 = du1 * j1;
                            // u0 depends on (a, b), u1 on (b, d)
                            let jac = combine(&[
                                (&a.jac, dm3(&(-m0))),
                                (&b.jac, dm3(&(m0 - m1))),
                                (&d.jac, dm3(&m1)),
                            ]);
                            (r, jac)
                        }
                        TrajectoryVariant::Tc2 => {
                            let r = residual_tc2(&a.p, &b.p, &d.p);
                            let i = Matrix3::identity();
                            let jac = combine(&[(&a.jac, dm3(&i)), (&b.jac, dm3(&(-2.0 * i))), (&d.jac, dm3(&i))]);
                            (r, jac)
                        }
                    };
                    push(
                        &mut blocks,
                        ResidualBlock {
                            family,
                            weight: c.w_tc,
                            huber: huber_units,
                            r: DVector::from_column_slice(r.as_slice()),
                            jac,
                            origin,
                        },
                    );
                }
            }
        }
    }

    if let (Some(bv), true) = (p.constraints.boxes, c.w_bc > 0.0 && wants(Family::Bc)) {
        for (b, body) in p.bodies.iter().enumerate() {
            for (pi, &(i, j)) in body.pairs.iter().enumerate() {
                let (u, ublk): (&[f64], usize) = if bv.per_pair() {
                    (&body.pair_bounds[pi], layout.pair_bound[b][pi])
                } else {
                    (&body.shared_bound, layout.shared_bound[b].unwrap())
                };
                let r = residual_bc(bv, &body.points[i], &body.points[j], u, &c.delta)?;
                let jb = -bound_jacobian(bv, u, &c.delta);
                let jac = vec![
                    (layout.body_point[b][i], DMatrix::identity(3, 3)),
                    (layout.body_point[b][j], -DMatrix::identity(3, 3)),
                    (ublk, jb),
                ];
                push(
                    &mut blocks,
                    ResidualBlock {
                        family: Family::Bc,
                        weight: c.w_bc,
                        huber: huber_units,
                        r: DVector::from_column_slice(r.as_slice()),
                        jac,
                        origin: ublk,
                    },
                );
            }
        }
    }

    for blk in &blocks {
        if !blk.r.iter().all(|v| v.is_finite()) || !blk.jac.iter().all(|(_, m)| m.iter().all(|v| v.is_finite())) {
            return Err(Error::NumericalFailure {
                block: layout.label(blk.origin),
                what: "non-finite residual or Jacobian",
            });
        }
    }
    Ok(Evaluation {
        blocks,
        costs,
        skipped_depth: skipped,
    })
}

/// Applies a solver step to every free block.
pub(crate) fn apply_step(p: &BaProblem, layout: &Layout, offsets: &[usize], dx: &DVector<f64>) -> BaProblem {
    let mut out = p.clone();
    for (blk, kind) in layout.kinds.iter().enumerate() {
        let o = offsets[blk];
        let v3 = |s: usize| Vector3::new(dx[o + s], dx[o + s + 1], dx[o + s + 2]);
        match *kind {
            BlockKind::Camera(k) => out.camera_poses[k] = p.camera_poses[k].retract(&v3(0), &v3(3)),
            BlockKind::BodyPose(b, i) => out.bodies[b].poses[i] = p.bodies[b].poses[i].retract(&v3(0), &v3(3)),
            BlockKind::Static(i) => out.static_points[i] += v3(0),
            BlockKind::BodyPoint(b, i) => out.bodies[b].points[i] += v3(0),
            BlockKind::SharedBound(b) => {
                for (d, u) in out.bodies[b].shared_bound.iter_mut().enumerate() {
                    *u += dx[o + d];
                }
            }
            BlockKind::PairBound(b, i) => {
                for (d, u) in out.bodies[b].pair_bounds[i].iter_mut().enumerate() {
                    *u += dx[o + d];
                }
            }
        }
    }
    out
}

pub(crate) fn offsets(layout: &Layout) -> Vec<usize> {
    let mut o = Vec::with_capacity(layout.dims.len());
    let mut acc = 0;
    for d in &layout.dims {
        o.push(acc);
        acc += d;
    }
    o
}

impl BaProblem {
    pub fn validate(&self) -> Result<()> {
        let bad = |s: &str| Err(Error::ShapeMismatch(s.into()));
        if self.fixed_camera >= self.camera_poses.len() {
            return bad("fixed camera frame out of range");
        }
        if self.static_tracks.len() != self.static_points.len() {
            return bad("static track ids");
        }
        for body in &self.bodies {
            if body.poses.is_empty() || body.interpolated.len() != body.poses.len() {
                return bad("body poses");
            }
            if body.first_frame + body.poses.len() > self.camera_poses.len() {
                return Err(Error::MissingCameraPose(body.first_frame + body.poses.len() - 1));
            }
            if body.tracks.len() != body.points.len() {
                return bad("body track ids");
            }
            if body.pairs.iter().any(|&(i, j)| i == j || i >= body.points.len() || j >= body.points.len()) {
                return bad("box pair indices");
            }
        }
        for o in &self.observations {
            if o.frame >= self.camera_poses.len() {
                return Err(Error::MissingCameraPose(o.frame));
            }
            match o.point {
                PointRef::Static(i) if i >= self.static_points.len() => return bad("observation point"),
                PointRef::Body(b, i) => {
                    let Some(body) = self.bodies.get(b) else { return bad("observation body") };
                    if i >= body.points.len() {
                        return bad("observation point");
                    }
                    if body.pose(o.frame).is_none() {
                        return Err(Error::MismatchedBody(b, o.frame));
                    }
                }
                _ => {}
            }
        }
        Ok(())
    }

    /// Total objective and its per-family breakdown.
    pub fn cost(&self, config: &SolverConfig) -> Result<FamilyCosts> {
        let layout = Layout::new(self, config);
        Ok(evaluate(self, config, &layout, None, false)?.costs)
    }

    /// Initializes box-bound parameters at the clamped optimum for the
    /// current points, for the configured box variant.
    pub fn init_bounds(&mut self, delta: &Vector3<f64>) {
        let Some(v) = self.constraints.boxes else { return };
        for body in &mut self.bodies {
            let diffs: Vec<Vector3<f64>> = body.pairs.iter().map(|&(i, j)| body.points[i] - body.points[j]).collect();
            if v.per_pair() {
                body.pair_bounds = diffs.iter().map(|d| bound_init(v, &optimal_bound(v, d, delta), delta)).collect();
                body.shared_bound.clear();
            } else {
                body.pair_bounds.clear();
                let mean = if diffs.is_empty() {
                    Vector3::zeros()
                } else {
                    diffs.iter().sum::<Vector3<f64>>() / diffs.len() as f64
                };
                body.shared_bound = bound_init(v, &optimal_bound(v, &mean, delta), delta);
            }
        }
    }
}

impl BaProblem {
    /// Moves every per-pair bound to its closed-form optimum for the current
    /// points wherever that lowers the pair's residual. Each bound enters a
    /// single residual, so the objective never increases. Undoes steps that
    /// pushed a bound deep into the flat part of its reparameterization.
    pub fn reproject_bounds(&mut self, delta: &Vector3<f64>) -> usize {
        let Some(v) = self.constraints.boxes else { return 0 };
        if !v.per_pair() {
            return 0;
        }
        let mut moved = 0;
        for body in &mut self.bodies {
            for (&(i, j), u) in body.pairs.iter().zip(body.pair_bounds.iter_mut()) {
                let d = body.points[i] - body.points[j];
                let cand = bound_init(v, &optimal_bound(v, &d, delta), delta);
                let old = (d - bound_value(v, u, delta)).norm_squared();
                if (d - bound_value(v, &cand, delta)).norm_squared() < old {
                    *u = cand;
                    moved += 1;
                }
            }
        }
        moved
    }
}

/// Largest relative deviation between analytic and central-difference
/// Jacobians over all residual blocks of `family`.
pub fn jacobian_error(p: &BaProblem, config: &SolverConfig, family: Family, rel_step: f64) -> Result<f64> {
    let layout = Layout::new(p, config);
    let offs = offsets(&layout);
    let total: usize = layout.dims.iter().sum();
    let base = evaluate(p, config, &layout, Some(family), true)?;
    let mut worst = 0.0f64;
    // blocks touched by this family
    let mut touched: Vec<usize> = base.blocks.iter().flat_map(|b| b.jac.iter().map(|(k, _)| *k)).collect();
    touched.sort_unstable();
    touched.dedup();
    let mut numeric: Vec<Vec<(usize, DMatrix<f64>)>> = base
        .blocks
        .iter()
        .map(|b| b.jac.iter().map(|(k, m)| (*k, DMatrix::zeros(m.nrows(), m.ncols()))).collect())
        .collect();
    for &blk in &touched {
        for d in 0..layout.dims[blk] {
            let scale = param_scale(p, &layout, blk);
            let h = rel_step * scale;
            let mut dx = DVector::zeros(total);
            dx[offs[blk] + d] = h;
            let plus = evaluate(&apply_step(p, &layout, &offs, &dx), config, &layout, Some(family), false)?;
            dx[offs[blk] + d] = -h;
            let minus = evaluate(&apply_step(p, &layout, &offs, &dx), config, &layout, Some(family), false)?;
            if plus.blocks.len() != base.blocks.len() || minus.blocks.len() != base.blocks.len() {
                return Err(Error::NumericalFailure {
                    block: layout.label(blk),
                    what: "residual set changed under perturbation",
                });
            }
            for (ri, (bp, bm)) in plus.blocks.iter().zip(&minus.blocks).enumerate() {
                if let Some((_, m)) = numeric[ri].iter_mut().find(|(k, _)| *k == blk) {
                    let col = (&bp.r - &bm.r) / (2.0 * h);
                    m.set_column(d, &col);
                }
            }
        }
    }
    for (b, num) in base.blocks.iter().zip(&numeric) {
        for ((_, ja), (_, jn)) in b.jac.iter().zip(num) {
            let denom = jn.norm().max(ja.norm()).max(1e-8);
            worst = worst.max((ja - jn).norm() / denom);
        }
    }
    Ok(worst)
}

fn param_scale(p: &BaProblem, layout: &Layout, blk: usize) -> f64 {
    match layout.kinds[blk] {
        BlockKind::Camera(_) | BlockKind::BodyPose(..) => 1.0,
        BlockKind::Static(i) => p.static_points[i].amax().max(1.0),
        BlockKind::BodyPoint(b, i) => p.bodies[b].points[i].amax().max(1.0),
        BlockKind::SharedBound(_) | BlockKind::PairBound(..) => 1.0,
    }
}
