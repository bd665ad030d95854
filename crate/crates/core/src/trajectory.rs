//! Per-body trajectory initialization and world-frame object poses.
//!
//! A body's motion is first estimated "as if the camera were static": each
//! consecutive pair of frames is registered with RANSAC over 3D-3D feature
//! correspondences, and the relative motions are chained into virtual poses
//! `V_k` anchored at identity at the first frame. Combining the virtual
//! poses with the camera trajectory gives the object trajectory.

use alloc::collections::{BTreeMap, VecDeque};
use alloc::vec;
use alloc::vec::Vec;

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{ransac_registration, so3_exp, so3_log, RigidMotion};
use crate::rng::derive_seed;
use crate::segmentation::{JointLabeling, MOVING};
use crate::sim::Raster;

/// World-frame poses keyed by frame index.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    poses: Vec<(usize, RigidMotion)>,
}

impl Trajectory {
    pub fn new(poses: Vec<(usize, RigidMotion)>) -> Result<Self> {
        if poses.windows(2).any(|w| w[0].0 >= w[1].0) {
            return Err(Error::InvalidParameter("trajectory frames must increase"));
        }
        Ok(Self { poses })
    }

    pub fn from_contiguous(first_frame: usize, poses: Vec<RigidMotion>) -> Self {
        Self {
            poses: poses.into_iter().enumerate().map(|(i, p)| (first_frame + i, p)).collect(),
        }
    }

    pub fn poses(&self) -> &[(usize, RigidMotion)] {
        &self.poses
    }

    pub fn len(&self) -> usize {
        self.poses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.poses.is_empty()
    }

    pub fn get(&self, frame: usize) -> Option<&RigidMotion> {
        self.poses
            .binary_search_by_key(&frame, |(f, _)| *f)
            .ok()
            .map(|i| &self.poses[i].1)
    }

    pub fn frames(&self) -> impl Iterator<Item = usize> + '_ {
        self.poses.iter().map(|(f, _)| *f)
    }

    pub fn positions(&self) -> Vec<Vector3<f64>> {
        self.poses.iter().map(|(_, p)| p.translation).collect()
    }

    /// Positions of a body-fixed point along the trajectory.
    pub fn point_track(&self, body_point: &Vector3<f64>) -> Vec<Vector3<f64>> {
        self.poses.iter().map(|(_, p)| p.transform_point(body_point)).collect()
    }

    /// Every pose right-multiplied by `anchor`, i.e. the trajectory of a
    /// frame attached to the body at `anchor`.
    pub fn reanchored(&self, anchor: &RigidMotion) -> Trajectory {
        Trajectory {
            poses: self.poses.iter().map(|(f, p)| (*f, p.compose(anchor))).collect(),
        }
    }

    /// Every pose left-multiplied by `g` (a change of world frame).
    pub fn transformed(&self, g: &RigidMotion) -> Trajectory {
        Trajectory {
            poses: self.poses.iter().map(|(f, p)| (*f, g.compose(p))).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectTrack {
    pub body_id: usize,
    pub first_frame: usize,
    /// Virtual pose per frame from `first_frame`; maps first-frame camera
    /// coordinates of the body to frame-`k` camera coordinates.
    pub virtual_poses: Vec<RigidMotion>,
    /// Poses filled by constant-velocity extrapolation rather than measured.
    pub interpolated: Vec<bool>,
    pub member_tracks: Vec<u32>,
}

impl ObjectTrack {
    pub fn frames(&self) -> core::ops::Range<usize> {
        self.first_frame..self.first_frame + self.virtual_poses.len()
    }

    pub fn virtual_pose(&self, frame: usize) -> Option<&RigidMotion> {
        frame
            .checked_sub(self.first_frame)
            .and_then(|i| self.virtual_poses.get(i))
    }
}

/// Features of one body in one frame: `(track id, camera-frame point)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BodyFrame {
    pub frame: usize,
    pub points: Vec<(u32, Vector3<f64>)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InitParams {
    pub ransac_iters: usize,
    pub inlier_threshold: f64,
    /// Extrapolate through frames with too few features instead of failing.
    pub allow_gaps: bool,
}

impl Default for InitParams {
    fn default() -> Self {
        Self {
            ransac_iters: 200,
            inlier_threshold: 0.5,
            allow_gaps: false,
        }
    }
}

/// Cumulative poses `C_0 = I`, `C_i = D_i ∘ C_{i-1}`.
pub fn chain(relative: &[RigidMotion]) -> Vec<RigidMotion> {
    let mut out = Vec::with_capacity(relative.len() + 1);
    out.push(RigidMotion::identity());
    for d in relative {
        let next = d.compose(out.last().unwrap());
        out.push(next);
    }
    out
}

/// Inverse of [`chain`]: `D_i = C_i ∘ C_{i-1}⁻¹`.
pub fn unchain(cumulative: &[RigidMotion]) -> Vec<RigidMotion> {
    cumulative
        .windows(2)
        .map(|w| w[1].compose(&w[0].inverse()))
        .collect()
}

fn correspondences(a: &BodyFrame, b: &BodyFrame) -> Vec<(Vector3<f64>, Vector3<f64>)> {
    let index: BTreeMap<u32, Vector3<f64>> = a.points.iter().copied().collect();
    b.points
        .iter()
        .filter_map(|(id, q)| index.get(id).map(|p| (*p, *q)))
        .collect()
}

fn power(m: &RigidMotion, steps: usize) -> RigidMotion {
    (0..steps).fold(RigidMotion::identity(), |acc, _| m.compose(&acc))
}

/// Relative motion scaled to a single step of an `n`-step displacement.
fn root(m: &RigidMotion, n: usize) -> RigidMotion {
    if n <= 1 {
        return *m;
    }
    let omega = so3_log(&m.rotation) / n as f64;
    let r = so3_exp(&omega);
    // translation t_1 with Σ_{i<n} Rⁱ t_1 = t
    let mut sum = Matrix3::zeros();
    let mut ri = Matrix3::identity();
    for _ in 0..n {
        sum += ri;
        ri = r * ri;
    }
    let t = sum.try_inverse().map_or(m.translation / n as f64, |s| s * m.translation);
    RigidMotion::new(r, t)
}

/// Initializes a body's virtual trajectory from its per-frame features.
/// `frames` must cover consecutive frame indices.
pub fn init_body_trajectory(
    body_id: usize,
    frames: &[BodyFrame],
    params: &InitParams,
    seed: u64,
) -> Result<ObjectTrack> {
    if frames.len() < 2 {
        return Err(Error::InsufficientFeatures(frames.first().map_or(0, |f| f.frame)));
    }
    if frames.windows(2).any(|w| w[1].frame != w[0].frame + 1) {
        return Err(Error::InvalidParameter("body frames must be consecutive"));
    }
    let first_frame = frames[0].frame;
    let good = |f: &BodyFrame| f.points.len() >= 3;
    if !good(&frames[0]) {
        return Err(Error::InsufficientFeatures(first_frame));
    }
    if !params.allow_gaps {
        if let Some(bad) = frames.iter().find(|f| !good(f)) {
            return Err(Error::InsufficientFeatures(bad.frame));
        }
    }

    let mut poses = vec![RigidMotion::identity()];
    let mut interpolated = vec![false];
    let mut last_good = 0usize;
    let mut velocity = RigidMotion::identity();
    for i in 1..frames.len() {
        let frame_seed = derive_seed(seed, "trajectory/ransac") ^ frames[i].frame as u64;
        let registered = if good(&frames[i]) {
            let pairs = correspondences(&frames[last_good], &frames[i]);
            if pairs.len() >= 3 {
                match ransac_registration(&pairs, params.ransac_iters, params.inlier_threshold, frame_seed) {
                    Ok(reg) => Some(reg.motion),
                    Err(e) if !params.allow_gaps => return Err(e),
                    Err(_) => None,
                }
            } else if params.allow_gaps {
                None
            } else {
                return Err(Error::InsufficientFeatures(frames[i].frame));
            }
        } else {
            None
        };
        match registered {
            Some(d) => {
                let steps = i - last_good;
                // frames skipped since the last measurement are re-spaced evenly
                let step = root(&d, steps);
                for j in last_good + 1..i {
                    poses[j] = power(&step, j - last_good).compose(&poses[last_good]);
                }
                poses.push(d.compose(&poses[last_good]));
                interpolated.push(false);
                velocity = step;
                last_good = i;
            }
            None => {
                let prev = *poses.last().unwrap();
                poses.push(velocity.compose(&prev));
                interpolated.push(true);
            }
        }
    }

    let mut members: Vec<u32> = frames.iter().flat_map(|f| f.points.iter().map(|(id, _)| *id)).collect();
    members.sort_unstable();
    members.dedup();
    Ok(ObjectTrack {
        body_id,
        first_frame,
        virtual_poses: poses,
        interpolated,
        member_tracks: members,
    })
}

/// Camera-to-world trajectory from the virtual poses of the static scene,
/// with the world frame placed at the first camera.
pub fn camera_trajectory(static_track: &ObjectTrack) -> Trajectory {
    Trajectory::from_contiguous(
        static_track.first_frame,
        static_track.virtual_poses.iter().map(|v| v.inverse()).collect(),
    )
}

/// World-frame body poses `R_b = R_c⁻¹ R_v`, `T_b = R_c⁻¹ (T_v − T_c)`,
/// where `(R_c, T_c)` is the world-to-camera motion at each frame. The
/// returned poses map the body's reference frame (first-frame camera
/// coordinates) to the world.
pub fn object_pose_world(camera: &Trajectory, track: &ObjectTrack) -> Result<Trajectory> {
    let mut poses = Vec::with_capacity(track.virtual_poses.len());
    for (frame, v) in track.frames().zip(&track.virtual_poses) {
        let cam_to_world = camera.get(frame).ok_or(Error::MissingCameraPose(frame))?;
        let world_to_cam = cam_to_world.inverse();
        let rc_inv = world_to_cam.rotation.transpose();
        poses.push((
            frame,
            RigidMotion::new(rc_inv * v.rotation, rc_inv * (v.translation - world_to_cam.translation)),
        ));
    }
    Trajectory::new(poses)
}

/// Connected components (4-neighborhood) of moving cells with at least
/// `min_cells` cells, each as a sorted list of cell indices.
pub fn moving_components(labels: &JointLabeling, raster: &Raster, min_cells: usize) -> Vec<Vec<usize>> {
    let n = raster.len();
    let mut seen = vec![false; n];
    let mut out = Vec::new();
    for start in 0..n {
        if seen[start] || labels.motion[start] != MOVING {
            continue;
        }
        let mut comp = Vec::new();
        let mut queue = VecDeque::from([start]);
        seen[start] = true;
        while let Some(c) = queue.pop_front() {
            comp.push(c);
            let (x, y) = raster.coords(c);
            let mut push = |nx: usize, ny: usize| {
                let j = ny * raster.width + nx;
                if !seen[j] && labels.motion[j] == MOVING {
                    seen[j] = true;
                    queue.push_back(j);
                }
            };
            if x > 0 {
                push(x - 1, y);
            }
            if x + 1 < raster.width {
                push(x + 1, y);
            }
            if y > 0 {
                push(x, y - 1);
            }
            if y + 1 < raster.height {
                push(x, y + 1);
            }
        }
        if comp.len() >= min_cells {
            comp.sort_unstable();
            out.push(comp);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::{generate, ScenePreset, CLASS_CAR};
    use proptest::prelude::*;
    use std::vec;

    fn body_frames(
        points: &[Vector3<f64>],
        object: impl Fn(usize) -> RigidMotion,
        camera: impl Fn(usize) -> RigidMotion,
        frames: core::ops::Range<usize>,
    ) -> Vec<BodyFrame> {
        frames
            .map(|k| {
                let to_cam = camera(k).inverse().compose(&object(k));
                BodyFrame {
                    frame: k,
                    points: points
                        .iter()
                        .enumerate()
                        .map(|(i, p)| (i as u32, to_cam.transform_point(p)))
                        .collect(),
                }
            })
            .collect()
    }

    fn cube() -> Vec<Vector3<f64>> {
        let mut v = Vec::new();
        for i in 0..27 {
            v.push(Vector3::new((i % 3) as f64, ((i / 3) % 3) as f64, (i / 9) as f64) - Vector3::repeat(1.0));
        }
        v
    }

    fn cam_front() -> RigidMotion {
        RigidMotion::from_translation(Vector3::new(0.0, 0.0, -10.0))
    }

    #[test]
    fn static_body_stays_at_identity() {
        let frames = body_frames(&cube(), |_| RigidMotion::identity(), |_| cam_front(), 0..6);
        let t = init_body_trajectory(0, &frames, &InitParams::default(), 1).unwrap();
        for v in &t.virtual_poses {
            assert!(v.max_abs_diff(&RigidMotion::identity()) < 1e-9);
        }
    }

    #[test]
    fn translating_body_with_static_camera() {
        let frames = body_frames(
            &cube(),
            |k| RigidMotion::from_translation(Vector3::new(0.1 * k as f64, 0.0, 0.0)),
            |_| RigidMotion::identity(),
            3..13,
        );
        let t = init_body_trajectory(0, &frames, &InitParams::default(), 1).unwrap();
        assert_eq!(t.first_frame, 3);
        for (k, v) in t.frames().zip(&t.virtual_poses) {
            let expect = Vector3::new(0.1 * (k - 3) as f64, 0.0, 0.0);
            assert!((v.translation - expect).amax() < 1e-6);
            assert!((v.rotation - Matrix3::identity()).amax() < 1e-6);
        }
    }

    #[test]
    fn too_few_features() {
        let mut frames = body_frames(&cube(), |_| RigidMotion::identity(), |_| cam_front(), 0..4);
        frames[2].points.truncate(2);
        assert_eq!(
            init_body_trajectory(0, &frames, &InitParams::default(), 1).unwrap_err(),
            Error::InsufficientFeatures(2)
        );
    }

    #[test]
    fn gaps_extrapolate_and_are_flagged() {
        let step = RigidMotion::from_axis_angle(Vector3::new(0.0, 0.0, 0.02), Vector3::new(0.2, 0.0, 0.0));
        let object = |k: usize| power(&step, k);
        let mut frames = body_frames(&cube(), object, |_| cam_front(), 0..8);
        frames[4].points.clear();
        let params = InitParams { allow_gaps: true, ..InitParams::default() };
        let t = init_body_trajectory(0, &frames, &params, 1).unwrap();
        assert_eq!(t.interpolated, vec![false, false, false, false, true, false, false, false]);
        // constant velocity holds exactly, so even the extrapolated pose is right
        let truth = body_frames(&cube(), object, |_| cam_front(), 0..8);
        let exact = init_body_trajectory(0, &truth, &InitParams::default(), 1).unwrap();
        for (a, b) in t.virtual_poses.iter().zip(&exact.virtual_poses) {
            assert!(a.max_abs_diff(b) < 1e-9);
        }
    }

    #[test]
    fn eq9_static_camera_passes_virtual_poses_through() {
        let v = vec![
            RigidMotion::identity(),
            RigidMotion::from_axis_angle(Vector3::new(0.1, 0.2, 0.3), Vector3::new(1.0, 2.0, 3.0)),
        ];
        let track = ObjectTrack {
            body_id: 0,
            first_frame: 0,
            virtual_poses: v.clone(),
            interpolated: vec![false; 2],
            member_tracks: vec![],
        };
        let cam = Trajectory::from_contiguous(0, vec![RigidMotion::identity(); 2]);
        let out = object_pose_world(&cam, &track).unwrap();
        for ((_, b), v) in out.poses().iter().zip(&v) {
            assert!(b.max_abs_diff(v) < 1e-15);
        }
    }

    #[test]
    fn eq9_static_object_moving_camera() {
        // (R_c, T_c) world-to-camera; substituting R_v = I, T_v = 0 gives
        // R_b = R_c⁻¹ and T_b = −R_c⁻¹ T_c.
        let rc = so3_exp(&Vector3::new(0.0, 0.3, 0.0));
        let tc = Vector3::new(0.5, -1.0, 2.0);
        let extrinsic = RigidMotion::new(rc, tc);
        let cam = Trajectory::from_contiguous(4, vec![extrinsic.inverse()]);
        let track = ObjectTrack {
            body_id: 0,
            first_frame: 4,
            virtual_poses: vec![RigidMotion::identity()],
            interpolated: vec![false],
            member_tracks: vec![],
        };
        let out = object_pose_world(&cam, &track).unwrap();
        let b = out.get(4).unwrap();
        assert!((b.translation - (-rc.transpose() * tc)).amax() < 1e-12);
        assert!((b.rotation - rc.transpose()).amax() < 1e-12);

        let missing = Trajectory::from_contiguous(0, vec![RigidMotion::identity()]);
        assert_eq!(object_pose_world(&missing, &track), Err(Error::MissingCameraPose(4)));
    }

    #[test]
    fn recovers_simulated_object_trajectory() {
        let config = ScenePreset {
            frames: 12,
            noise_sigma_points: 0.0,
            noise_sigma_ground: None,
            noise_sigma_pixels: 0.0,
            ..ScenePreset::default()
        }
        .build(3)
        .unwrap();
        let (gt, obs) = generate(&config).unwrap();
        let split = |want_car: bool| -> Vec<BodyFrame> {
            obs.iter()
                .map(|f| BodyFrame {
                    frame: f.frame,
                    points: f
                        .features
                        .iter()
                        .filter(|x| (gt.point(x.track_id).unwrap().class == CLASS_CAR) == want_car)
                        .map(|x| (x.track_id, x.point_camera))
                        .collect(),
                })
                .collect()
        };
        let stat = init_body_trajectory(0, &split(false), &InitParams::default(), 7).unwrap();
        let camera = camera_trajectory(&stat);
        let car = init_body_trajectory(1, &split(true), &InitParams::default(), 8).unwrap();
        let body = object_pose_world(&camera, &car).unwrap();

        // the estimated world is the first camera frame
        let g = gt.camera_poses[0];
        for (k, cam) in camera.poses() {
            assert!(g.compose(cam).max_abs_diff(&gt.camera_poses[*k]) < 1e-6);
        }
        // body reference = first-frame camera coordinates of the object
        let anchor = gt.camera_poses[0].inverse().compose(&gt.object_poses[0]);
        for (k, b) in body.poses() {
            let truth = gt.object_poses[*k];
            let est = g.compose(b).compose(&anchor);
            assert!(est.max_abs_diff(&truth) < 1e-6, "frame {k}");
        }
    }

    #[test]
    fn components_respect_minimum_size() {
        let raster = Raster { width: 8, height: 4, image_width: 80, image_height: 40 };
        let mut motion = vec![0; 32];
        for y in 0..3 {
            for x in 0..3 {
                motion[y * 8 + x] = MOVING;
            }
        }
        motion[7] = MOVING;
        motion[15] = MOVING;
        let labels = JointLabeling { object: vec![0; 32], motion };
        let comps = moving_components(&labels, &raster, 2);
        assert_eq!(comps.len(), 2);
        assert_eq!(comps[0].len(), 9);
        assert_eq!(comps[1], vec![7, 15]);
        assert_eq!(moving_components(&labels, &raster, 3).len(), 1);
    }

    fn motion_strategy() -> impl Strategy<Value = RigidMotion> {
        (prop::array::uniform3(-1.0..1.0f64), prop::array::uniform3(-5.0..5.0f64))
            .prop_map(|(w, t)| RigidMotion::from_axis_angle(Vector3::from(w), Vector3::from(t)))
    }

    proptest! {
        #[test]
        fn chain_unchain_round_trip(rel in prop::collection::vec(motion_strategy(), 1..10)) {
            let back = unchain(&chain(&rel));
            for (a, b) in back.iter().zip(&rel) {
                prop_assert!(a.max_abs_diff(b) < 1e-9);
            }
        }

        #[test]
        fn world_pose_equivariant_under_reanchoring(
            g in motion_strategy(),
            cams in prop::collection::vec(motion_strategy(), 3),
            virt in prop::collection::vec(motion_strategy(), 3),
        ) {
            let track = ObjectTrack {
                body_id: 0,
                first_frame: 0,
                virtual_poses: virt,
                interpolated: vec![false; 3],
                member_tracks: vec![],
            };
            let cam = Trajectory::from_contiguous(0, cams);
            let base = object_pose_world(&cam, &track).unwrap();
            let moved = object_pose_world(&cam.transformed(&g), &track).unwrap();
            for ((_, a), (_, b)) in base.transformed(&g).poses().iter().zip(moved.poses()) {
                prop_assert!(a.max_abs_diff(b) < 1e-9);
            }
        }
    }
}
