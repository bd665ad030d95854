//! The full chain: simulate, segment, group tracks into bodies, initialize
//! trajectories, refine with bundle adjustment, evaluate.
//!
//! Every stage is a pure function of its inputs and a seed, and every
//! intermediate result is serializable, so stages can be run separately
//! and resumed from disk.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use nalgebra::Vector3;
#[allow(unused_imports)]
use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::ba::normal::{fit_ground_normal, NormalMethod};
use crate::ba::sampling::{sample_pairs, SamplingPlan, Strategy};
use crate::ba::{solve, BaProblem, BodyBlock, ConstraintSet, Observation, PointRef, SolveReport, SolverConfig};
use crate::error::{Error, Result};
use crate::evaluation::{ate_with, TrajectoryReport, DEFAULT_BIN_WIDTH};
use crate::geometry::{ransac_registration, FlowCovariance, RigidMotion};
use crate::rng::derive_seed;
use crate::segmentation::{
    decode, flow_field, mean_field_infer, motion_unary, CompatibilityMatrix, CrfGraph, GridFeatures, JointLabeling,
    LabelSpace, PairwiseParams, UnaryField,
};
use crate::sim::{self, corrupt_unaries_with, render_appearance, FrameObservation, GroundTruthBundle, SceneConfig};
use crate::trajectory::{camera_trajectory, init_body_trajectory, moving_components, BodyFrame, InitParams, Trajectory};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SegmentationConfig {
    pub labels: LabelSpace,
    pub compatibility: CompatibilityMatrix,
    pub pairwise: PairwiseParams,
    /// Label-confusion rate of the simulated object-class unaries.
    pub flip_rate: f64,
    /// Cost of a non-observed class in the simulated unaries.
    pub class_cost: f64,
    /// Noise of the simulated per-cell appearance.
    pub appearance_sigma: f64,
    /// Flow residual standard deviation (pixels).
    pub flow_sigma: f64,
    /// Constant cost of the moving label.
    pub tau: f64,
    /// RANSAC inlier distance for the frame-to-frame camera motion. Kept
    /// below the object's per-frame displacement so the object does not
    /// drag the fit.
    pub ego_inlier_threshold: f64,
    pub max_iters: usize,
    pub tolerance: f64,
    /// Moving components smaller than this (cells) are discarded.
    pub min_component_cells: usize,
    /// Bodies with fewer member tracks are discarded.
    pub min_body_tracks: usize,
}

impl Default for SegmentationConfig {
    fn default() -> Self {
        let labels = LabelSpace::default();
        Self {
            compatibility: CompatibilityMatrix::zeros(labels.len()),
            labels,
            pairwise: PairwiseParams::default(),
            flip_rate: 0.1,
            class_cost: 2.0,
            appearance_sigma: 0.05,
            flow_sigma: 1.0,
            tau: 4.0,
            ego_inlier_threshold: 0.5,
            max_iters: 10,
            tolerance: 1e-4,
            min_component_cells: 20,
            min_body_tracks: 10,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplingConfig {
    pub strategy: Strategy,
    pub n_constraints: usize,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        Self {
            strategy: Strategy::Strat3,
            n_constraints: 1000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    /// When false every feature is treated as static.
    pub motion_segmentation: bool,
    pub segmentation: SegmentationConfig,
    pub init: InitParams,
    pub normal: NormalMethod,
    pub constraints: ConstraintSet,
    pub sampling: SamplingConfig,
    pub solver: SolverConfig,
    /// Tracks seen in fewer frames are not reconstructed.
    pub min_track_frames: usize,
    pub histogram_bin_width: f64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            motion_segmentation: true,
            segmentation: SegmentationConfig::default(),
            init: InitParams {
                ransac_iters: 200,
                inlier_threshold: 1.5,
                allow_gaps: true,
            },
            normal: NormalMethod::Lsq,
            constraints: ConstraintSet::default(),
            sampling: SamplingConfig::default(),
            solver: SolverConfig::default(),
            min_track_frames: 2,
            histogram_bin_width: DEFAULT_BIN_WIDTH,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |f: &str| Err(Error::ConfigInvalid(f.into()));
        self.solver.validate()?;
        self.segmentation.labels.validate()?;
        self.segmentation.compatibility.validate()?;
        let s = &self.segmentation;
        if s.compatibility.values.len() != s.labels.len() {
            return bad("segmentation.compatibility");
        }
        if !(0.0..1.0).contains(&s.flip_rate) {
            return bad("segmentation.flip_rate");
        }
        if !(s.flow_sigma > 0.0) {
            return bad("segmentation.flow_sigma");
        }
        if !(s.ego_inlier_threshold > 0.0) {
            return bad("segmentation.ego_inlier_threshold");
        }
        if s.max_iters == 0 || !(s.tolerance > 0.0) {
            return bad("segmentation.max_iters");
        }
        if !(self.init.inlier_threshold > 0.0) || self.init.ransac_iters == 0 {
            return bad("init");
        }
        if self.constraints.boxes.is_some() && self.sampling.n_constraints == 0 {
            return bad("sampling.n_constraints");
        }
        if let NormalMethod::RansacTopM { m, iterations, threshold } = self.normal {
            if m == 0 || iterations < m || !(threshold > 0.0) {
                return bad("normal");
            }
        }
        if self.min_track_frames < 2 {
            return bad("min_track_frames");
        }
        if !(self.histogram_bin_width > 0.0) {
            return bad("histogram_bin_width");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub config: SceneConfig,
    pub ground_truth: GroundTruthBundle,
    pub frames: Vec<FrameObservation>,
}

pub fn simulate(config: &SceneConfig) -> Result<Scene> {
    let (ground_truth, frames) = sim::generate(config)?;
    Ok(Scene {
        config: config.clone(),
        ground_truth,
        frames,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Assignment {
    Static,
    Body(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameLabels {
    pub frame: usize,
    pub labeling: JointLabeling,
    /// Camera motion to the next frame used for the motion unaries.
    pub ego_motion: Option<RigidMotion>,
    pub iterations: usize,
    pub converged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Segmentation {
    pub frames: Vec<FrameLabels>,
    /// Per track: its body (or static) and its majority object class.
    pub tracks: BTreeMap<u32, (Assignment, usize)>,
}

fn pairs_between(a: &FrameObservation, b: &FrameObservation) -> Vec<(Vector3<f64>, Vector3<f64>)> {
    let index: BTreeMap<u32, Vector3<f64>> = b.features.iter().map(|f| (f.track_id, f.point_camera)).collect();
    a.features
        .iter()
        .filter_map(|f| index.get(&f.track_id).map(|q| (f.point_camera, *q)))
        .collect()
}

fn label_frame(
    scene: &Scene,
    k: usize,
    config: &PipelineConfig,
    seed: u64,
) -> Result<FrameLabels> {
    let s = &config.segmentation;
    let gt = &scene.ground_truth;
    let raster = &scene.config.raster;
    let frame = &scene.frames[k];
    let ego = match scene.frames.get(k + 1) {
        Some(next) => {
            let pairs = pairs_between(frame, next);
            let reg = ransac_registration(
                &pairs,
                config.init.ransac_iters,
                s.ego_inlier_threshold,
                derive_seed(seed, &format!("segment/ego/{k}")),
            )?;
            Some(reg.motion)
        }
        None => None,
    };
    let object = corrupt_unaries_with(gt, k, &s.labels, s.flip_rate, s.class_cost, derive_seed(seed, "segment/unaries"))?;
    let motion = match &ego {
        Some(m) => motion_unary(
            frame,
            m,
            &scene.config.intrinsics,
            &FlowCovariance::isotropic(s.flow_sigma * s.flow_sigma)?,
            raster,
            s.tau,
        )?,
        None => vec![[0.0, 0.0]; raster.len()],
    };
    let unary = UnaryField {
        object: object.object,
        motion,
    };
    let grid = GridFeatures {
        width: raster.width,
        height: raster.height,
        appearance: render_appearance(gt, k, s.appearance_sigma, derive_seed(seed, "segment/appearance")),
        flow: flow_field(frame, raster),
    };
    let graph = CrfGraph::from_grid(&grid, &s.pairwise);
    let mf = mean_field_infer(&unary, &s.compatibility, &graph, s.max_iters, s.tolerance)?;
    Ok(FrameLabels {
        frame: k,
        labeling: decode(&mf.marginals),
        ego_motion: ego,
        iterations: mf.iterations,
        converged: mf.converged,
    })
}

fn find(parent: &mut BTreeMap<u32, u32>, x: u32) -> u32 {
    let mut r = x;
    while let Some(&p) = parent.get(&r) {
        if p == r {
            break;
        }
        r = p;
    }
    // path compression
    let mut y = x;
    while y != r {
        let next = parent[&y];
        parent.insert(y, r);
        y = next;
    }
    r
}

/// Labels every frame and assigns tracks to the static scene or to a body.
pub fn segment(scene: &Scene, config: &PipelineConfig, seed: u64) -> Result<Segmentation> {
    config.validate()?;
    let raster = &scene.config.raster;
    let n_classes = config.segmentation.labels.len();
    let frames: Vec<FrameLabels> = (0..scene.frames.len())
        .map(|k| label_frame(scene, k, config, seed))
        .collect::<Result<_>>()?;

    // per track: (moving votes, voting frames, class histogram)
    let mut votes: BTreeMap<u32, (usize, usize, Vec<usize>)> = BTreeMap::new();
    let mut parent: BTreeMap<u32, u32> = BTreeMap::new();
    for (obs, fl) in scene.frames.iter().zip(&frames) {
        let comps = moving_components(&fl.labeling, raster, config.segmentation.min_component_cells);
        let mut comp_of = vec![usize::MAX; raster.len()];
        for (c, cells) in comps.iter().enumerate() {
            for &cell in cells {
                comp_of[cell] = c;
            }
        }
        let mut first_in: BTreeMap<usize, u32> = BTreeMap::new();
        for f in &obs.features {
            let Some(cell) = raster.cell_of(&f.pixel) else { continue };
            let v = votes.entry(f.track_id).or_insert_with(|| (0, 0, vec![0; n_classes]));
            v.2[fl.labeling.object[cell]] += 1;
            // the last frame has no flow, so it does not vote on motion
            if fl.ego_motion.is_none() {
                continue;
            }
            v.1 += 1;
            let c = comp_of[cell];
            if c == usize::MAX {
                continue;
            }
            v.0 += 1;
            parent.entry(f.track_id).or_insert(f.track_id);
            match first_in.get(&c) {
                Some(&root) => {
                    let (a, b) = (find(&mut parent, root), find(&mut parent, f.track_id));
                    if a != b {
                        parent.insert(a.max(b), a.min(b));
                    }
                }
                None => {
                    first_in.insert(c, f.track_id);
                }
            }
        }
    }

    let mut groups: BTreeMap<u32, Vec<u32>> = BTreeMap::new();
    let mut classes = BTreeMap::new();
    for (&id, (mv, total, hist)) in &votes {
        let class = (0..n_classes).fold(0, |best, c| if hist[c] > hist[best] { c } else { best });
        classes.insert(id, class);
        if config.motion_segmentation && 2 * mv > *total {
            let root = find(&mut parent, id);
            groups.entry(root).or_default().push(id);
        }
    }
    let mut tracks: BTreeMap<u32, (Assignment, usize)> =
        classes.iter().map(|(&id, &c)| (id, (Assignment::Static, c))).collect();
    let mut body = 0;
    for members in groups.values() {
        if members.len() < config.segmentation.min_body_tracks {
            // too small to reconstruct: drop rather than pollute the static scene
            for id in members {
                tracks.remove(id);
            }
            continue;
        }
        for id in members {
            tracks.get_mut(id).unwrap().0 = Assignment::Body(body);
        }
        body += 1;
    }
    Ok(Segmentation { frames, tracks })
}

/// Per-frame features of the given tracks, one entry per frame in range.
fn body_frames(scene: &Scene, members: &BTreeSet<u32>, range: core::ops::Range<usize>) -> Vec<BodyFrame> {
    range
        .map(|k| BodyFrame {
            frame: k,
            points: scene.frames[k]
                .features
                .iter()
                .filter(|f| members.contains(&f.track_id))
                .map(|f| (f.track_id, f.point_camera))
                .collect(),
        })
        .collect()
}

struct BodyInit {
    first_frame: usize,
    /// First-frame camera coordinates to frame-k camera coordinates.
    virtual_poses: Vec<RigidMotion>,
    interpolated: Vec<bool>,
}

fn init_members(scene: &Scene, members: &BTreeSet<u32>, id: usize, params: &InitParams, seed: u64) -> Result<BodyInit> {
    let counts: Vec<usize> = scene
        .frames
        .iter()
        .map(|f| f.features.iter().filter(|x| members.contains(&x.track_id)).count())
        .collect();
    let first = counts.iter().position(|&c| c >= 3).ok_or(Error::InsufficientFeatures(0))?;
    let last = counts.iter().rposition(|&c| c >= 3).unwrap();
    if last == first {
        return Err(Error::InsufficientFeatures(first + 1));
    }
    let track = init_body_trajectory(id, &body_frames(scene, members, first..last + 1), params, seed)?;
    Ok(BodyInit {
        first_frame: first,
        virtual_poses: track.virtual_poses,
        interpolated: track.interpolated,
    })
}

/// Mean of a track's measurements mapped into a common frame, with the RMS
/// spread around it. `to_common(frame, x)` returns `None` outside the
/// model's support.
fn fit_track(
    scene: &Scene,
    id: u32,
    to_common: &dyn Fn(usize, &Vector3<f64>) -> Option<Vector3<f64>>,
) -> Option<(Vector3<f64>, f64, usize)> {
    let mut pts = Vec::new();
    for f in &scene.frames {
        for x in f.features.iter().filter(|x| x.track_id == id) {
            pts.push(to_common(f.frame, &x.point_camera)?);
        }
    }
    if pts.is_empty() {
        return None;
    }
    let mean = pts.iter().sum::<Vector3<f64>>() / pts.len() as f64;
    let rms = (pts.iter().map(|p| (p - mean).norm_squared()).sum::<f64>() / pts.len() as f64).sqrt();
    Some((mean, rms, pts.len()))
}

const REASSIGN_PASSES: usize = 3;
/// Tracks seen in fewer frames (or in fewer than all frames of a shorter
/// sequence) are too weak to support a body: they stay static if labeled
/// so and are dropped otherwise.
const REASSIGN_MIN_FRAMES: usize = 5;

/// Initial guess for the refinement problem: camera and body trajectories
/// from 3D-3D registration chains, points from averaged measurements.
pub fn initialize(scene: &Scene, seg: &Segmentation, config: &PipelineConfig, seed: u64) -> Result<BaProblem> {
    config.validate()?;
    let n_frames = scene.frames.len();
    let mut static_set: BTreeSet<u32> =
        seg.tracks.iter().filter(|(_, a)| a.0 == Assignment::Static).map(|(id, _)| *id).collect();
    let mut body_sets: BTreeMap<usize, BTreeSet<u32>> = BTreeMap::new();
    for (&id, &(a, _)) in &seg.tracks {
        if let Assignment::Body(b) = a {
            body_sets.entry(b).or_default().insert(id);
        }
    }

    let init_camera = |set: &BTreeSet<u32>| -> Result<Vec<RigidMotion>> {
        let st = init_members(scene, set, usize::MAX, &config.init, derive_seed(seed, "init/camera"))?;
        if st.first_frame != 0 || st.virtual_poses.len() != n_frames {
            return Err(Error::InsufficientFeatures(if st.first_frame != 0 { 0 } else { st.virtual_poses.len() }));
        }
        let track = crate::trajectory::ObjectTrack {
            body_id: usize::MAX,
            first_frame: 0,
            virtual_poses: st.virtual_poses,
            interpolated: st.interpolated,
            member_tracks: Vec::new(),
        };
        Ok(camera_trajectory(&track).poses().iter().map(|p| p.1).collect())
    };
    let init_bodies = |sets: &BTreeMap<usize, BTreeSet<u32>>| -> Vec<(usize, BodyInit)> {
        sets.iter()
            .filter_map(|(&b, set)| {
                init_members(scene, set, b, &config.init, derive_seed(seed, &format!("init/body/{b}")))
                    .ok()
                    .map(|init| (b, init))
            })
            .collect()
    };

    let mut cameras = init_camera(&static_set)?;
    let mut bodies = init_bodies(&body_sets);

    // Reassign tracks to whichever motion model explains them best, and
    // refit the models; the first models come from contaminated sets, so
    // repeat until the assignment settles.
    for _ in 0..REASSIGN_PASSES {
        if bodies.is_empty() {
            break;
        }
        let mut new_static = BTreeSet::new();
        let mut new_bodies: BTreeMap<usize, BTreeSet<u32>> = BTreeMap::new();
        for (&id, &(label, _)) in &seg.tracks {
            let cams = &cameras;
            let static_fit = fit_track(scene, id, &|k, x| Some(cams[k].transform_point(x)));
            let short = static_fit.is_none_or(|(_, _, n)| n < REASSIGN_MIN_FRAMES.min(n_frames));
            let mut best: Option<(f64, Assignment)> = static_fit.map(|(_, rms, _)| (rms, Assignment::Static));
            if short && label != Assignment::Static {
                continue;
            }
            for (b, init) in bodies.iter().filter(|_| !short) {
                let fit = fit_track(scene, id, &|k, x| {
                    let i = k.checked_sub(init.first_frame)?;
                    let v = init.virtual_poses.get(i)?;
                    Some(v.inverse().transform_point(x))
                });
                if let Some((_, rms, _)) = fit {
                    if best.is_none_or(|(r, _)| rms < r) {
                        best = Some((rms, Assignment::Body(*b)));
                    }
                }
            }
            match best.map(|b| b.1) {
                Some(Assignment::Static) => {
                    new_static.insert(id);
                }
                Some(Assignment::Body(b)) => {
                    new_bodies.entry(b).or_default().insert(id);
                }
                None => {}
            }
        }
        if new_static == static_set && new_bodies == body_sets {
            break;
        }
        static_set = new_static;
        body_sets = new_bodies;
        cameras = init_camera(&static_set)?;
        bodies = init_bodies(&body_sets);
    }

    let mut static_points = Vec::new();
    let mut static_tracks = Vec::new();
    let mut static_index = BTreeMap::new();
    for &id in &static_set {
        let Some((mean, _, n)) = fit_track(scene, id, &|k, x| Some(cameras[k].transform_point(x))) else {
            continue;
        };
        if n < config.min_track_frames {
            continue;
        }
        static_index.insert(id, static_points.len());
        static_points.push(mean);
        static_tracks.push(id);
    }

    let mut blocks = Vec::new();
    let mut body_index: BTreeMap<u32, (usize, usize)> = BTreeMap::new();
    for (b, init) in &bodies {
        let bi = blocks.len();
        let mut points = Vec::new();
        let mut tracks = Vec::new();
        for &id in body_sets.get(b).into_iter().flatten() {
            let fit = fit_track(scene, id, &|k, x| {
                let i = k.checked_sub(init.first_frame)?;
                if *init.interpolated.get(i)? {
                    return Some(Vector3::repeat(f64::NAN));
                }
                Some(init.virtual_poses[i].inverse().transform_point(x))
            });
            let Some((mean, _, n)) = fit else { continue };
            if n < config.min_track_frames || !mean.iter().all(|v| v.is_finite()) {
                continue;
            }
            body_index.insert(id, (bi, points.len()));
            points.push(mean);
            tracks.push(id);
        }
        if points.len() < 3 {
            continue;
        }
        let anchor = points.iter().sum::<Vector3<f64>>() / points.len() as f64;
        blocks.push(BodyBlock {
            id: *b,
            first_frame: init.first_frame,
            poses: init.virtual_poses.clone(),
            interpolated: init.interpolated.clone(),
            points,
            tracks,
            anchor,
            pairs: Vec::new(),
            pair_bounds: Vec::new(),
            shared_bound: Vec::new(),
        });
    }
    // drop index entries of discarded bodies
    body_index.retain(|_, (bi, _)| *bi < blocks.len() && blocks[*bi].tracks.len() >= 3);

    let mut observations = Vec::new();
    for f in &scene.frames {
        for x in &f.features {
            let point = if let Some(&i) = static_index.get(&x.track_id) {
                PointRef::Static(i)
            } else if let Some(&(b, i)) = body_index.get(&x.track_id) {
                if blocks[b].pose(f.frame).is_none() {
                    continue;
                }
                PointRef::Body(b, i)
            } else {
                continue;
            };
            observations.push(Observation {
                frame: f.frame,
                point,
                pixel: x.pixel,
                measured: x.point_camera,
            });
        }
    }

    let normals = if config.constraints.normal.is_some() {
        let ground: Vec<Vector3<f64>> = static_tracks
            .iter()
            .zip(&static_points)
            .filter(|(id, _)| seg.tracks.get(id).is_some_and(|a| a.1 == sim::CLASS_ROAD))
            .map(|(_, p)| *p)
            .collect();
        fit_ground_normal(&ground, &config.normal, derive_seed(seed, "init/normal"))?
    } else {
        Vec::new()
    };

    let mut problem = BaProblem {
        intrinsics: scene.config.intrinsics,
        camera_poses: cameras,
        fixed_camera: 0,
        static_points,
        static_tracks,
        bodies: blocks,
        observations,
        normals,
        constraints: config.constraints,
    };
    if config.constraints.boxes.is_some() {
        for body in &mut problem.bodies {
            let plan = SamplingPlan {
                strategy: config.sampling.strategy,
                n_constraints: config.sampling.n_constraints,
                seed: derive_seed(seed, &format!("pairs/{}", body.id)),
            };
            body.pairs = sample_pairs(&body.points, &plan)?;
        }
        problem.init_bounds(&config.solver.delta);
    }
    problem.validate()?;
    Ok(problem)
}

pub fn refine(problem: &BaProblem, config: &PipelineConfig) -> Result<(BaProblem, SolveReport)> {
    solve(problem, &config.solver)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BodyReport {
    pub body: usize,
    pub tracks: usize,
    pub report: TrajectoryReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub camera: TrajectoryReport,
    pub bodies: Vec<BodyReport>,
}

impl EvaluationReport {
    /// Object error of the body with the most tracks, if any.
    pub fn main_body(&self) -> Option<&TrajectoryReport> {
        self.bodies.iter().max_by_key(|b| b.tracks).map(|b| &b.report)
    }
}

pub fn camera_estimate(problem: &BaProblem) -> Trajectory {
    Trajectory::from_contiguous(0, problem.camera_poses.clone())
}

/// World trajectory of the centroid of a body's current points.
pub fn body_estimate(problem: &BaProblem, body: &BodyBlock) -> Trajectory {
    let c = body.points.iter().sum::<Vector3<f64>>() / body.points.len().max(1) as f64;
    let poses = body
        .world_poses(&problem.camera_poses)
        .into_iter()
        .map(|(k, b)| (k, RigidMotion::new(b.rotation, b.transform_point(&c))))
        .collect();
    Trajectory::new(poses).expect("body frames are increasing")
}

/// Compares camera and body trajectories with the simulator's. A body is
/// scored by the motion of the ground-truth centroid of its member points.
pub fn evaluate(gt: &GroundTruthBundle, problem: &BaProblem, bin_width: f64) -> Result<EvaluationReport> {
    let reference = Trajectory::from_contiguous(0, gt.camera_poses.clone());
    let camera = ate_with(&camera_estimate(problem), &reference, bin_width)?;
    let mut bodies = Vec::new();
    for body in &problem.bodies {
        let members: Vec<Vector3<f64>> = body
            .tracks
            .iter()
            .filter_map(|&id| gt.point(id))
            .filter(|p| p.class == sim::CLASS_CAR)
            .map(|p| p.position)
            .collect();
        if members.is_empty() {
            continue;
        }
        let c = members.iter().sum::<Vector3<f64>>() / members.len() as f64;
        let reference = Trajectory::new(
            body.frames()
                .map(|k| (k, RigidMotion::new(gt.object_poses[k].rotation, gt.object_poses[k].transform_point(&c))))
                .collect(),
        )?;
        bodies.push(BodyReport {
            body: body.id,
            tracks: body.tracks.len(),
            report: ate_with(&body_estimate(problem, body), &reference, bin_width)?,
        });
    }
    Ok(EvaluationReport { camera, bodies })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunOutput {
    pub segmentation: Segmentation,
    pub initial: BaProblem,
    pub refined: BaProblem,
    pub solve: SolveReport,
    pub initial_evaluation: EvaluationReport,
    pub evaluation: EvaluationReport,
}

/// All stages after simulation.
pub fn run(scene: &Scene, config: &PipelineConfig, seed: u64) -> Result<RunOutput> {
    let segmentation = segment(scene, config, seed)?;
    let initial = initialize(scene, &segmentation, config, seed)?;
    let initial_evaluation = evaluate(&scene.ground_truth, &initial, config.histogram_bin_width)?;
    let (refined, solve) = refine(&initial, config)?;
    let evaluation = evaluate(&scene.ground_truth, &refined, config.histogram_bin_width)?;
    Ok(RunOutput {
        segmentation,
        initial,
        refined,
        solve,
        initial_evaluation,
        evaluation,
    })
}

/// Fraction of segmented tracks whose static/moving assignment matches
/// the simulator.
pub fn segmentation_accuracy(scene: &Scene, seg: &Segmentation) -> f64 {
    let (mut ok, mut n) = (0usize, 0usize);
    for (&id, &(a, _)) in &seg.tracks {
        if let Some(p) = scene.ground_truth.point(id) {
            n += 1;
            if p.moving == matches!(a, Assignment::Body(_)) {
                ok += 1;
            }
        }
    }
    if n == 0 {
        0.0
    } else {
        ok as f64 / n as f64
    }
}
