//! Synthetic dynamic scene: a cube ("car") resting on a planar ground
//! ("road"), observed by an independently moving stereo camera.
//!
//! World frame is z-up with the ground at `z = 0`. Camera and object paths
//! are body-to-world poses; the object frame has its origin at the cube
//! center. Every point is observed in every frame where it lies in front of
//! the camera and inside the image; correspondences are known through track
//! ids.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use nalgebra::{Matrix3, Vector2, Vector3};
#[allow(unused_imports)]
use num_traits::Float;
use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{CameraIntrinsics, RigidMotion};
use crate::rng;
use crate::segmentation::{LabelSpace, UnaryField};

pub const CLASS_ROAD: usize = 0;
pub const CLASS_CAR: usize = 1;
pub const CLASS_VEGETATION: usize = 2;
pub const CLASS_SKY: usize = 3;

/// Nearest camera-frame depth at which a point is still observed.
pub const NEAR_PLANE: f64 = 0.5;

/// How 3D measurement noise is drawn.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PointNoiseModel {
    /// Fresh camera-frame noise for every observation.
    #[default]
    PerFrame,
    /// A fixed offset per point (in the point's own body frame), so the
    /// measured shape is distorted but moves rigidly.
    PerPoint,
}

/// Coarse label grid the CRF runs on; features map to cells by
/// nearest-neighbor rasterization.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Raster {
    pub width: usize,
    pub height: usize,
    pub image_width: usize,
    pub image_height: usize,
}

impl Raster {
    pub fn len(&self) -> usize {
        self.width * self.height
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn cell_size(&self) -> (f64, f64) {
        (
            self.image_width as f64 / self.width as f64,
            self.image_height as f64 / self.height as f64,
        )
    }

    pub fn cell_of(&self, pixel: &Vector2<f64>) -> Option<usize> {
        let (sx, sy) = self.cell_size();
        if !(pixel.x >= 0.0 && pixel.y >= 0.0) {
            return None;
        }
        let cx = (pixel.x / sx).floor() as usize;
        let cy = (pixel.y / sy).floor() as usize;
        (cx < self.width && cy < self.height).then(|| cy * self.width + cx)
    }

    pub fn cell_center(&self, idx: usize) -> Vector2<f64> {
        let (sx, sy) = self.cell_size();
        let (cx, cy) = (idx % self.width, idx / self.width);
        Vector2::new((cx as f64 + 0.5) * sx, (cy as f64 + 0.5) * sy)
    }

    /// Grid coordinates `(column, row)` of a cell.
    pub fn coords(&self, idx: usize) -> (usize, usize) {
        (idx % self.width, idx / self.width)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneConfig {
    pub n_cube_points: usize,
    pub cube_side: f64,
    pub n_ground_points: usize,
    pub ground_extent: f64,
    /// Camera-to-world pose per frame.
    pub camera_path: Vec<RigidMotion>,
    /// Object-to-world pose per frame.
    pub object_path: Vec<RigidMotion>,
    pub noise_sigma_points: f64,
    /// Ground-point noise; falls back to `noise_sigma_points`.
    #[serde(default)]
    pub noise_sigma_ground: Option<f64>,
    pub noise_sigma_pixels: f64,
    #[serde(default)]
    pub noise_model: PointNoiseModel,
    pub intrinsics: CameraIntrinsics,
    pub raster: Raster,
    pub seed: u64,
}

/// Compact description of the standard scene; expands into a
/// [`SceneConfig`] with explicit paths.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScenePreset {
    pub frames: usize,
    pub n_cube_points: usize,
    pub cube_side: f64,
    pub n_ground_points: usize,
    pub ground_extent: f64,
    pub camera_height: f64,
    /// Forward camera displacement per frame.
    pub camera_speed: f64,
    /// Camera heading change per frame (radians). A curved path keeps the
    /// trajectory alignment well posed.
    pub camera_yaw_rate: f64,
    /// Object center at frame 0, world x/y.
    pub object_start: [f64; 2],
    /// Object displacement per frame at frame 0, world x/y.
    pub object_velocity: [f64; 2],
    /// Heading change per frame (radians); velocity turns with the body.
    pub object_yaw_rate: f64,
    pub noise_sigma_points: f64,
    pub noise_sigma_ground: Option<f64>,
    pub noise_sigma_pixels: f64,
    pub noise_model: PointNoiseModel,
    pub focal: f64,
    pub image_width: usize,
    pub image_height: usize,
    pub raster_width: usize,
    pub raster_height: usize,
}

impl Default for ScenePreset {
    fn default() -> Self {
        Self {
            frames: 30,
            n_cube_points: 1000,
            cube_side: 2.0,
            n_ground_points: 1500,
            ground_extent: 30.0,
            camera_height: 1.5,
            camera_speed: 0.5,
            camera_yaw_rate: 0.01,
            object_start: [12.0, -2.0],
            object_velocity: [0.3, 0.15],
            object_yaw_rate: 0.02,
            noise_sigma_points: 0.5,
            noise_sigma_ground: Some(0.1),
            noise_sigma_pixels: 0.5,
            noise_model: PointNoiseModel::PerFrame,
            focal: 500.0,
            image_width: 640,
            image_height: 480,
            raster_width: 64,
            raster_height: 48,
        }
    }
}

/// Rotation taking camera axes (x right, y down, z forward) to world axes
/// (x forward, y left, z up), optionally yawed about world z.
pub fn forward_looking_rotation(yaw: f64) -> Matrix3<f64> {
    let base = Matrix3::new(0.0, 0.0, 1.0, -1.0, 0.0, 0.0, 0.0, -1.0, 0.0);
    let (s, c) = yaw.sin_cos();
    let rz = Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0);
    rz * base
}

impl ScenePreset {
    pub fn build(&self, seed: u64) -> Result<SceneConfig> {
        let mut camera_path = Vec::with_capacity(self.frames);
        let (mut cx, mut cy, mut heading) = (0.0, 0.0, 0.0f64);
        for _ in 0..self.frames {
            camera_path.push(RigidMotion::new(
                forward_looking_rotation(heading),
                Vector3::new(cx, cy, self.camera_height),
            ));
            cx += self.camera_speed * heading.cos();
            cy += self.camera_speed * heading.sin();
            heading += self.camera_yaw_rate;
        }
        let half = self.cube_side / 2.0;
        let mut pos = Vector2::new(self.object_start[0], self.object_start[1]);
        let mut vel = Vector2::new(self.object_velocity[0], self.object_velocity[1]);
        let mut yaw = 0.0;
        let mut object_path = Vec::with_capacity(self.frames);
        for _ in 0..self.frames {
            let (s, c) = yaw.sin_cos();
            let r = Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0);
            object_path.push(RigidMotion::new(r, Vector3::new(pos.x, pos.y, half)));
            pos += vel;
            let (s, c) = self.object_yaw_rate.sin_cos();
            vel = Vector2::new(c * vel.x - s * vel.y, s * vel.x + c * vel.y);
            yaw += self.object_yaw_rate;
        }
        let config = SceneConfig {
            n_cube_points: self.n_cube_points,
            cube_side: self.cube_side,
            n_ground_points: self.n_ground_points,
            ground_extent: self.ground_extent,
            camera_path,
            object_path,
            noise_sigma_points: self.noise_sigma_points,
            noise_sigma_ground: self.noise_sigma_ground,
            noise_sigma_pixels: self.noise_sigma_pixels,
            noise_model: self.noise_model,
            intrinsics: CameraIntrinsics::new(
                self.focal,
                self.focal,
                self.image_width as f64 / 2.0,
                self.image_height as f64 / 2.0,
            )?,
            raster: Raster {
                width: self.raster_width,
                height: self.raster_height,
                image_width: self.image_width,
                image_height: self.image_height,
            },
            seed,
        };
        config.validate()?;
        Ok(config)
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |f: &str| Err(Error::ConfigInvalid(f.into()));
        if self.n_cube_points < 8 {
            return bad("n_cube_points");
        }
        if !(self.cube_side > 0.0) {
            return bad("cube_side");
        }
        if !(self.ground_extent > 0.0) {
            return bad("ground_extent");
        }
        if !(self.noise_sigma_points >= 0.0) {
            return bad("noise_sigma_points");
        }
        if let Some(g) = self.noise_sigma_ground {
            if !(g >= 0.0) {
                return bad("noise_sigma_ground");
            }
        }
        if !(self.noise_sigma_pixels >= 0.0) {
            return bad("noise_sigma_pixels");
        }
        if self.camera_path.len() < 2 {
            return bad("camera_path");
        }
        if self.object_path.len() != self.camera_path.len() {
            return bad("object_path");
        }
        if self
            .camera_path
            .iter()
            .chain(self.object_path.iter())
            .any(|m| !m.is_valid(1e-9))
        {
            return bad("camera_path");
        }
        if self.raster.is_empty() || self.raster.image_width == 0 || self.raster.image_height == 0 {
            return bad("raster");
        }
        Ok(())
    }

    pub fn frames(&self) -> usize {
        self.camera_path.len()
    }

    pub fn ground_sigma(&self) -> f64 {
        self.noise_sigma_ground.unwrap_or(self.noise_sigma_points)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Feature {
    pub track_id: u32,
    pub pixel: Vector2<f64>,
    pub depth: f64,
    /// Displacement of this track's pixel to the next frame, if observed there.
    pub measured_flow: Option<Vector2<f64>>,
    pub point_camera: Vector3<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameObservation {
    pub frame: usize,
    pub features: Vec<Feature>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GtPoint {
    pub track_id: u32,
    pub moving: bool,
    pub class: usize,
    /// World position for static points, object-frame position for cube points.
    pub position: Vector3<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthBundle {
    pub camera_poses: Vec<RigidMotion>,
    pub object_poses: Vec<RigidMotion>,
    pub points: Vec<GtPoint>,
    pub ground_normal: Vector3<f64>,
    pub cube_side: f64,
    pub object_moving: bool,
    pub intrinsics: CameraIntrinsics,
    pub raster: Raster,
}

impl GroundTruthBundle {
    pub fn point(&self, track_id: u32) -> Option<&GtPoint> {
        self.points
            .get(track_id as usize)
            .filter(|p| p.track_id == track_id)
            .or_else(|| self.points.iter().find(|p| p.track_id == track_id))
    }

    /// World position of a point at `frame`.
    pub fn world_position(&self, p: &GtPoint, frame: usize) -> Vector3<f64> {
        if p.class == CLASS_CAR {
            self.object_poses[frame].transform_point(&p.position)
        } else {
            p.position
        }
    }

    /// Object-frame centroid of the cube points.
    pub fn object_centroid(&self) -> Vector3<f64> {
        let (sum, n) = self
            .points
            .iter()
            .filter(|p| p.class == CLASS_CAR)
            .fold((Vector3::zeros(), 0usize), |(s, n), p| (s + p.position, n + 1));
        if n == 0 {
            Vector3::zeros()
        } else {
            sum / n as f64
        }
    }

    /// Per-cell ground-truth `(class, moving)` for `frame`, by casting the
    /// ray through each cell center.
    pub fn label_raster(&self, frame: usize) -> Vec<(usize, bool)> {
        let cam = &self.camera_poses[frame];
        let obj = &self.object_poses[frame];
        let kinv = self.intrinsics.inverse_matrix();
        let half = self.cube_side / 2.0;
        (0..self.raster.len())
            .map(|idx| {
                let c = self.raster.cell_center(idx);
                let d_cam = kinv * Vector3::new(c.x, c.y, 1.0);
                let origin = cam.translation;
                let dir = cam.rotation * d_cam;
                let o_obj = obj.inverse().transform_point(&origin);
                let d_obj = obj.rotation.transpose() * dir;
                if ray_hits_box(&o_obj, &d_obj, half) {
                    (CLASS_CAR, self.object_moving)
                } else if dir.z < 0.0 {
                    (CLASS_ROAD, false)
                } else {
                    (CLASS_SKY, false)
                }
            })
            .collect()
    }
}

fn ray_hits_box(o: &Vector3<f64>, d: &Vector3<f64>, half: f64) -> bool {
    let (mut t0, mut t1) = (0.0f64, f64::INFINITY);
    for a in 0..3 {
        if d[a].abs() < 1e-15 {
            if o[a].abs() > half {
                return false;
            }
            continue;
        }
        let (mut ta, mut tb) = ((-half - o[a]) / d[a], (half - o[a]) / d[a]);
        if ta > tb {
            core::mem::swap(&mut ta, &mut tb);
        }
        t0 = t0.max(ta);
        t1 = t1.min(tb);
        if t0 > t1 {
            return false;
        }
    }
    true
}

/// Points stratified over the six faces of an axis-aligned cube centered at
/// the origin.
fn sample_cube_surface(n: usize, side: f64, rng: &mut rng::Rng) -> Vec<Vector3<f64>> {
    let half = side / 2.0;
    let mut out = Vec::with_capacity(n);
    for face in 0..6 {
        let m = n / 6 + usize::from(face < n % 6);
        let g = (1..).find(|g| g * g >= m).unwrap_or(1);
        let cell = side / g as f64;
        for j in 0..m {
            let (a, b) = (j % g, j / g);
            let u = -half + (a as f64 + rng.random::<f64>()) * cell;
            let v = -half + (b as f64 + rng.random::<f64>()) * cell;
            let s = if face % 2 == 0 { half } else { -half };
            out.push(match face / 2 {
                0 => Vector3::new(s, u, v),
                1 => Vector3::new(u, s, v),
                _ => Vector3::new(u, v, s),
            });
        }
    }
    out
}

fn normal3(rng: &mut rng::Rng, dist: &Normal<f64>) -> Vector3<f64> {
    Vector3::new(dist.sample(rng), dist.sample(rng), dist.sample(rng))
}

/// Generates ground truth and per-frame observations.
pub fn generate(config: &SceneConfig) -> Result<(GroundTruthBundle, Vec<FrameObservation>)> {
    config.validate()?;
    let mut rng_shape = rng::stream(config.seed, "scene/shape");
    let mut rng_noise = rng::stream(config.seed, "scene/noise");
    let unit = Normal::new(0.0, 1.0).map_err(|_| Error::ConfigInvalid("noise".into()))?;

    let object_moving = config
        .object_path
        .windows(2)
        .any(|w| w[0].max_abs_diff(&w[1]) > 0.0);

    let mut points = Vec::with_capacity(config.n_cube_points + config.n_ground_points);
    for (i, p) in sample_cube_surface(config.n_cube_points, config.cube_side, &mut rng_shape)
        .into_iter()
        .enumerate()
    {
        points.push(GtPoint {
            track_id: i as u32,
            moving: object_moving,
            class: CLASS_CAR,
            position: p,
        });
    }
    let xs: Vec<f64> = config.camera_path.iter().map(|c| c.translation.x).collect();
    let x_min = xs.iter().copied().fold(f64::INFINITY, f64::min) + 3.0;
    let x_max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max) + config.ground_extent;
    for j in 0..config.n_ground_points {
        let x = rng_shape.random_range(x_min..x_max);
        let y = rng_shape.random_range(-config.ground_extent / 2.0..config.ground_extent / 2.0);
        points.push(GtPoint {
            track_id: (config.n_cube_points + j) as u32,
            moving: false,
            class: CLASS_ROAD,
            position: Vector3::new(x, y, 0.0),
        });
    }

    let gt = GroundTruthBundle {
        camera_poses: config.camera_path.clone(),
        object_poses: config.object_path.clone(),
        points,
        ground_normal: Vector3::z(),
        cube_side: config.cube_side,
        object_moving,
        intrinsics: config.intrinsics,
        raster: config.raster,
    };

    let sigma_for = |p: &GtPoint| {
        if p.class == CLASS_CAR {
            config.noise_sigma_points
        } else {
            config.ground_sigma()
        }
    };
    let persistent: Vec<Vector3<f64>> = match config.noise_model {
        PointNoiseModel::PerPoint => gt
            .points
            .iter()
            .map(|p| normal3(&mut rng_noise, &unit) * sigma_for(p))
            .collect(),
        PointNoiseModel::PerFrame => Vec::new(),
    };

    let w = config.raster.image_width as f64;
    let h = config.raster.image_height as f64;
    let k = &config.intrinsics;
    // (frame, point index) -> observed pixel and 3D measurement
    let mut per_frame: Vec<Vec<Option<(Vector2<f64>, Vector3<f64>)>>> = Vec::new();
    for f in 0..config.frames() {
        let extr = gt.camera_poses[f].inverse();
        let mut obs = vec![None; gt.points.len()];
        for (i, p) in gt.points.iter().enumerate() {
            let pw = gt.world_position(p, f);
            let pc = extr.transform_point(&pw);
            if pc.z <= NEAR_PLANE {
                continue;
            }
            let Ok(px) = k.project_camera(&pc) else {
                continue;
            };
            if !(px.x >= 0.0 && px.x < w && px.y >= 0.0 && px.y < h) {
                continue;
            }
            let sigma = sigma_for(p);
            let pc_obs = match config.noise_model {
                PointNoiseModel::PerFrame => pc + normal3(&mut rng_noise, &unit) * sigma,
                PointNoiseModel::PerPoint => {
                    let e = persistent[i];
                    let e_world = if p.class == CLASS_CAR {
                        gt.object_poses[f].rotation * e
                    } else {
                        e
                    };
                    pc + extr.rotation * e_world
                }
            };
            let px_obs = px
                + Vector2::new(unit.sample(&mut rng_noise), unit.sample(&mut rng_noise))
                    * config.noise_sigma_pixels;
            if pc_obs.z <= NEAR_PLANE / 5.0 {
                continue;
            }
            obs[i] = Some((px_obs, pc_obs));
        }
        per_frame.push(obs);
    }

    let frames = (0..config.frames())
        .map(|f| {
            let features = gt
                .points
                .iter()
                .enumerate()
                .filter_map(|(i, p)| {
                    let (px, pc) = per_frame[f][i]?;
                    let flow = per_frame
                        .get(f + 1)
                        .and_then(|next| next[i])
                        .map(|(npx, _)| npx - px);
                    Some(Feature {
                        track_id: p.track_id,
                        pixel: px,
                        depth: pc.z,
                        measured_flow: flow,
                        point_camera: pc,
                    })
                })
                .collect();
            FrameObservation { frame: f, features }
        })
        .collect();
    Ok((gt, frames))
}

/// Object-class unaries derived from the ground-truth raster of `frame`
/// with seeded label confusion: each cell's observed class is replaced by a
/// different random class with probability `flip_rate`. The observed class
/// costs 0, every other class `cost`. Motion unaries are left at zero.
pub fn corrupt_unaries_with(
    gt: &GroundTruthBundle,
    frame: usize,
    labels: &LabelSpace,
    flip_rate: f64,
    cost: f64,
    seed: u64,
) -> Result<UnaryField> {
    if !(0.0..1.0).contains(&flip_rate) {
        return Err(Error::InvalidParameter("flip_rate"));
    }
    let n_classes = labels.object_classes.len();
    let mut rng = rng::stream(seed, &format!("unaries/{frame}"));
    let raster = gt.label_raster(frame);
    let object = raster
        .iter()
        .map(|&(class, _)| {
            let mut observed = class;
            if rng.random::<f64>() < flip_rate && n_classes > 1 {
                let shift = rng.random_range(1..n_classes);
                observed = (class + shift) % n_classes;
            }
            (0..n_classes)
                .map(|c| if c == observed { 0.0 } else { cost })
                .collect()
        })
        .collect();
    Ok(UnaryField {
        object,
        motion: vec![[0.0, 0.0]; raster.len()],
    })
}

pub fn corrupt_unaries(
    gt: &GroundTruthBundle,
    frame: usize,
    labels: &LabelSpace,
    flip_rate: f64,
    seed: u64,
) -> Result<UnaryField> {
    corrupt_unaries_with(gt, frame, labels, flip_rate, 2.0, seed)
}

/// Per-cell RGB appearance: a class color plus seeded Gaussian noise.
pub fn render_appearance(gt: &GroundTruthBundle, frame: usize, sigma: f64, seed: u64) -> Vec<[f64; 3]> {
    const PALETTE: [[f64; 3]; 4] = [
        [0.45, 0.45, 0.45],
        [0.80, 0.15, 0.10],
        [0.20, 0.60, 0.20],
        [0.55, 0.70, 0.95],
    ];
    let mut rng = rng::stream(seed, &format!("appearance/{frame}"));
    let unit = Normal::new(0.0, 1.0).expect("unit normal");
    gt.label_raster(frame)
        .iter()
        .map(|&(class, _)| {
            let base = PALETTE[class.min(PALETTE.len() - 1)];
            [
                base[0] + sigma * unit.sample(&mut rng),
                base[1] + sigma * unit.sample(&mut rng),
                base[2] + sigma * unit.sample(&mut rng),
            ]
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{predicted_flow, project};

    fn quiet_preset() -> ScenePreset {
        ScenePreset {
            frames: 6,
            n_cube_points: 200,
            n_ground_points: 300,
            noise_sigma_points: 0.0,
            noise_sigma_ground: None,
            noise_sigma_pixels: 0.0,
            ..ScenePreset::default()
        }
    }

    #[test]
    fn static_object_flow_matches_camera_prediction() {
        let mut preset = quiet_preset();
        preset.object_velocity = [0.0, 0.0];
        preset.object_yaw_rate = 0.0;
        let config = preset.build(3).unwrap();
        let (gt, frames) = generate(&config).unwrap();
        assert!(!gt.object_moving);
        let k = config.intrinsics;
        for f in 0..frames.len() - 1 {
            // camera-frame motion from frame f to f+1
            let m = gt.camera_poses[f + 1].inverse().compose(&gt.camera_poses[f]);
            for feat in &frames[f].features {
                let Some(flow) = feat.measured_flow else { continue };
                let pred = predicted_flow(&k, &m, &feat.pixel, feat.depth).unwrap();
                assert!((feat.pixel + flow - pred).norm() < 1e-9);
            }
        }
    }

    #[test]
    fn translating_object_flow_matches_projection() {
        let mut preset = quiet_preset();
        preset.camera_speed = 0.0;
        preset.camera_yaw_rate = 0.0;
        preset.object_velocity = [0.1, 0.0];
        preset.object_yaw_rate = 0.0;
        let config = preset.build(4).unwrap();
        let (gt, frames) = generate(&config).unwrap();
        let k = config.intrinsics;
        let extr = gt.camera_poses[0].inverse();
        let mut checked = 0;
        for feat in &frames[0].features {
            let p = gt.point(feat.track_id).unwrap();
            if p.class != CLASS_CAR {
                assert_eq!(feat.measured_flow.unwrap().norm(), 0.0);
                continue;
            }
            let Some(flow) = feat.measured_flow else { continue };
            let x0 = gt.world_position(p, 0);
            let x1 = x0 + Vector3::new(0.1, 0.0, 0.0);
            let oracle = project(&k, &extr, &x1).unwrap() - project(&k, &extr, &x0).unwrap();
            assert!((flow - oracle).norm() < 1e-9);
            checked += 1;
        }
        assert!(checked > 50);
    }

    #[test]
    fn generation_is_deterministic() {
        let config = ScenePreset {
            frames: 4,
            n_cube_points: 100,
            n_ground_points: 100,
            ..ScenePreset::default()
        }
        .build(42)
        .unwrap();
        assert_eq!(generate(&config).unwrap(), generate(&config).unwrap());
    }

    #[test]
    fn labels_and_normal() {
        let config = quiet_preset().build(1).unwrap();
        let (gt, frames) = generate(&config).unwrap();
        assert!((gt.ground_normal.norm() - 1.0).abs() < 1e-12);
        for p in &gt.points {
            match p.class {
                CLASS_CAR => assert!(p.moving),
                _ => assert!(!p.moving && p.class == CLASS_ROAD),
            }
        }
        for f in &frames {
            let mut ids: Vec<u32> = f.features.iter().map(|x| x.track_id).collect();
            ids.dedup();
            assert_eq!(ids.len(), f.features.len());
            assert!(f.features.iter().all(|x| x.depth > 0.0));
        }
        let raster = gt.label_raster(0);
        assert!(raster.iter().any(|&(c, m)| c == CLASS_CAR && m));
        assert!(raster.iter().any(|&(c, _)| c == CLASS_ROAD));
        assert!(raster.iter().any(|&(c, _)| c == CLASS_SKY));
    }

    #[test]
    fn invalid_config_names_field() {
        let mut config = quiet_preset().build(1).unwrap();
        config.n_cube_points = 4;
        assert_eq!(generate(&config).unwrap_err(), Error::ConfigInvalid("n_cube_points".into()));
        let mut config = quiet_preset().build(1).unwrap();
        config.object_path.pop();
        assert_eq!(generate(&config).unwrap_err(), Error::ConfigInvalid("object_path".into()));
        let mut config = quiet_preset().build(1).unwrap();
        config.noise_sigma_pixels = -1.0;
        assert_eq!(
            generate(&config).unwrap_err(),
            Error::ConfigInvalid("noise_sigma_pixels".into())
        );
    }

    #[test]
    fn noise_is_zero_mean() {
        let config = ScenePreset {
            frames: 14,
            n_cube_points: 600,
            n_ground_points: 600,
            noise_sigma_points: 0.5,
            noise_sigma_pixels: 0.5,
            ..ScenePreset::default()
        }
        .build(9)
        .unwrap();
        let (gt, frames) = generate(&config).unwrap();
        let k = config.intrinsics;
        let (mut s3, mut s2, mut n) = (Vector3::zeros(), Vector2::zeros(), 0usize);
        for f in &frames {
            let extr = gt.camera_poses[f.frame].inverse();
            for feat in &f.features {
                let p = gt.point(feat.track_id).unwrap();
                let pc = extr.transform_point(&gt.world_position(p, f.frame));
                s3 += feat.point_camera - pc;
                s2 += feat.pixel - k.project_camera(&pc).unwrap();
                n += 1;
            }
        }
        assert!(n >= 10_000, "only {n} samples");
        let bound = 3.0 * 0.5 / (n as f64).sqrt();
        let m3 = s3 / n as f64;
        let m2 = s2 / n as f64;
        assert!(m3.amax() < bound, "{m3:?} vs {bound}");
        assert!(m2.amax() < bound, "{m2:?} vs {bound}");
    }

    #[test]
    fn corrupt_unaries_rates() {
        let config = quiet_preset().build(5).unwrap();
        let (gt, _) = generate(&config).unwrap();
        let labels = LabelSpace::default();
        let clean = corrupt_unaries(&gt, 0, &labels, 0.0, 1).unwrap();
        let truth = gt.label_raster(0);
        let argmin = |u: &[f64]| {
            u.iter()
                .enumerate()
                .min_by(|a, b| a.1.total_cmp(b.1))
                .map(|(i, _)| i)
                .unwrap()
        };
        assert!(clean.object.iter().zip(&truth).all(|(u, t)| argmin(u) == t.0));
        let noisy = corrupt_unaries(&gt, 0, &labels, 0.3, 1).unwrap();
        let wrong = noisy
            .object
            .iter()
            .zip(&truth)
            .filter(|(u, t)| argmin(u) != t.0)
            .count();
        let frac = wrong as f64 / truth.len() as f64;
        assert!((frac - 0.3).abs() <= 0.02, "{frac}");
        assert!(corrupt_unaries(&gt, 0, &labels, 1.0, 1).is_err());
    }

    #[test]
    fn per_point_noise_moves_rigidly() {
        let config = ScenePreset {
            frames: 3,
            n_cube_points: 60,
            n_ground_points: 60,
            noise_sigma_pixels: 0.0,
            noise_model: PointNoiseModel::PerPoint,
            ..ScenePreset::default()
        }
        .build(2)
        .unwrap();
        let (gt, frames) = generate(&config).unwrap();
        // distances between two cube points are preserved across frames
        let find = |f: usize, id: u32| {
            frames[f].features.iter().find(|x| x.track_id == id).map(|x| x.point_camera)
        };
        let (a0, b0) = (find(0, 0).unwrap(), find(0, 1).unwrap());
        let (a2, b2) = (find(2, 0).unwrap(), find(2, 1).unwrap());
        assert!(((a0 - b0).norm() - (a2 - b2).norm()).abs() < 1e-9);
        assert!(gt.points[0].class == CLASS_CAR);
    }
}
