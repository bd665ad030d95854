//! Joint object-class and motion labeling with a dense CRF.
//!
//! Each cell carries a label `(object class, motion class)`. The energy is
//! a joint unary (object cost + motion cost + class/motion compatibility)
//! plus two Potts-style pairwise families: a Gaussian appearance/position
//! kernel on the object layer and a flow-similarity kernel on the motion
//! layer. Inference is mean-field with marginals factorized per layer,
//! `Q_i(x, y) = Qᴼ_i(x) Qᴹ_i(y)`, updated synchronously.

use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

#[allow(unused_imports)]
use num_traits::Float;
use nalgebra::Vector2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{predicted_flow, CameraIntrinsics, FlowCovariance, RigidMotion};
use crate::sim::{FrameObservation, Raster};

pub const STATIC: usize = 0;
pub const MOVING: usize = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelSpace {
    pub object_classes: Vec<String>,
}

impl Default for LabelSpace {
    fn default() -> Self {
        Self {
            object_classes: ["road", "car", "vegetation", "sky"]
                .iter()
                .map(|s| s.to_string())
                .collect(),
        }
    }
}

impl LabelSpace {
    pub fn validate(&self) -> Result<()> {
        if self.object_classes.len() < 2 {
            return Err(Error::InvalidParameter("object_classes"));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.object_classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.object_classes.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.object_classes.iter().position(|c| c == name)
    }
}

/// `λ(l, m)`: compatibility cost of object class `l` with motion class `m`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompatibilityMatrix {
    pub values: Vec<[f64; 2]>,
}

impl CompatibilityMatrix {
    pub fn zeros(n_classes: usize) -> Self {
        Self {
            values: vec![[0.0; 2]; n_classes],
        }
    }

    pub fn new(values: Vec<[f64; 2]>) -> Result<Self> {
        let m = Self { values };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        if self
            .values
            .iter()
            .flatten()
            .all(|v| (-1.0..=1.0).contains(v))
        {
            Ok(())
        } else {
            Err(Error::InvalidParameter("compatibility"))
        }
    }

    pub fn get(&self, class: usize, motion: usize) -> f64 {
        self.values[class][motion]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnaryField {
    /// Per-cell cost over object classes (nats).
    pub object: Vec<Vec<f64>>,
    /// Per-cell `[static, moving]` cost (nats).
    pub motion: Vec<[f64; 2]>,
}

impl UnaryField {
    pub fn len(&self) -> usize {
        self.object.len()
    }

    pub fn is_empty(&self) -> bool {
        self.object.is_empty()
    }

    pub fn n_classes(&self) -> usize {
        self.object.first().map_or(0, |v| v.len())
    }

    fn check(&self, lambda: &CompatibilityMatrix) -> Result<()> {
        let n = self.n_classes();
        if self.motion.len() != self.object.len() {
            return Err(Error::ShapeMismatch("motion and object unaries differ in length".into()));
        }
        if self.object.iter().any(|v| v.len() != n) {
            return Err(Error::ShapeMismatch("ragged object unaries".into()));
        }
        if lambda.values.len() != n {
            return Err(Error::ShapeMismatch("compatibility rows != object classes".into()));
        }
        if self
            .object
            .iter()
            .flatten()
            .chain(self.motion.iter().flatten())
            .any(|v| !v.is_finite())
        {
            return Err(Error::InvalidParameter("unary"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarginalFields {
    pub object: Vec<Vec<f64>>,
    pub motion: Vec<[f64; 2]>,
}

impl MarginalFields {
    /// Largest deviation of any per-cell distribution from summing to one,
    /// or infinity if an entry is negative.
    pub fn normalization_error(&self) -> f64 {
        let mut worst = 0.0f64;
        for q in &self.object {
            if q.iter().any(|&v| v < 0.0) {
                return f64::INFINITY;
            }
            worst = worst.max((q.iter().sum::<f64>() - 1.0).abs());
        }
        for q in &self.motion {
            if q.iter().any(|&v| v < 0.0) {
                return f64::INFINITY;
            }
            worst = worst.max((q[0] + q[1] - 1.0).abs());
        }
        worst
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JointLabeling {
    pub object: Vec<usize>,
    pub motion: Vec<usize>,
}

/// Per-cell observations the pairwise kernels read.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridFeatures {
    pub width: usize,
    pub height: usize,
    pub appearance: Vec<[f64; 3]>,
    pub flow: Vec<Option<Vector2<f64>>>,
}

impl GridFeatures {
    pub fn len(&self) -> usize {
        self.width * self.height
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn position(&self, i: usize) -> (f64, f64) {
        ((i % self.width) as f64, (i / self.width) as f64)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PairwiseParams {
    /// Smoothness kernel weight `w₁`.
    pub w_smooth: f64,
    /// Smoothness kernel width `θ_γ` (cells).
    pub theta_gamma: f64,
    /// Appearance kernel weight `w₂`.
    pub w_appearance: f64,
    /// Appearance kernel spatial width `θ_α` (cells).
    pub theta_alpha: f64,
    /// Appearance kernel color width `θ_β`.
    pub theta_beta: f64,
    /// Motion-layer weight `w_m`.
    pub w_motion: f64,
    /// Flow-difference scale `θ_f` (pixels).
    pub theta_flow: f64,
    /// Truncation radius of the dense neighborhood (cells).
    pub radius: usize,
}

impl Default for PairwiseParams {
    fn default() -> Self {
        Self {
            w_smooth: 0.3,
            theta_gamma: 1.0,
            w_appearance: 0.5,
            theta_alpha: 3.0,
            theta_beta: 0.15,
            w_motion: 0.3,
            theta_flow: 2.0,
            radius: 5,
        }
    }
}

impl PairwiseParams {
    pub fn zero() -> Self {
        Self {
            w_smooth: 0.0,
            w_appearance: 0.0,
            w_motion: 0.0,
            ..Self::default()
        }
    }
}

/// `p(i, j)`, the object-layer penalty for differing labels.
pub fn object_kernel(grid: &GridFeatures, i: usize, j: usize, params: &PairwiseParams) -> f64 {
    let (xi, yi) = grid.position(i);
    let (xj, yj) = grid.position(j);
    let d2 = (xi - xj) * (xi - xj) + (yi - yj) * (yi - yj);
    let a = &grid.appearance[i];
    let b = &grid.appearance[j];
    let c2 = (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2);
    params.w_smooth * (-d2 / (2.0 * params.theta_gamma.powi(2))).exp()
        + params.w_appearance
            * (-d2 / (2.0 * params.theta_alpha.powi(2)) - c2 / (2.0 * params.theta_beta.powi(2)))
                .exp()
}

/// Motion-layer penalty for differing labels: `w_m exp(−‖fᵢ − fⱼ‖ / θ_f)`,
/// zero when either cell lacks flow.
pub fn motion_kernel(grid: &GridFeatures, i: usize, j: usize, params: &PairwiseParams) -> f64 {
    match (grid.flow[i], grid.flow[j]) {
        (Some(a), Some(b)) => params.w_motion * (-(a - b).norm() / params.theta_flow).exp(),
        _ => 0.0,
    }
}

pub fn pairwise_object(
    grid: &GridFeatures,
    i: usize,
    j: usize,
    xi: usize,
    xj: usize,
    params: &PairwiseParams,
) -> f64 {
    if xi == xj {
        0.0
    } else {
        object_kernel(grid, i, j, params)
    }
}

pub fn pairwise_motion(
    grid: &GridFeatures,
    i: usize,
    j: usize,
    yi: usize,
    yj: usize,
    params: &PairwiseParams,
) -> f64 {
    if yi == yj {
        0.0
    } else {
        motion_kernel(grid, i, j, params)
    }
}

/// Undirected pairwise structure with precomputed kernel values.
#[derive(Debug, Clone, PartialEq)]
pub struct CrfGraph {
    pub n: usize,
    /// `(i, j, object penalty, motion penalty)` with `i < j`.
    pub edges: Vec<(usize, usize, f64, f64)>,
}

impl CrfGraph {
    /// All pairs within the truncation radius of each other.
    pub fn from_grid(grid: &GridFeatures, params: &PairwiseParams) -> Self {
        let r = params.radius as isize;
        let mut edges = Vec::new();
        for i in 0..grid.len() {
            let (xi, yi) = ((i % grid.width) as isize, (i / grid.width) as isize);
            for dy in 0..=r {
                for dx in -r..=r {
                    if (dy == 0 && dx <= 0) || dx * dx + dy * dy > r * r {
                        continue;
                    }
                    let (xj, yj) = (xi + dx, yi + dy);
                    if xj < 0 || xj >= grid.width as isize || yj >= grid.height as isize {
                        continue;
                    }
                    let j = (yj as usize) * grid.width + xj as usize;
                    let p = object_kernel(grid, i, j, params);
                    let g = motion_kernel(grid, i, j, params);
                    if p > 0.0 || g > 0.0 {
                        edges.push((i, j, p, g));
                    }
                }
            }
        }
        Self { n: grid.len(), edges }
    }

    fn adjacency(&self) -> Vec<Vec<(usize, f64, f64)>> {
        let mut adj = vec![Vec::new(); self.n];
        for &(i, j, p, g) in &self.edges {
            adj[i].push((j, p, g));
            adj[j].push((i, p, g));
        }
        adj
    }
}

/// Static/moving unary for one residual `predicted − measured`: the static
/// cost is the Mahalanobis term, the moving cost the constant `tau`.
pub fn motion_unary_cost(residual: &Vector2<f64>, sigma: &FlowCovariance, tau: f64) -> Result<[f64; 2]> {
    Ok([sigma.mahalanobis(residual)?, tau])
}

/// Per-cell motion unaries for one frame. Cells holding features with depth
/// and flow get the mean static cost of their features; other cells get
/// equal (uninformative) costs.
pub fn motion_unary(
    frame: &FrameObservation,
    cam_motion: &RigidMotion,
    k: &CameraIntrinsics,
    sigma: &FlowCovariance,
    raster: &Raster,
    tau: f64,
) -> Result<Vec<[f64; 2]>> {
    sigma.inverse()?;
    let mut sum = vec![0.0; raster.len()];
    let mut count = vec![0usize; raster.len()];
    for feat in &frame.features {
        let (Some(flow), Some(cell)) = (feat.measured_flow, raster.cell_of(&feat.pixel)) else {
            continue;
        };
        if !(feat.depth > 0.0) {
            continue;
        }
        let Ok(pred) = predicted_flow(k, cam_motion, &feat.pixel, feat.depth) else {
            continue;
        };
        let measured = feat.pixel + flow;
        sum[cell] += sigma.mahalanobis(&(pred - measured))?;
        count[cell] += 1;
    }
    Ok(sum
        .iter()
        .zip(&count)
        .map(|(&s, &c)| if c == 0 { [0.0, 0.0] } else { [s / c as f64, tau] })
        .collect())
}

/// Mean measured flow per cell.
pub fn flow_field(frame: &FrameObservation, raster: &Raster) -> Vec<Option<Vector2<f64>>> {
    let mut sum = vec![Vector2::zeros(); raster.len()];
    let mut count = vec![0usize; raster.len()];
    for feat in &frame.features {
        if let (Some(flow), Some(cell)) = (feat.measured_flow, raster.cell_of(&feat.pixel)) {
            sum[cell] += flow;
            count[cell] += 1;
        }
    }
    sum.into_iter()
        .zip(count)
        .map(|(s, c)| (c > 0).then(|| s / c as f64))
        .collect()
}

/// `cost[l][m] = ψᴼ(l) + ψᴹ(m) + λ(l, m)` for every cell.
pub fn joint_unary(u: &UnaryField, lambda: &CompatibilityMatrix) -> Result<Vec<Vec<[f64; 2]>>> {
    u.check(lambda)?;
    Ok(u.object
        .iter()
        .zip(&u.motion)
        .map(|(obj, mot)| {
            obj.iter()
                .enumerate()
                .map(|(l, &o)| [o + mot[0] + lambda.get(l, 0), o + mot[1] + lambda.get(l, 1)])
                .collect()
        })
        .collect())
}

fn softmax_neg(costs: &[f64], out: &mut [f64]) {
    let min = costs.iter().copied().fold(f64::INFINITY, f64::min);
    let mut z = 0.0;
    for (o, &c) in out.iter_mut().zip(costs) {
        *o = (min - c).exp();
        z += *o;
    }
    for o in out.iter_mut() {
        *o /= z;
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MeanFieldResult {
    pub marginals: MarginalFields,
    pub iterations: usize,
    pub converged: bool,
}

pub fn mean_field_infer(
    unary: &UnaryField,
    lambda: &CompatibilityMatrix,
    graph: &CrfGraph,
    max_iters: usize,
    tol: f64,
) -> Result<MeanFieldResult> {
    mean_field_infer_observed(unary, lambda, graph, max_iters, tol, |_, _| {})
}

/// Mean-field inference calling `observe(iteration, marginals)` after every
/// synchronous update.
pub fn mean_field_infer_observed(
    unary: &UnaryField,
    lambda: &CompatibilityMatrix,
    graph: &CrfGraph,
    max_iters: usize,
    tol: f64,
    mut observe: impl FnMut(usize, &MarginalFields),
) -> Result<MeanFieldResult> {
    unary.check(lambda)?;
    if max_iters == 0 {
        return Err(Error::InvalidParameter("max_iters"));
    }
    if graph.n != unary.len() {
        return Err(Error::ShapeMismatch("graph size != unary size".into()));
    }
    let n = unary.len();
    let nc = unary.n_classes();
    let adj = graph.adjacency();

    let mut q = MarginalFields {
        object: vec![vec![0.0; nc]; n],
        motion: vec![[0.0; 2]; n],
    };
    for i in 0..n {
        softmax_neg(&unary.object[i], &mut q.object[i]);
        softmax_neg(&unary.motion[i], &mut q.motion[i]);
    }

    let mut next = q.clone();
    let mut cost_o = vec![0.0; nc];
    let mut iterations = 0;
    let mut converged = false;
    while iterations < max_iters {
        iterations += 1;
        let mut change = 0.0f64;
        for i in 0..n {
            // object layer
            for l in 0..nc {
                let compat = q.motion[i][0] * lambda.get(l, 0) + q.motion[i][1] * lambda.get(l, 1);
                let pair: f64 = adj[i].iter().map(|&(j, p, _)| p * (1.0 - q.object[j][l])).sum();
                cost_o[l] = unary.object[i][l] + compat + pair;
            }
            softmax_neg(&cost_o, &mut next.object[i]);
            // motion layer
            let mut cost_m = [0.0; 2];
            for (m, c) in cost_m.iter_mut().enumerate() {
                let compat: f64 = (0..nc).map(|l| q.object[i][l] * lambda.get(l, m)).sum();
                let pair: f64 = adj[i].iter().map(|&(j, _, g)| g * (1.0 - q.motion[j][m])).sum();
                *c = unary.motion[i][m] + compat + pair;
            }
            softmax_neg(&cost_m, &mut next.motion[i]);

            let tv_o = 0.5
                * next.object[i]
                    .iter()
                    .zip(&q.object[i])
                    .map(|(a, b)| (a - b).abs())
                    .sum::<f64>();
            let tv_m = (next.motion[i][0] - q.motion[i][0]).abs();
            change = change.max(tv_o).max(tv_m);
        }
        core::mem::swap(&mut q, &mut next);
        debug_assert!(q.normalization_error() < 1e-9);
        observe(iterations, &q);
        if change < tol {
            converged = true;
            break;
        }
    }
    Ok(MeanFieldResult {
        marginals: q,
        iterations,
        converged,
    })
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Per-cell argmax of both layers; ties go to the lowest index.
pub fn decode(m: &MarginalFields) -> JointLabeling {
    JointLabeling {
        object: m.object.iter().map(|q| argmax(q)).collect(),
        motion: m.motion.iter().map(|q| argmax(q)).collect(),
    }
}

/// Energy of a labeling: joint unaries plus both pairwise families, each
/// unordered neighbor pair counted once.
pub fn energy(
    labeling: &JointLabeling,
    unary: &UnaryField,
    lambda: &CompatibilityMatrix,
    graph: &CrfGraph,
) -> Result<f64> {
    unary.check(lambda)?;
    if labeling.object.len() != unary.len() || labeling.motion.len() != unary.len() {
        return Err(Error::ShapeMismatch("labeling size != unary size".into()));
    }
    let mut e = 0.0;
    for i in 0..unary.len() {
        let (x, y) = (labeling.object[i], labeling.motion[i]);
        e += unary.object[i][x] + unary.motion[i][y] + lambda.get(x, y);
    }
    for &(i, j, p, g) in &graph.edges {
        if labeling.object[i] != labeling.object[j] {
            e += p;
        }
        if labeling.motion[i] != labeling.motion[j] {
            e += g;
        }
    }
    Ok(e)
}
