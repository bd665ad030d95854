//! Absolute trajectory error against a reference trajectory.

use alloc::string::String;
use alloc::vec::Vec;

use nalgebra::Vector3;
#[allow(unused_imports)]
use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{absolute_orientation, RigidMotion};
use crate::trajectory::Trajectory;

pub const DEFAULT_BIN_WIDTH: f64 = 0.25;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    /// Lower edge of every bin; the last bin has no upper edge.
    pub bin_edges: Vec<f64>,
    pub counts: Vec<usize>,
}

impl Histogram {
    /// Right-open bins of width `w` starting at 0, enough to hold the
    /// largest value.
    pub fn new(values: &[f64], w: f64) -> Result<Self> {
        if !(w > 0.0 && w.is_finite()) {
            return Err(Error::InvalidParameter("histogram bin width"));
        }
        let max = values.iter().copied().fold(0.0f64, f64::max);
        let bins = (max / w).floor() as usize + 1;
        let mut counts = alloc::vec![0usize; bins];
        for v in values {
            let b = ((v / w).floor().max(0.0) as usize).min(bins - 1);
            counts[b] += 1;
        }
        Ok(Self {
            bin_edges: (0..bins).map(|i| i as f64 * w).collect(),
            counts,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryReport {
    pub rmse: f64,
    pub mean: f64,
    /// Lower middle value for an even count.
    pub median: f64,
    /// Sum of the per-pose errors.
    pub total: f64,
    pub frames: Vec<usize>,
    pub per_pose_errors: Vec<f64>,
    /// Motion applied to the estimate to bring it onto the reference.
    pub alignment: RigidMotion,
    pub histogram: Histogram,
}

fn common(estimate: &Trajectory, reference: &Trajectory) -> Vec<(usize, Vector3<f64>, Vector3<f64>)> {
    estimate
        .poses()
        .iter()
        .filter_map(|(f, e)| reference.get(*f).map(|r| (*f, e.translation, r.translation)))
        .collect()
}

/// Rigid motion minimizing `Σ ‖M est_k − ref_k‖²` over common frames.
pub fn align(estimate: &Trajectory, reference: &Trajectory) -> Result<RigidMotion> {
    let pairs: Vec<_> = common(estimate, reference).into_iter().map(|(_, e, r)| (e, r)).collect();
    if pairs.len() < 3 {
        return Err(Error::InsufficientOverlap(pairs.len()));
    }
    absolute_orientation(&pairs)
}

pub fn ate(estimate: &Trajectory, reference: &Trajectory) -> Result<TrajectoryReport> {
    ate_with(estimate, reference, DEFAULT_BIN_WIDTH)
}

pub fn ate_with(estimate: &Trajectory, reference: &Trajectory, bin_width: f64) -> Result<TrajectoryReport> {
    let m = align(estimate, reference)?;
    let pairs = common(estimate, reference);
    let errors: Vec<f64> = pairs.iter().map(|(_, e, r)| (m.transform_point(e) - r).norm()).collect();
    let n = errors.len() as f64;
    let mut sorted = errors.clone();
    sorted.sort_by(f64::total_cmp);
    Ok(TrajectoryReport {
        rmse: (errors.iter().map(|e| e * e).sum::<f64>() / n).sqrt(),
        mean: errors.iter().sum::<f64>() / n,
        median: sorted[(sorted.len() - 1) / 2],
        total: errors.iter().sum(),
        frames: pairs.iter().map(|p| p.0).collect(),
        histogram: Histogram::new(&errors, bin_width)?,
        per_pose_errors: errors,
        alignment: m,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub name: String,
    pub rmse: f64,
    pub mean: f64,
    pub median: f64,
    /// `(rmse − baseline rmse) / baseline rmse`, in percent.
    pub rmse_change_pct: f64,
}

/// One row per report; the first entry is the baseline.
pub fn compare_runs(reports: &[(String, TrajectoryReport)]) -> Result<Vec<ComparisonRow>> {
    let Some((_, base)) = reports.first() else {
        return Err(Error::InvalidParameter("no reports to compare"));
    };
    Ok(reports
        .iter()
        .map(|(name, r)| ComparisonRow {
            name: name.clone(),
            rmse: r.rmse,
            mean: r.mean,
            median: r.median,
            rmse_change_pct: if base.rmse > 0.0 {
                (r.rmse - base.rmse) / base.rmse * 100.0
            } else {
                0.0
            },
        })
        .collect())
}
