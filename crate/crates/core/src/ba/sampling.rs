//! Choosing which point pairs of a body receive box constraints.

use alloc::collections::BTreeSet;
use alloc::vec::Vec;

use nalgebra::Vector3;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::sketch::{build_sketch, Sketch, SketchMode};
use crate::error::{Error, Result};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    /// Uniformly random pairs.
    Strat1,
    /// Random anchor paired with its farthest point.
    Strat2,
    /// Random anchor paired with the farthest point not yet in any pair.
    Strat3,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SamplingPlan {
    pub strategy: Strategy,
    pub n_constraints: usize,
    pub seed: u64,
}

impl SamplingPlan {
    pub fn validate(&self, n_points: usize) -> Result<()> {
        let available = pair_count(n_points);
        if self.n_constraints == 0 || self.n_constraints > available {
            return Err(Error::NotEnoughPairs {
                requested: self.n_constraints,
                available,
            });
        }
        Ok(())
    }
}

pub fn pair_count(n: usize) -> usize {
    n * n.saturating_sub(1) / 2
}

/// Maps a row of the lexicographic enumeration of pairs `i < j` to the pair.
pub fn pair_from_index(n: usize, row: usize) -> (usize, usize) {
    // rows before anchor i: i·n − i(i+1)/2
    let start = |i: usize| i * n - i * (i + 1) / 2;
    let (mut lo, mut hi) = (0usize, n - 1);
    while hi - lo > 1 {
        let mid = (lo + hi) / 2;
        if start(mid) <= row {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    (lo, lo + 1 + row - start(lo))
}

fn key(a: usize, b: usize) -> (usize, usize) {
    (a.min(b), a.max(b))
}

/// Other points ordered by decreasing distance from `anchor`; ties go to
/// the lower index.
fn by_distance(points: &[Vector3<f64>], anchor: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..points.len()).filter(|&i| i != anchor).collect();
    let d: Vec<f64> = points.iter().map(|p| (p - points[anchor]).norm_squared()).collect();
    order.sort_by(|&a, &b| d[b].total_cmp(&d[a]).then(a.cmp(&b)));
    order
}

/// Draws `plan.n_constraints` distinct unordered pairs.
pub fn sample_pairs(points: &[Vector3<f64>], plan: &SamplingPlan) -> Result<Vec<(usize, usize)>> {
    let n = points.len();
    if n < 2 {
        return Err(Error::NotEnoughPairs {
            requested: plan.n_constraints,
            available: 0,
        });
    }
    plan.validate(n)?;
    let t = plan.n_constraints;
    match plan.strategy {
        Strategy::Strat1 => {
            let Sketch::Selection { rows, .. } =
                build_sketch(pair_count(n), t, SketchMode::Selection, plan.seed)?
            else {
                unreachable!()
            };
            Ok(rows.into_iter().map(|r| pair_from_index(n, r)).collect())
        }
        Strategy::Strat2 | Strategy::Strat3 => {
            let mut r = rng::stream(plan.seed, "ba/pairs");
            let mut chosen = BTreeSet::new();
            let mut used = alloc::vec![false; n];
            let mut degree = alloc::vec![0usize; n];
            let mut out = Vec::with_capacity(t);
            while out.len() < t {
                let anchor = r.random_range(0..n);
                if degree[anchor] == n - 1 {
                    continue;
                }
                let order = by_distance(points, anchor);
                let free = |j: &&usize| !chosen.contains(&key(anchor, **j));
                let partner = if plan.strategy == Strategy::Strat3 {
                    order.iter().filter(free).find(|&&j| !used[j]).or_else(|| order.iter().find(free))
                } else {
                    order.iter().find(free)
                };
                let j = *partner.expect("anchor has a free partner");
                chosen.insert(key(anchor, j));
                used[anchor] = true;
                used[j] = true;
                degree[anchor] += 1;
                degree[j] += 1;
                out.push(key(anchor, j));
            }
            Ok(out)
        }
    }
}
