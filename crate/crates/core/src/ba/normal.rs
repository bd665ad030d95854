//! Ground-plane normal estimation.

use alloc::vec::Vec;

use nalgebra::{Matrix3, Vector3};
#[allow(unused_imports)]
use num_traits::Float;
use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "snake_case")]
pub enum NormalMethod {
    /// Total-least-squares plane.
    Lsq,
    /// The `m` three-point hypotheses with the largest consensus.
    RansacTopM { m: usize, iterations: usize, threshold: f64 },
}

/// Flips `n` into the +z hemisphere (then +y, then +x on ties).
pub fn canonical(n: Vector3<f64>) -> Vector3<f64> {
    let key = if n.z != 0.0 {
        n.z
    } else if n.y != 0.0 {
        n.y
    } else {
        n.x
    };
    if key < 0.0 {
        -n
    } else {
        n
    }
}

fn lsq_normal(points: &[Vector3<f64>]) -> Result<Vector3<f64>> {
    if points.len() < 3 {
        return Err(Error::DegenerateConfiguration("fewer than 3 ground points"));
    }
    let c = points.iter().sum::<Vector3<f64>>() / points.len() as f64;
    let mut cov = Matrix3::zeros();
    for p in points {
        let d = p - c;
        cov += d * d.transpose();
    }
    let eig = cov.symmetric_eigen();
    let mut idx = [0usize, 1, 2];
    idx.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let (mid, large) = (eig.eigenvalues[idx[1]], eig.eigenvalues[idx[2]]);
    if !(mid > 1e-12 * large.max(1e-300)) {
        return Err(Error::DegenerateConfiguration("collinear ground points"));
    }
    Ok(canonical(eig.eigenvectors.column(idx[0]).normalize()))
}

pub fn fit_ground_normal(points: &[Vector3<f64>], method: &NormalMethod, seed: u64) -> Result<Vec<Vector3<f64>>> {
    let base = lsq_normal(points)?;
    match *method {
        NormalMethod::Lsq => Ok(alloc::vec![base]),
        NormalMethod::RansacTopM { m, iterations, threshold } => {
            if m == 0 || !(threshold > 0.0) {
                return Err(Error::InvalidParameter("ransac normal parameters"));
            }
            let mut r = rng::stream(seed, "ba/normal");
            let mut hyps: Vec<(usize, usize, Vector3<f64>)> = Vec::new();
            for it in 0..iterations {
                let idx = sample(&mut r, points.len(), 3);
                let (a, b, c) = (points[idx.index(0)], points[idx.index(1)], points[idx.index(2)]);
                let n = (b - a).cross(&(c - a));
                let len = n.norm();
                if !(len > 1e-12) {
                    continue;
                }
                // orient like the least-squares normal so hypotheses average sensibly
                let n = if n.dot(&base) < 0.0 { -n / len } else { n / len };
                let count = points.iter().filter(|p| n.dot(&(*p - a)).abs() < threshold).count();
                hyps.push((count, it, n));
            }
            if hyps.len() < m {
                return Err(Error::DegenerateConfiguration("too few normal hypotheses"));
            }
            hyps.sort_by(|x, y| y.0.cmp(&x.0).then(x.1.cmp(&y.1)));
            Ok(hyps.into_iter().take(m).map(|h| h.2).collect())
        }
    }
}
