//! Random sketches of tall least-squares systems.

use alloc::vec::Vec;

use rand::seq::index::sample;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SketchMode {
    /// `t` distinct rows chosen uniformly.
    Selection,
    /// Sparse sign embedding: every input row lands in one random output
    /// row with a random sign.
    Sign,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Sketch {
    Selection { m: usize, rows: Vec<usize> },
    Sign { m: usize, t: usize, target: Vec<usize>, sign: Vec<f64> },
}

pub fn build_sketch(m: usize, t: usize, mode: SketchMode, seed: u64) -> Result<Sketch> {
    if t == 0 || t > m {
        return Err(Error::BadDimensions { t, m });
    }
    let mut r = rng::stream(seed, "ba/sketch");
    Ok(match mode {
        SketchMode::Selection => Sketch::Selection {
            m,
            rows: sample(&mut r, m, t).into_vec(),
        },
        SketchMode::Sign => {
            let mut target = Vec::with_capacity(m);
            let mut sign = Vec::with_capacity(m);
            for _ in 0..m {
                target.push(r.random_range(0..t));
                sign.push(if r.random_bool(0.5) { 1.0 } else { -1.0 });
            }
            Sketch::Sign { m, t, target, sign }
        }
    })
}

impl Sketch {
    pub fn input_dim(&self) -> usize {
        match self {
            Sketch::Selection { m, .. } | Sketch::Sign { m, .. } => *m,
        }
    }

    pub fn output_dim(&self) -> usize {
        match self {
            Sketch::Selection { rows, .. } => rows.len(),
            Sketch::Sign { t, .. } => *t,
        }
    }

    /// `S v`.
    pub fn apply(&self, v: &[f64]) -> Result<Vec<f64>> {
        if v.len() != self.input_dim() {
            return Err(Error::BadDimensions { t: self.output_dim(), m: v.len() });
        }
        Ok(match self {
            Sketch::Selection { rows, .. } => rows.iter().map(|&i| v[i]).collect(),
            Sketch::Sign { t, target, sign, .. } => {
                let mut out = alloc::vec![0.0; *t];
                for ((&row, &s), &x) in target.iter().zip(sign).zip(v) {
                    out[row] += s * x;
                }
                out
            }
        })
    }
}
