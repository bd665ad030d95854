//! Plain-text exports: trajectories, CSV tables and PPM label images.

use std::fmt::Write as _;

use mbslam_core::ba::solver::IterationRecord;
use mbslam_core::evaluation::{ComparisonRow, Histogram};
use mbslam_core::segmentation::JointLabeling;
use mbslam_core::sim::Raster;
use mbslam_core::trajectory::Trajectory;
use mbslam_core::RigidMotion;
use nalgebra::{Matrix3, Rotation3, UnitQuaternion, Vector3};

/// `frame tx ty tz qx qy qz qw` per line after a `#` header.
pub fn trajectory_to_text(t: &Trajectory) -> String {
    let mut out = String::from("# frame tx ty tz qx qy qz qw\n");
    for (k, p) in t.poses() {
        let q = UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(p.rotation));
        let q = if q.w < 0.0 { -q.into_inner() } else { q.into_inner() };
        let v = [p.translation.x, p.translation.y, p.translation.z, q.i, q.j, q.k, q.w];
        write!(out, "{k}").unwrap();
        for x in v {
            write!(out, " {x:.16e}").unwrap();
        }
        out.push('\n');
    }
    out
}

pub fn trajectory_from_text(text: &str) -> Result<Trajectory, String> {
    let mut poses = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 8 {
            return Err(format!("line {}: expected 8 fields, found {}", n + 1, fields.len()));
        }
        let frame: usize = fields[0].parse().map_err(|e| format!("line {}: {e}", n + 1))?;
        let v: Vec<f64> = fields[1..]
            .iter()
            .map(|f| f.parse::<f64>())
            .collect::<Result<_, _>>()
            .map_err(|e| format!("line {}: {e}", n + 1))?;
        let q = UnitQuaternion::from_quaternion(nalgebra::Quaternion::new(v[6], v[3], v[4], v[5]));
        let r: Matrix3<f64> = q.to_rotation_matrix().into_inner();
        poses.push((frame, RigidMotion::new(r, Vector3::new(v[0], v[1], v[2]))));
    }
    Trajectory::new(poses).map_err(|e| e.to_string())
}

pub fn costs_csv(records: &[IterationRecord]) -> String {
    let mut out = String::from("iter,total,ba2d,ba3d,nc,tc,bc\n");
    for r in records {
        let c = &r.costs;
        writeln!(
            out,
            "{},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e}",
            r.iter, r.total, c.ba2d, c.ba3d, c.nc, c.tc, c.bc
        )
        .unwrap();
    }
    out
}

/// One block of rows per target (e.g. camera, object).
pub fn comparison_csv(tables: &[(&str, &[ComparisonRow])]) -> String {
    let mut out = String::from("target,name,rmse,mean,median,rmse_change_pct\n");
    for (target, rows) in tables {
        for r in *rows {
            writeln!(
                out,
                "{target},{},{:.16e},{:.16e},{:.16e},{:.16e}",
                csv_field(&r.name),
                r.rmse,
                r.mean,
                r.median,
                r.rmse_change_pct
            )
            .unwrap();
        }
    }
    out
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

pub fn histogram_csv(h: &Histogram) -> String {
    let mut out = String::from("bin_start,count\n");
    for (e, c) in h.bin_edges.iter().zip(&h.counts) {
        writeln!(out, "{e:.16e},{c}").unwrap();
    }
    out
}

/// Object-class colors, indexed by class: road, car, vegetation, sky, then
/// repeating for further classes.
pub const CLASS_PALETTE: [[u8; 3]; 4] = [[128, 64, 128], [0, 0, 142], [107, 142, 35], [70, 130, 180]];
/// Motion colors: static, moving.
pub const MOTION_PALETTE: [[u8; 3]; 2] = [[40, 40, 40], [255, 200, 0]];

/// Binary PPM (P6) of per-cell labels at raster resolution.
pub fn label_ppm(labels: &[usize], raster: &Raster, palette: &[[u8; 3]]) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", raster.width, raster.height).into_bytes();
    for &l in labels {
        out.extend_from_slice(&palette[l % palette.len()]);
    }
    out
}

pub fn object_ppm(l: &JointLabeling, raster: &Raster) -> Vec<u8> {
    label_ppm(&l.object, raster, &CLASS_PALETTE)
}

pub fn motion_ppm(l: &JointLabeling, raster: &Raster) -> Vec<u8> {
    label_ppm(&l.motion, raster, &MOTION_PALETTE)
}
