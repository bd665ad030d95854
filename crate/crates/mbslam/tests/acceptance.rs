//! Acceptance criteria, one PASS/FAIL line each. Run with
//! `cargo test --release -p mbslam --test acceptance -- --nocapture`.

use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use mbslam::config::{ExperimentConfig, Resolved};
use mbslam_core::ba::problem::jacobian_error;
use mbslam_core::ba::sampling::{sample_pairs, SamplingPlan, Strategy};
use mbslam_core::ba::sketch::{build_sketch, SketchMode};
use mbslam_core::ba::{
    solve, BaProblem, BodyBlock, BoxVariant, ConstraintSet, Family, NormalVariant, Observation, PointRef,
    SolverConfig, TrajectoryVariant,
};
use mbslam_core::geometry::{absolute_orientation, predicted_flow};
use mbslam_core::pipeline::{self, Scene};
use mbslam_core::rng;
use mbslam_core::segmentation::{
    mean_field_infer, CompatibilityMatrix, CrfGraph, GridFeatures, JointLabeling, MarginalFields, PairwiseParams,
    UnaryField,
};
use mbslam_core::sim::{ScenePreset, CLASS_CAR};
use mbslam_core::trajectory::{object_pose_world, ObjectTrack, Trajectory};
use mbslam_core::{CameraIntrinsics, RigidMotion};
use nalgebra::{Vector2, Vector3};
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

/// Relative gap below which two ATE values count as equal when checking an
/// ordering. Constraints that are inactive at the optimum leave the result
/// unchanged up to solver round-off.
const TIE: f64 = 1e-4;

struct Outcome {
    name: &'static str,
    pass: bool,
    detail: String,
}

fn report(name: &'static str, pass: bool, detail: String) -> Outcome {
    println!("{} {name}: {detail}", if pass { "PASS" } else { "FAIL" });
    Outcome { name, pass, detail }
}

fn le(a: f64, b: f64) -> bool {
    a <= b * (1.0 + TIE)
}

fn configs_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn load(name: &str) -> ExperimentConfig {
    ExperimentConfig::load(&configs_dir().join(name)).unwrap()
}

struct SeedResult {
    /// Object ATE rmse per ablation row.
    object: Vec<f64>,
    ms_camera: f64,
    strat1_object: f64,
    elapsed: Duration,
}

/// Segments and initializes once, then solves each ablation row from the
/// same start. The initialization carries the normals and box pairs of the
/// fullest row; rows without those families ignore them.
fn ablation_seed(rows: &[ExperimentConfig], seed: u64) -> (SeedResult, Scene, Resolved) {
    let t = Instant::now();
    let full = rows.last().unwrap().resolve(seed).unwrap();
    let scene = pipeline::simulate(&full.scene).unwrap();
    let seg = pipeline::segment(&scene, &full.pipeline, seed).unwrap();
    let init = pipeline::initialize(&scene, &seg, &full.pipeline, seed).unwrap();
    let mut object = Vec::new();
    let mut ms_camera = f64::NAN;
    for (i, row) in rows.iter().enumerate() {
        let r = row.resolve(seed).unwrap();
        assert_eq!(r.scene, full.scene);
        let mut p = init.clone();
        p.constraints = r.pipeline.constraints;
        let (refined, _) = solve(&p, &r.pipeline.solver).unwrap();
        let ev = pipeline::evaluate(&scene.ground_truth, &refined, r.pipeline.histogram_bin_width).unwrap();
        object.push(ev.main_body().map_or(f64::INFINITY, |b| b.rmse));
        if i == 0 {
            ms_camera = ev.camera.rmse;
        }
    }
    let elapsed = t.elapsed();
    let mut s1 = full.pipeline.clone();
    s1.sampling.strategy = Strategy::Strat1;
    let p1 = pipeline::initialize(&scene, &seg, &s1, seed).unwrap();
    let (r1, _) = solve(&p1, &s1.solver).unwrap();
    let strat1_object = pipeline::evaluate(&scene.ground_truth, &r1, s1.histogram_bin_width)
        .unwrap()
        .main_body()
        .map_or(f64::INFINITY, |b| b.rmse);
    (
        SeedResult {
            object,
            ms_camera,
            strat1_object,
            elapsed,
        },
        scene,
        full,
    )
}

/// Camera ATE with every feature treated as static.
fn camera_without_segmentation(scene: &Scene, resolved: &Resolved, seed: u64) -> f64 {
    let mut cfg = resolved.pipeline.clone();
    cfg.motion_segmentation = false;
    cfg.constraints = ConstraintSet::default();
    let seg = pipeline::segment(scene, &cfg, seed).unwrap();
    let init = pipeline::initialize(scene, &seg, &cfg, seed).unwrap();
    let (refined, _) = solve(&init, &cfg.solver).unwrap();
    pipeline::evaluate(&scene.ground_truth, &refined, cfg.histogram_bin_width).unwrap().camera.rmse
}

fn moving_fraction(scene: &Scene) -> f64 {
    let (mut moving, mut total) = (0usize, 0usize);
    for f in &scene.frames {
        for x in &f.features {
            total += 1;
            if scene.ground_truth.point(x.track_id).is_some_and(|p| p.class == CLASS_CAR && p.moving) {
                moving += 1;
            }
        }
    }
    moving as f64 / total as f64
}

fn ablation_and_segmentation_gain() -> Vec<Outcome> {
    let rows = ["ms.json", "ms_nc.json", "ms_nc_tc.json", "full.json"].map(load);
    let mut ordered = 0;
    let mut strat = 0;
    let mut gain = 0;
    let mut min_fraction = f64::INFINITY;
    let mut worst_ratio = 0.0f64;
    let mut ablation_time = Duration::ZERO;
    for seed in 0..20u64 {
        let (r, scene, resolved) = ablation_seed(&rows, seed);
        ablation_time += r.elapsed;
        let o = &r.object;
        let ok = le(o[3], o[2]) && le(o[2], o[0]);
        ordered += ok as usize;
        strat += le(o[3], r.strat1_object) as usize;
        let mut line = format!(
            "  seed {seed:2}: object rmse MS {:.6} MS+NC {:.6} MS+NC+TC {:.6} full {:.6} strat1 {:.6}",
            o[0], o[1], o[2], o[3], r.strat1_object
        );
        if seed < 10 {
            let without = camera_without_segmentation(&scene, &resolved, seed);
            let ratio = r.ms_camera / without;
            worst_ratio = worst_ratio.max(ratio);
            min_fraction = min_fraction.min(moving_fraction(&scene));
            gain += (ratio <= 0.7) as usize;
            line += &format!(" | camera MS {:.6} none {:.6}", r.ms_camera, without);
        }
        println!("{line}");
    }
    let secs = ablation_time.as_secs_f64();
    vec![
        report(
            "ablation ordering",
            ordered >= 15 && secs < 600.0,
            format!("full <= MS+NC+TC <= MS in {ordered}/20 seeds (need 15), {secs:.0} s (limit 600 s)"),
        ),
        report(
            "motion segmentation gain",
            gain >= 8 && min_fraction >= 0.2,
            format!(
                "camera rmse ratio <= 0.7 in {gain}/10 seeds (need 8), worst ratio {worst_ratio:.4}, moving features >= {:.0}%",
                100.0 * min_fraction
            ),
        ),
        report(
            "sampling strategy",
            strat >= 12,
            format!("Strat3 <= Strat1 in {strat}/20 seeds (need 12)"),
        ),
    ]
}

fn k() -> CameraIntrinsics {
    CameraIntrinsics::new(500.0, 500.0, 320.0, 240.0).unwrap()
}

fn rv(r: &mut rng::Rng, s: f64) -> Vector3<f64> {
    Vector3::new(r.random_range(-s..s), r.random_range(-s..s), r.random_range(-s..s))
}

/// Five frames of a forward-moving camera with one moving body, every
/// parameter perturbed away from the exact solution.
fn jacobian_problem(seed: u64) -> BaProblem {
    let mut r = rng::rng(seed);
    let frames = 5;
    let cams: Vec<RigidMotion> = (0..frames)
        .map(|f| {
            let f = f as f64;
            RigidMotion::from_axis_angle(Vector3::new(0.0, 0.02 * f, 0.0), Vector3::new(0.1 * f, 0.0, f))
        })
        .collect();
    let statics: Vec<Vector3<f64>> = (0..20)
        .map(|_| Vector3::new(r.random_range(-8.0..8.0), r.random_range(-3.0..3.0), r.random_range(12.0..40.0)))
        .collect();
    let poses: Vec<RigidMotion> = (0..frames)
        .map(|f| {
            let f = f as f64;
            let world = RigidMotion::from_axis_angle(Vector3::new(0.0, 0.01 * f, 0.0), Vector3::new(0.3 * f, 0.0, 0.8 * f));
            cams[f as usize].inverse().compose(&world)
        })
        .collect();
    let centre = Vector3::new(3.0, 1.0, 16.0);
    let points: Vec<Vector3<f64>> = (0..10).map(|_| centre + rv(&mut r, 1.5)).collect();
    let mut observations = Vec::new();
    for f in 0..frames {
        let seen = statics
            .iter()
            .enumerate()
            .map(|(i, x)| (PointRef::Static(i), cams[f].inverse().transform_point(x)))
            .chain(points.iter().enumerate().map(|(i, x)| (PointRef::Body(0, i), poses[f].transform_point(x))));
        for (point, xc) in seen {
            observations.push(Observation {
                frame: f,
                point,
                pixel: k().project_camera(&xc).unwrap() + Vector2::new(r.random_range(-1.0..1.0), r.random_range(-1.0..1.0)),
                measured: xc + rv(&mut r, 0.2),
            });
        }
    }
    let anchor = points.iter().sum::<Vector3<f64>>() / points.len() as f64;
    let mut p = BaProblem {
        intrinsics: k(),
        camera_poses: cams,
        fixed_camera: 0,
        static_points: statics,
        static_tracks: (0..20).collect(),
        bodies: vec![BodyBlock {
            id: 1,
            first_frame: 0,
            interpolated: vec![false; frames],
            poses,
            tracks: (100..110).collect(),
            points,
            anchor,
            pairs: Vec::new(),
            pair_bounds: Vec::new(),
            shared_bound: Vec::new(),
        }],
        observations,
        normals: (0..3).map(|_| (-Vector3::y() + rv(&mut r, 0.02)).normalize()).collect(),
        constraints: ConstraintSet::default(),
    };
    for c in p.camera_poses.iter_mut().skip(1) {
        *c = c.retract(&rv(&mut r, 0.01), &rv(&mut r, 0.1));
    }
    for b in &mut p.bodies {
        for v in b.poses.iter_mut().skip(1) {
            *v = v.retract(&rv(&mut r, 0.01), &rv(&mut r, 0.1));
        }
        for x in &mut b.points {
            *x += rv(&mut r, 0.3);
        }
    }
    p
}

fn jacobian_suite() -> Outcome {
    let t = Instant::now();
    let config = SolverConfig {
        delta: Vector3::new(1.0, 0.8, 1.2),
        ..SolverConfig::default()
    };
    let boxes = [BoxVariant::Bc1, BoxVariant::Bc2, BoxVariant::Bc3, BoxVariant::Bc4];
    let mut worst = Vec::new();
    for family in Family::ALL {
        let mut w = 0.0f64;
        for seed in 0..100u64 {
            let mut p = jacobian_problem(seed);
            match family {
                Family::Nc1 => p.constraints.normal = Some(NormalVariant::Nc1),
                Family::Nc2 => p.constraints.normal = Some(NormalVariant::Nc2),
                Family::Tc1 => p.constraints.trajectory = Some(TrajectoryVariant::Tc1),
                Family::Tc2 => p.constraints.trajectory = Some(TrajectoryVariant::Tc2),
                Family::Bc => {
                    p.constraints.boxes = Some(boxes[seed as usize % 4]);
                    for b in &mut p.bodies {
                        let plan = SamplingPlan {
                            strategy: Strategy::Strat3,
                            n_constraints: 15,
                            seed,
                        };
                        b.pairs = sample_pairs(&b.points, &plan).unwrap();
                    }
                    p.init_bounds(&config.delta);
                    // off the optimum, where the bound Jacobian is not flat
                    for b in &mut p.bodies {
                        for u in b.pair_bounds.iter_mut().flatten().chain(b.shared_bound.iter_mut()) {
                            *u *= 0.3;
                        }
                    }
                }
                Family::Ba2d | Family::Ba3d => {}
            }
            w = w.max(jacobian_error(&p, &config, family, 1e-6).unwrap());
        }
        worst.push((family.name(), w));
    }
    let secs = t.elapsed().as_secs_f64();
    let max = worst.iter().map(|w| w.1).fold(0.0, f64::max);
    let list: Vec<String> = worst.iter().map(|(n, w)| format!("{n} {w:.1e}")).collect();
    report(
        "jacobian suite",
        max < 1e-5 && secs < 30.0,
        format!("7 families x 100 seeds, worst relative error {max:.1e} (limit 1e-5), {secs:.1} s; {}", list.join(", ")),
    )
}

fn exactness() -> Outcome {
    // noiseless default scene through every stage
    let preset = ScenePreset {
        noise_sigma_points: 0.0,
        noise_sigma_pixels: 0.0,
        noise_sigma_ground: None,
        ..ScenePreset::default()
    };
    let cfg = load("full.json");
    let mut pipe = cfg.resolve(0).unwrap().pipeline;
    pipe.constraints = ConstraintSet::default();
    let mut worst_pipeline = 0.0f64;
    for seed in 0..2u64 {
        let scene = pipeline::simulate(&preset.build(seed).unwrap()).unwrap();
        let out = pipeline::run(&scene, &pipe, seed).unwrap();
        let body = out.evaluation.main_body().map_or(f64::INFINITY, |b| b.rmse);
        worst_pipeline = worst_pipeline.max(out.evaluation.camera.rmse).max(body);
    }

    let mut worst_ao = 0.0f64;
    let mut r = rng::rng(7);
    for _ in 0..100 {
        let m = RigidMotion::from_axis_angle(rv(&mut r, 3.0), rv(&mut r, 10.0));
        let pairs: Vec<_> = (0..20)
            .map(|_| {
                let p = rv(&mut r, 5.0);
                (p, m.transform_point(&p))
            })
            .collect();
        worst_ao = worst_ao.max(absolute_orientation(&pairs).unwrap().max_abs_diff(&m));
    }

    let mut worst_flow = 0.0f64;
    for _ in 0..100 {
        let px = Vector2::new(r.random_range(0.0..640.0), r.random_range(0.0..480.0));
        let z = r.random_range(1.0..80.0);
        let moved = predicted_flow(&k(), &RigidMotion::identity(), &px, z).unwrap();
        worst_flow = worst_flow.max((moved - px).amax());
    }
    // a static camera at the origin leaves the virtual poses unchanged
    let virtual_poses: Vec<RigidMotion> = (0..10).map(|_| RigidMotion::from_axis_angle(rv(&mut r, 2.0), rv(&mut r, 20.0))).collect();
    let track = ObjectTrack {
        body_id: 0,
        first_frame: 3,
        interpolated: vec![false; virtual_poses.len()],
        virtual_poses: virtual_poses.clone(),
        member_tracks: Vec::new(),
    };
    let camera = Trajectory::from_contiguous(0, vec![RigidMotion::identity(); 13]);
    let world = object_pose_world(&camera, &track).unwrap();
    let worst_transfer = world
        .poses()
        .iter()
        .zip(&virtual_poses)
        .map(|((_, a), b)| a.max_abs_diff(b))
        .fold(0.0, f64::max);
    report(
        "exactness",
        worst_pipeline < 1e-6 && worst_ao < 1e-9 && worst_flow < 1e-9 && worst_transfer < 1e-9,
        format!(
            "noiseless pipeline rmse {worst_pipeline:.1e} (limit 1e-6), absolute orientation {worst_ao:.1e} (limit 1e-9), identity world transfer {worst_transfer:.1e} and flow {worst_flow:.1e} (limit 1e-9)"
        ),
    )
}

/// Marginals by summing over every joint labeling.
fn exact_marginals(u: &UnaryField, lam: &CompatibilityMatrix, graph: &CrfGraph) -> MarginalFields {
    let n = u.len();
    let nc = u.n_classes();
    let states = 2 * nc;
    let mut obj = vec![vec![0.0; nc]; n];
    let mut mot = vec![[0.0; 2]; n];
    let mut z = 0.0;
    for s in 0..states.pow(n as u32) {
        let mut code = s;
        let mut lab = JointLabeling {
            object: vec![0; n],
            motion: vec![0; n],
        };
        for i in 0..n {
            lab.object[i] = (code % states) / 2;
            lab.motion[i] = code % 2;
            code /= states;
        }
        let mut e = 0.0;
        for i in 0..n {
            e += u.object[i][lab.object[i]] + u.motion[i][lab.motion[i]] + lam.get(lab.object[i], lab.motion[i]);
        }
        for &(i, j, p, g) in &graph.edges {
            if lab.object[i] != lab.object[j] {
                e += p;
            }
            if lab.motion[i] != lab.motion[j] {
                e += g;
            }
        }
        let w = (-e).exp();
        z += w;
        for i in 0..n {
            obj[i][lab.object[i]] += w;
            mot[i][lab.motion[i]] += w;
        }
    }
    obj.iter_mut().flatten().for_each(|v| *v /= z);
    mot.iter_mut().flatten().for_each(|v| *v /= z);
    MarginalFields { object: obj, motion: mot }
}

fn total_variation(a: &MarginalFields, b: &MarginalFields) -> f64 {
    let obj = a
        .object
        .iter()
        .zip(&b.object)
        .map(|(x, y)| 0.5 * x.iter().zip(y).map(|(p, q)| (p - q).abs()).sum::<f64>());
    let mot = a.motion.iter().zip(&b.motion).map(|(x, y)| (x[0] - y[0]).abs());
    obj.chain(mot).fold(0.0, f64::max)
}

fn mean_field_oracle() -> Outcome {
    let t = Instant::now();
    let mut worst = 0.0f64;
    let mut count = 0;
    let mut r = rng::rng(11);
    for (width, height) in [(2, 1), (1, 2), (2, 2)] {
        for classes in [2, 4] {
            for weight in [0.02, 0.05, 0.1] {
                for _ in 0..10 {
                    let n = width * height;
                    let grid = GridFeatures {
                        width,
                        height,
                        appearance: (0..n).map(|_| [r.random(), r.random(), r.random()]).collect(),
                        flow: (0..n).map(|_| Some(Vector2::new(r.random_range(-2.0..2.0), r.random_range(-2.0..2.0)))).collect(),
                    };
                    // every kernel is bounded by its weight, so each edge
                    // penalty stays at or below `weight`
                    let params = PairwiseParams {
                        w_smooth: weight / 2.0,
                        w_appearance: weight / 2.0,
                        w_motion: weight,
                        radius: 2,
                        ..PairwiseParams::default()
                    };
                    let graph = CrfGraph::from_grid(&grid, &params);
                    assert!(graph.edges.iter().all(|e| e.2 <= weight + 1e-12 && e.3 <= weight + 1e-12));
                    let u = UnaryField {
                        object: (0..n).map(|_| (0..classes).map(|_| r.random_range(0.0..2.0)).collect()).collect(),
                        motion: (0..n).map(|_| [r.random_range(0.0..2.0), r.random_range(0.0..2.0)]).collect(),
                    };
                    // the compatibility term couples the two layers within a
                    // cell, so weak coupling bounds it too
                    let lam = CompatibilityMatrix::new((0..classes).map(|_| [r.random_range(0.0..weight), r.random_range(0.0..weight)]).collect())
                        .unwrap();
                    let mf = mean_field_infer(&u, &lam, &graph, 500, 1e-12).unwrap();
                    worst = worst.max(total_variation(&mf.marginals, &exact_marginals(&u, &lam, &graph)));
                    count += 1;
                }
            }
        }
    }
    let secs = t.elapsed().as_secs_f64();
    report(
        "mean-field oracle",
        worst < 1e-3 && secs < 5.0,
        format!("{count} instances up to 2x2 cells, pairwise and compatibility weights <= 0.1, worst TV {worst:.1e} (limit 1e-3), {secs:.2} s"),
    )
}

fn sketch_property() -> Outcome {
    let (m, t) = (2000, 400);
    let mut r = rng::rng(5);
    let v: Vec<f64> = (0..m).map(|_| StandardNormal.sample(&mut r)).collect();
    let norm = |x: &[f64]| x.iter().map(|a| a * a).sum::<f64>().sqrt();
    let full = norm(&v);
    let inside = (0..200u64)
        .filter(|&seed| {
            let s = build_sketch(m, t, SketchMode::Sign, seed).unwrap();
            let ratio = norm(&s.apply(&v).unwrap()) / full;
            (0.5..=1.5).contains(&ratio)
        })
        .count();
    let mut exact = true;
    for seed in 0..20 {
        let s = build_sketch(m, m, SketchMode::Selection, seed).unwrap();
        let mut out = s.apply(&v).unwrap();
        let mut sorted = v.clone();
        out.sort_by(f64::total_cmp);
        sorted.sort_by(f64::total_cmp);
        exact &= out == sorted;
    }
    report(
        "sketch property",
        inside >= 190 && exact,
        format!("sign sketch m={m} t={t}: {inside}/200 seeds within [0.5, 1.5] of the full norm (need 190); selection with t = m exact: {exact}"),
    )
}

fn cli_determinism() -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let smoke = configs_dir().join("smoke.json");
    let mut trees = Vec::new();
    for name in ["a", "b"] {
        let out = tmp.path().join(name);
        for stage in ["run", "export-plot"] {
            let status = Command::new(env!("CARGO_BIN_EXE_mbslam"))
                .arg(stage)
                .args(["--seed", "9", "--config", smoke.to_str().unwrap(), "--out", out.to_str().unwrap()])
                .output()
                .unwrap()
                .status;
            assert!(status.success());
        }
        let files = mbslam::commands::list_files(&out).unwrap();
        let bytes: Vec<(String, Vec<u8>)> = files.into_iter().map(|f| (f.clone(), std::fs::read(out.join(&f)).unwrap())).collect();
        trees.push(bytes);
    }
    let same = trees[0] == trees[1];
    report(
        "determinism",
        same,
        format!("two CLI runs with seed 9: {} files, byte-identical: {same}", trees[0].len()),
    )
}

#[test]
fn acceptance() {
    let mut outcomes = vec![
        jacobian_suite(),
        exactness(),
        mean_field_oracle(),
        sketch_property(),
        cli_determinism(),
    ];
    outcomes.extend(ablation_and_segmentation_gain());
    let failed: Vec<_> = outcomes.iter().filter(|o| !o.pass).map(|o| format!("{}: {}", o.name, o.detail)).collect();
    println!("{}/{} criteria passed", outcomes.len() - failed.len(), outcomes.len());
    assert!(failed.is_empty(), "failed criteria:\n{}", failed.join("\n"));
}
