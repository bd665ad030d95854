//! Pipeline stages as file-to-file steps. Each stage reads the artifacts
//! of the previous one from `from` and writes its own into `out`; `run`
//! chains them in one process and writes the same files.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::time::Instant;

use mbslam_core::ba::solver::SolveReport;
use mbslam_core::ba::BaProblem;
use mbslam_core::evaluation::{compare_runs, ComparisonRow, TrajectoryReport};
use mbslam_core::pipeline::{self, EvaluationReport, Scene, Segmentation};
use mbslam_core::trajectory::Trajectory;
use mbslam_core::RigidMotion;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::config::{ExperimentConfig, Resolved};
use crate::error::{CliError, Result};
use crate::{formats, json};

pub const SCENE_FILE: &str = "scene.json";
pub const LABELS_FILE: &str = "labels.json";
pub const INIT_FILE: &str = "init.json";
pub const REFINED_FILE: &str = "refined.json";
pub const COSTS_FILE: &str = "costs.csv";
pub const EVALUATION_FILE: &str = "evaluation.json";
pub const REPORT_FILE: &str = "report.json";
pub const COMPARISON_FILE: &str = "comparison.json";
pub const COMPARISON_CSV: &str = "comparison.csv";

const EVALUATION: &str = "evaluation/1";
const REPORT: &str = "report/1";
const COMPARISON: &str = "comparison/1";

/// Line-delimited JSON events on standard error.
#[derive(Debug, Clone)]
pub struct Logger {
    start: Instant,
    enabled: bool,
}

impl Logger {
    pub fn stderr() -> Self {
        Self {
            start: Instant::now(),
            enabled: true,
        }
    }

    pub fn silent() -> Self {
        Self {
            start: Instant::now(),
            enabled: false,
        }
    }

    pub fn stage(&self, stage: &str, cost: Option<f64>) {
        if self.enabled {
            let e = json!({
                "event": "stage",
                "stage": stage,
                "wall_s": self.start.elapsed().as_secs_f64(),
                "cost": cost,
            });
            eprintln!("{e}");
        }
    }
}

/// Everything a stage needs: validated configuration and directories.
#[derive(Debug, Clone)]
pub struct Context {
    pub config: ExperimentConfig,
    pub resolved: Resolved,
    pub out: PathBuf,
    pub from: PathBuf,
    pub log: Logger,
}

impl Context {
    pub fn new(config: ExperimentConfig, seed: u64, out: Option<PathBuf>, from: Option<PathBuf>, log: Logger) -> Result<Self> {
        let resolved = config.resolve(seed)?;
        let out = out.or_else(|| config.output.clone()).unwrap_or_else(|| PathBuf::from("out"));
        let from = from.unwrap_or_else(|| out.clone());
        Ok(Self {
            config,
            resolved,
            out,
            from,
            log,
        })
    }

    fn out_path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn input(&self, name: &str) -> PathBuf {
        self.from.join(name)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Refined {
    pub problem: BaProblem,
    pub report: SolveReport,
}

pub fn read_scene(path: &Path) -> Result<Scene> {
    json::read(path, json::SCENE, "scene")
}

pub fn read_labels(path: &Path) -> Result<Segmentation> {
    json::read(path, json::LABELS, "labels")
}

pub fn read_problem(path: &Path) -> Result<BaProblem> {
    json::read(path, json::BA, "problem")
}

pub fn read_refined(path: &Path) -> Result<Refined> {
    let problem = read_problem(path)?;
    let report = json::read(path, json::BA, "report")?;
    Ok(Refined { problem, report })
}

fn write_refined(path: &Path, r: &Refined) -> Result<()> {
    let text = json::to_string(&json!({
        "format": json::BA,
        "problem": r.problem,
        "report": r.report,
    }));
    json::write_text(path, &text)
}

pub fn simulate(ctx: &Context) -> Result<PathBuf> {
    let scene = pipeline::simulate(&ctx.resolved.scene)?;
    let path = ctx.out_path(SCENE_FILE);
    json::write(&path, json::SCENE, "scene", &scene)?;
    ctx.log.stage("simulate", None);
    Ok(path)
}

fn segment_scene(ctx: &Context, scene: &Scene) -> Result<(PathBuf, Segmentation)> {
    let seg = pipeline::segment(scene, &ctx.resolved.pipeline, ctx.resolved.seed)?;
    let path = ctx.out_path(LABELS_FILE);
    json::write(&path, json::LABELS, "labels", &seg)?;
    ctx.log.stage("segment", None);
    Ok((path, seg))
}

pub fn segment(ctx: &Context) -> Result<PathBuf> {
    let scene = read_scene(&ctx.input(SCENE_FILE))?;
    Ok(segment_scene(ctx, &scene)?.0)
}

fn init_scene(ctx: &Context, scene: &Scene, seg: &Segmentation) -> Result<(PathBuf, BaProblem)> {
    let problem = pipeline::initialize(scene, seg, &ctx.resolved.pipeline, ctx.resolved.seed)?;
    let path = ctx.out_path(INIT_FILE);
    json::write(&path, json::BA, "problem", &problem)?;
    ctx.log.stage("init", None);
    Ok((path, problem))
}

pub fn init(ctx: &Context) -> Result<PathBuf> {
    let scene = read_scene(&ctx.input(SCENE_FILE))?;
    let seg = read_labels(&ctx.input(LABELS_FILE))?;
    Ok(init_scene(ctx, &scene, &seg)?.0)
}

fn refine_problem(ctx: &Context, problem: &BaProblem) -> Result<(PathBuf, Refined)> {
    let (refined, report) = pipeline::refine(problem, &ctx.resolved.pipeline)?;
    let r = Refined {
        problem: refined,
        report,
    };
    let path = ctx.out_path(REFINED_FILE);
    write_refined(&path, &r)?;
    json::write_text(&ctx.out_path(COSTS_FILE), &formats::costs_csv(&r.report.iterations))?;
    ctx.log.stage("refine", Some(r.report.final_cost));
    Ok((path, r))
}

pub fn refine(ctx: &Context) -> Result<PathBuf> {
    let problem = read_problem(&ctx.input(INIT_FILE))?;
    Ok(refine_problem(ctx, &problem)?.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub initial: EvaluationReport,
    pub refined: EvaluationReport,
}

fn trajectory_files(ctx: &Context, scene: &Scene, problem: &BaProblem, eval: &EvaluationReport) -> Result<Vec<String>> {
    let mut files = Vec::new();
    let mut put = |name: String, t: &Trajectory| -> Result<()> {
        json::write_text(&ctx.out_path(&name), &formats::trajectory_to_text(t))?;
        files.push(name);
        Ok(())
    };
    let gt = &scene.ground_truth;
    put("trajectories/camera_estimate.txt".into(), &pipeline::camera_estimate(problem))?;
    put(
        "trajectories/camera_reference.txt".into(),
        &Trajectory::from_contiguous(0, gt.camera_poses.clone()),
    )?;
    for (body, rep) in problem.bodies.iter().zip(&eval.bodies) {
        let est = pipeline::body_estimate(problem, body);
        // the estimate mapped into the reference frame by the ATE alignment
        let aligned = est.transformed(&rep.report.alignment);
        put(format!("trajectories/body_{}_estimate.txt", body.id), &est)?;
        put(format!("trajectories/body_{}_aligned.txt", body.id), &aligned)?;
        let reference = Trajectory::new(
            body.frames()
                .map(|k| (k, RigidMotion::new(gt.object_poses[k].rotation, gt.object_poses[k].translation)))
                .collect(),
        )?;
        put(format!("trajectories/body_{}_object_pose.txt", body.id), &reference)?;
    }
    Ok(files)
}

fn evaluate_problems(ctx: &Context, scene: &Scene, initial: &BaProblem, refined: &BaProblem) -> Result<(PathBuf, Evaluation)> {
    let w = ctx.resolved.pipeline.histogram_bin_width;
    let e = Evaluation {
        initial: pipeline::evaluate(&scene.ground_truth, initial, w)?,
        refined: pipeline::evaluate(&scene.ground_truth, refined, w)?,
    };
    trajectory_files(ctx, scene, refined, &e.refined)?;
    let path = ctx.out_path(EVALUATION_FILE);
    json::write(&path, EVALUATION, "evaluation", &e)?;
    ctx.log.stage("evaluate", None);
    Ok((path, e))
}

pub fn evaluate(ctx: &Context) -> Result<PathBuf> {
    let scene = read_scene(&ctx.input(SCENE_FILE))?;
    let initial = read_problem(&ctx.input(INIT_FILE))?;
    let refined = read_refined(&ctx.input(REFINED_FILE))?;
    Ok(evaluate_problems(ctx, &scene, &initial, &refined.problem)?.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub rmse: f64,
    pub mean: f64,
    pub median: f64,
}

impl From<&TrajectoryReport> for Summary {
    fn from(r: &TrajectoryReport) -> Self {
        Self {
            rmse: r.rmse,
            mean: r.mean,
            median: r.median,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub name: String,
    pub seed: u64,
    pub camera: Summary,
    pub object: Option<Summary>,
    pub initial_camera: Summary,
    pub initial_object: Option<Summary>,
    pub iterations: usize,
    pub termination: mbslam_core::ba::Termination,
    pub initial_cost: f64,
    pub final_cost: f64,
    /// Artifact files relative to the output directory.
    pub artifacts: Vec<String>,
}

/// All stages from simulation to evaluation; returns the report path.
pub fn run(ctx: &Context) -> Result<PathBuf> {
    let scene = pipeline::simulate(&ctx.resolved.scene)?;
    json::write(&ctx.out_path(SCENE_FILE), json::SCENE, "scene", &scene)?;
    ctx.log.stage("simulate", None);
    run_on_scene(ctx, &scene).map(|(p, _)| p)
}

fn run_on_scene(ctx: &Context, scene: &Scene) -> Result<(PathBuf, Evaluation)> {
    let (_, seg) = segment_scene(ctx, scene)?;
    let (_, initial) = init_scene(ctx, scene, &seg)?;
    let (_, refined) = refine_problem(ctx, &initial)?;
    let (_, eval) = evaluate_problems(ctx, scene, &initial, &refined.problem)?;
    let report = RunReport {
        name: ctx.config.label(),
        seed: ctx.resolved.seed,
        camera: (&eval.refined.camera).into(),
        object: eval.refined.main_body().map(Into::into),
        initial_camera: (&eval.initial.camera).into(),
        initial_object: eval.initial.main_body().map(Into::into),
        iterations: refined.report.iterations.len() - 1,
        termination: refined.report.termination,
        initial_cost: refined.report.initial_cost,
        final_cost: refined.report.final_cost,
        artifacts: list_files(&ctx.out)?,
    };
    let path = ctx.out_path(REPORT_FILE);
    json::write(&path, REPORT, "report", &report)?;
    Ok((path, eval))
}

/// Files under `dir`, relative and sorted.
pub fn list_files(dir: &Path) -> Result<Vec<String>> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeSet<String>) -> Result<()> {
        let entries = std::fs::read_dir(dir).map_err(|e| CliError::io(dir, e))?;
        for entry in entries {
            let entry = entry.map_err(|e| CliError::io(dir, e))?;
            let path = entry.path();
            if path.is_dir() {
                walk(root, &path, out)?;
            } else {
                let rel = path.strip_prefix(root).expect("walk stays under root");
                out.insert(rel.to_string_lossy().replace('\\', "/"));
            }
        }
        Ok(())
    }
    let mut out = BTreeSet::new();
    if dir.exists() {
        walk(dir, dir, &mut out)?;
    }
    Ok(out.into_iter().collect())
}

/// Plot-ready exports of an existing run directory: label images, the cost
/// history and error histograms.
pub fn export_plot(ctx: &Context) -> Result<PathBuf> {
    let dir = ctx.out_path("plots");
    let scene = read_scene(&ctx.input(SCENE_FILE))?;
    let raster = &scene.ground_truth.raster;
    let labels = read_labels(&ctx.input(LABELS_FILE))?;
    for f in &labels.frames {
        let name = |kind: &str| dir.join(format!("labels/{kind}_{:03}.ppm", f.frame));
        write_bytes(&name("motion"), &formats::motion_ppm(&f.labeling, raster))?;
        write_bytes(&name("object"), &formats::object_ppm(&f.labeling, raster))?;
    }
    let refined = read_refined(&ctx.input(REFINED_FILE))?;
    json::write_text(&dir.join(COSTS_FILE), &formats::costs_csv(&refined.report.iterations))?;
    let eval: Evaluation = json::read(&ctx.input(EVALUATION_FILE), EVALUATION, "evaluation")?;
    json::write_text(&dir.join("histogram_camera.csv"), &formats::histogram_csv(&eval.refined.camera.histogram))?;
    json::write_text(&dir.join("errors_camera.csv"), &errors_csv(&eval.refined.camera))?;
    for b in &eval.refined.bodies {
        json::write_text(
            &dir.join(format!("histogram_body_{}.csv", b.body)),
            &formats::histogram_csv(&b.report.histogram),
        )?;
        json::write_text(&dir.join(format!("errors_body_{}.csv", b.body)), &errors_csv(&b.report))?;
    }
    ctx.log.stage("export-plot", None);
    Ok(dir)
}

fn errors_csv(r: &TrajectoryReport) -> String {
    let mut out = String::from("frame,error\n");
    for (f, e) in r.frames.iter().zip(&r.per_pose_errors) {
        out.push_str(&format!("{f},{e:.16e}\n"));
    }
    out
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| CliError::io(path, e))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub seed: u64,
    pub camera: Vec<ComparisonRow>,
    /// Only configurations that reconstructed a body.
    pub object: Vec<ComparisonRow>,
}

/// Runs every configuration on one shared scene and tabulates their
/// errors against the first.
pub fn ablate(configs: &[ExperimentConfig], seed: u64, out: &Path, log: &Logger) -> Result<(PathBuf, Comparison)> {
    if configs.len() < 2 {
        return Err(CliError::Config(format!("config: ablation needs at least 2 configs, got {}", configs.len())));
    }
    let seeds: BTreeSet<u64> = configs.iter().filter_map(|c| c.seed).collect();
    if seeds.len() > 1 || seeds.iter().any(|s| *s != seed) {
        return Err(CliError::Config(format!(
            "seed: configs disagree on the scene seed ({:?}, --seed {seed})",
            seeds
        )));
    }
    if configs.iter().any(|c| c.scene != configs[0].scene) {
        return Err(CliError::Config("scene: ablation configs must describe the same scene".into()));
    }
    let names: BTreeSet<String> = configs.iter().map(ExperimentConfig::label).collect();
    if names.len() != configs.len() {
        return Err(CliError::Config("name: ablation configs need distinct names".into()));
    }
    let contexts = configs
        .iter()
        .map(|c| {
            let dir = out.join(c.label());
            Context::new(c.clone(), seed, Some(dir.clone()), Some(dir), log.clone())
        })
        .collect::<Result<Vec<_>>>()?;
    let scene = pipeline::simulate(&contexts[0].resolved.scene)?;
    json::write(&out.join(SCENE_FILE), json::SCENE, "scene", &scene)?;
    log.stage("simulate", None);
    let mut camera = Vec::new();
    let mut object = Vec::new();
    for ctx in &contexts {
        let (_, eval) = run_on_scene(ctx, &scene)?;
        camera.push((ctx.config.label(), eval.refined.camera.clone()));
        if let Some(b) = eval.refined.main_body() {
            object.push((ctx.config.label(), b.clone()));
        }
    }
    let object = if object.is_empty() { Vec::new() } else { compare_runs(&object)? };
    let table = Comparison {
        seed,
        camera: compare_runs(&camera)?,
        object,
    };
    json::write_text(
        &out.join(COMPARISON_CSV),
        &formats::comparison_csv(&[("camera", &table.camera), ("object", &table.object)]),
    )?;
    let path = out.join(COMPARISON_FILE);
    json::write(&path, COMPARISON, "comparison", &table)?;
    log.stage("ablate", None);
    Ok((path, table))
}
