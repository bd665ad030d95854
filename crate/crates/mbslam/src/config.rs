//! Experiment configuration files.

use std::path::{Path, PathBuf};

use mbslam_core::ba::{BoxVariant, ConstraintSet, NormalVariant, SolverConfig, TrajectoryVariant};
use mbslam_core::ba::normal::NormalMethod;
use mbslam_core::pipeline::{PipelineConfig, SamplingConfig, SegmentationConfig};
use mbslam_core::sim::{SceneConfig, ScenePreset};
use mbslam_core::trajectory::InitParams;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

/// One switch per constraint variant; at most one per family may be on.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConstraintFlags {
    pub nc1: bool,
    pub nc2: bool,
    pub tc1: bool,
    pub tc2: bool,
    pub bc1: bool,
    pub bc2: bool,
    pub bc3: bool,
    pub bc4: bool,
}

fn pick<T: Copy>(family: &str, options: &[(bool, &str, T)]) -> Result<Option<T>> {
    let on: Vec<_> = options.iter().filter(|o| o.0).collect();
    match on.as_slice() {
        [] => Ok(None),
        [one] => Ok(Some(one.2)),
        _ => Err(CliError::Config(format!(
            "constraints.{family}: {} are all enabled, select one",
            on.iter().map(|o| o.1).collect::<Vec<_>>().join(" and ")
        ))),
    }
}

impl ConstraintFlags {
    pub fn to_set(&self) -> Result<ConstraintSet> {
        Ok(ConstraintSet {
            normal: pick("nc", &[(self.nc1, "nc1", NormalVariant::Nc1), (self.nc2, "nc2", NormalVariant::Nc2)])?,
            trajectory: pick(
                "tc",
                &[(self.tc1, "tc1", TrajectoryVariant::Tc1), (self.tc2, "tc2", TrajectoryVariant::Tc2)],
            )?,
            boxes: pick(
                "bc",
                &[
                    (self.bc1, "bc1", BoxVariant::Bc1),
                    (self.bc2, "bc2", BoxVariant::Bc2),
                    (self.bc3, "bc3", BoxVariant::Bc3),
                    (self.bc4, "bc4", BoxVariant::Bc4),
                ],
            )?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Row label in ablation tables; defaults to the file stem.
    pub name: Option<String>,
    /// Scene and pipeline seed; must match `--seed` when given.
    pub seed: Option<u64>,
    /// Output directory when `--out` is not given.
    pub output: Option<PathBuf>,
    pub scene: ScenePreset,
    /// When false every feature is treated as static.
    pub motion_segmentation: bool,
    pub segmentation: SegmentationConfig,
    pub init: InitParams,
    pub normal: NormalMethod,
    pub constraints: ConstraintFlags,
    pub sampling: SamplingConfig,
    pub solver: SolverConfig,
    pub min_track_frames: usize,
    pub histogram_bin_width: f64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let p = PipelineConfig::default();
        Self {
            name: None,
            seed: None,
            output: None,
            scene: ScenePreset::default(),
            motion_segmentation: p.motion_segmentation,
            segmentation: p.segmentation,
            init: p.init,
            normal: p.normal,
            constraints: ConstraintFlags::default(),
            sampling: p.sampling,
            solver: p.solver,
            min_track_frames: p.min_track_frames,
            histogram_bin_width: p.histogram_bin_width,
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let mut cfg: Self =
            serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        if cfg.name.is_none() {
            cfg.name = path.file_stem().map(|s| s.to_string_lossy().into_owned());
        }
        Ok(cfg)
    }

    /// Loads `path`, or the defaults when absent.
    pub fn load_or_default(path: Option<&Path>) -> Result<Self> {
        path.map_or_else(|| Ok(Self::default()), Self::load)
    }

    /// Checks the seed against the command line and every section's
    /// parameters.
    pub fn resolve(&self, seed: u64) -> Result<Resolved> {
        if let Some(s) = self.seed {
            if s != seed {
                return Err(CliError::Config(format!("seed: config has {s} but --seed is {seed}")));
            }
        }
        let pipeline = PipelineConfig {
            motion_segmentation: self.motion_segmentation,
            segmentation: self.segmentation.clone(),
            init: self.init,
            normal: self.normal,
            constraints: self.constraints.to_set()?,
            sampling: self.sampling,
            solver: self.solver,
            min_track_frames: self.min_track_frames,
            histogram_bin_width: self.histogram_bin_width,
        };
        pipeline.validate()?;
        let scene = self.scene.build(seed)?;
        Ok(Resolved { seed, scene, pipeline })
    }

    pub fn label(&self) -> String {
        self.name.clone().unwrap_or_else(|| "run".into())
    }
}

/// A validated configuration ready to run.
#[derive(Debug, Clone, PartialEq)]
pub struct Resolved {
    pub seed: u64,
    pub scene: SceneConfig,
    pub pipeline: PipelineConfig,
}
