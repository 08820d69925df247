//! Experiment configuration: a TOML file, overridden by command-line flags.

use std::path::Path;

use anyhow::Context;
use dynvo::evaluation::TrajectoryFormat;
use dynvo::par::Execution;
use dynvo::pipeline::{PipelineConfig, ScaleMode};
use dynvo::simulator::SceneConfig;
use serde::{Deserialize, Serialize};

use crate::manifest::RunManifest;

/// Everything a run depends on. The single `seed` drives scene generation,
/// the pipeline and flow noise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    /// Downsampling factor from render resolution to the working grid.
    pub grid_factor: usize,
    /// Flow noise at render resolution, pixels.
    pub noise_sigma: f64,
    pub scale: ScaleMode,
    pub format: TrajectoryFormat,
    pub scene: SceneConfig,
    pub pipeline: PipelineConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            grid_factor: 4,
            noise_sigma: 0.0,
            scale: ScaleMode::GtScale,
            format: TrajectoryFormat::Tum,
            scene: SceneConfig::default(),
            pipeline: PipelineConfig::default(),
        }
    }
}

/// Flags shared by `simulate` and `run`; each overrides the file value.
#[derive(Debug, Clone, Default, clap::Args)]
pub struct Overrides {
    /// TOML config, or the manifest of an earlier run
    #[arg(long)]
    pub config: Option<std::path::PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Number of frames in the sequence
    #[arg(long)]
    pub frames: Option<usize>,
    /// Number of independently moving bodies
    #[arg(long)]
    pub bodies: Option<usize>,
    /// Target fraction of dynamic pixels in the first frame
    #[arg(long)]
    pub dynamic_fraction: Option<f64>,
    #[arg(long)]
    pub grid_factor: Option<usize>,
    #[arg(long)]
    pub noise_sigma: Option<f64>,
    #[arg(long)]
    pub max_iters: Option<usize>,
    /// gt_scale or unit
    #[arg(long)]
    pub scale: Option<ScaleMode>,
    /// tum or kitti
    #[arg(long)]
    pub format: Option<TrajectoryFormat>,
    /// sequential or parallel
    #[arg(long)]
    pub execution: Option<Execution>,
}

impl Overrides {
    /// Loads the base config (if any) and applies the flags.
    pub fn resolve(&self) -> anyhow::Result<(ExperimentConfig, Option<RunManifest>)> {
        let (mut cfg, manifest) = match &self.config {
            Some(path) => load(path)?,
            None => (ExperimentConfig::default(), None),
        };
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = self.frames {
            cfg.scene.frames = v;
        }
        if let Some(v) = self.bodies {
            cfg.scene.n_bodies = v;
        }
        if let Some(v) = self.dynamic_fraction {
            cfg.scene.dynamic_fraction_target = v;
        }
        if let Some(v) = self.grid_factor {
            cfg.grid_factor = v;
        }
        if let Some(v) = self.noise_sigma {
            cfg.noise_sigma = v;
        }
        if let Some(v) = self.max_iters {
            cfg.pipeline.max_iters = v;
        }
        if let Some(v) = self.scale {
            cfg.scale = v;
        }
        if let Some(v) = self.format {
            cfg.format = v;
        }
        if let Some(v) = self.execution {
            cfg.pipeline.execution = v;
        }
        cfg.pipeline.seed = cfg.seed;
        cfg.scene.validate()?;
        cfg.pipeline.validate()?;
        anyhow::ensure!(
            cfg.noise_sigma >= 0.0 && cfg.noise_sigma.is_finite(),
            "noise_sigma must be non-negative, got {}",
            cfg.noise_sigma
        );
        Ok((cfg, manifest))
    }
}

fn load(path: &Path) -> anyhow::Result<(ExperimentConfig, Option<RunManifest>)> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    if path.extension().is_some_and(|e| e == "json") {
        let m: RunManifest =
            serde_json::from_str(&text).with_context(|| format!("parsing manifest {}", path.display()))?;
        return Ok((m.config.clone(), Some(m)));
    }
    let cfg = toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
    Ok((cfg, None))
}
