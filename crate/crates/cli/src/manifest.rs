use std::path::PathBuf;

use dynvo::geometry::Motion;
use dynvo::pipeline::{IterationRecord, PairOutcome};
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Seeds {
    pub scene: u64,
    pub pipeline: u64,
    /// Per-pair noise uses `noise ^ pair`.
    pub noise: u64,
}

/// Output file names, relative to the manifest's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Outputs {
    pub trajectory: String,
    pub ground_truth: String,
    pub traces: String,
    pub masks: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameSummary {
    pub pair: usize,
    /// Unit-translation estimate; identity for failed pairs.
    pub motion: Motion,
    pub converged: bool,
    pub iterations: usize,
    pub inlier_count: usize,
    pub mask_fraction: f64,
    pub error: Option<String>,
    pub error_iteration: Option<usize>,
}

impl FrameSummary {
    pub fn from_outcome(o: &PairOutcome) -> Self {
        match &o.result {
            Some(r) => {
                let last = r.trace.last().expect("non-empty trace");
                Self {
                    pair: o.pair,
                    motion: r.motion,
                    converged: r.converged,
                    iterations: r.iterations(),
                    inlier_count: last.inlier_count,
                    mask_fraction: last.mask_fraction,
                    error: None,
                    error_iteration: None,
                }
            }
            None => Self {
                pair: o.pair,
                motion: Motion::identity(),
                converged: false,
                iterations: 0,
                inlier_count: 0,
                mask_fraction: 0.0,
                error: o.error.clone(),
                error_iteration: o.error_iteration,
            },
        }
    }
}

/// Written by `run`. Passing it back through `--config` reproduces the run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub version: String,
    pub config: ExperimentConfig,
    pub seeds: Seeds,
    /// Ground-truth bundle the flow came from; `None` when rendered in-process.
    pub bundle: Option<PathBuf>,
    pub frames: Vec<FrameSummary>,
    pub outputs: Outputs,
}

/// One line of the traces file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceLine {
    pub pair: usize,
    #[serde(flatten)]
    pub record: IterationRecord,
}
