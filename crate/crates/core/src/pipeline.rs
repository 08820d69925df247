//! The iterative refinement loop: estimate pose under a random mask, then
//! alternate segmentation and pose until successive motions agree.

use serde::{Deserialize, Serialize};

use crate::depth::DepthMap;
use crate::error::{Error, Result};
use crate::evaluation::Trajectory;
use crate::flow::{downsample_flow, mask_flow, FlowField};
use crate::geometry::{compose, direction_angle, geodesic_angle, CameraIntrinsics, Motion};
use crate::par::{self, Execution};
use crate::pose::{estimate_motion, MotionEstimate, PoseConfig};
use crate::segmentation::{
    binarize, cow_mask, segment_residual_with, threshold_for_iteration, ProbabilityMap, SegMask,
    ThresholdSchedule,
};
use crate::simulator::{add_flow_noise, render_pair_with, Scene};

/// A binarized mask covering more than this fraction of valid pixels is
/// treated as a collapse of the static background.
pub const ALL_DYNAMIC_FRACTION: f64 = 0.99;

/// Flow for one frame pair, plus optional depth of the first frame on the
/// same grid for segmenters that can use it.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowInput {
    pub flow: FlowField,
    pub depth: Option<DepthMap>,
}

pub trait FlowProvider: Sync {
    fn flow(&self, pair: usize) -> Result<FlowInput>;
}

pub trait Segmenter: Sync {
    fn segment(
        &self,
        flow: &FlowField,
        motion: &Motion,
        k: &CameraIntrinsics,
        depth: Option<&DepthMap>,
    ) -> Result<ProbabilityMap>;
}

pub trait PoseEstimator: Sync {
    fn estimate(&self, masked_flow: &FlowField, mask: &SegMask, k: &CameraIntrinsics) -> Result<MotionEstimate>;
}

#[derive(Clone, Copy)]
pub struct BackendSet<'a> {
    pub flow: &'a dyn FlowProvider,
    pub segmenter: &'a dyn Segmenter,
    pub pose: &'a dyn PoseEstimator,
}

/// Oracle flow rendered from a synthetic scene and block-averaged onto the
/// working grid.
#[derive(Debug, Clone)]
pub struct SimulatedFlow {
    pub scene: Scene,
    pub factor: usize,
    /// Standard deviation of added flow noise at render resolution, pixels.
    pub noise_sigma: f64,
    pub noise_seed: u64,
    pub execution: Execution,
}

impl SimulatedFlow {
    pub fn new(scene: Scene, factor: usize) -> Result<Self> {
        let (w, h) = (scene.k.width, scene.k.height);
        if factor == 0 || w % factor != 0 || h % factor != 0 {
            return Err(Error::NotDivisible {
                width: w,
                height: h,
                factor,
            });
        }
        Ok(Self {
            scene,
            factor,
            noise_sigma: 0.0,
            noise_seed: 0,
            execution: Execution::default(),
        })
    }

    /// Intrinsics of the working grid.
    pub fn intrinsics(&self) -> CameraIntrinsics {
        let k = &self.scene.k;
        k.for_grid(k.width / self.factor, k.height / self.factor)
    }

    pub fn pairs(&self) -> usize {
        self.scene.frames() - 1
    }
}

impl FlowProvider for SimulatedFlow {
    fn flow(&self, pair: usize) -> Result<FlowInput> {
        let truth = render_pair_with(&self.scene, pair, self.execution)?;
        let flow = add_flow_noise(&truth.flow, self.noise_sigma, self.noise_seed ^ pair as u64)?;
        Ok(FlowInput {
            flow: downsample_flow(&flow, self.factor)?,
            depth: Some(truth.depth_t.downsample(self.factor)?),
        })
    }
}

/// Precomputed inputs, so repeated runs skip flow computation entirely.
#[derive(Debug, Clone, Default)]
pub struct CachedFlow {
    pub inputs: Vec<FlowInput>,
}

impl CachedFlow {
    pub fn from_provider(provider: &dyn FlowProvider, pairs: usize) -> Result<Self> {
        let inputs = (0..pairs).map(|i| provider.flow(i)).collect::<Result<_>>()?;
        Ok(Self { inputs })
    }
}

impl FlowProvider for CachedFlow {
    fn flow(&self, pair: usize) -> Result<FlowInput> {
        self.inputs.get(pair).cloned().ok_or(Error::FrameOutOfRange {
            index: pair,
            len: self.inputs.len(),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ResidualSegmenter {
    pub sigma_r: f64,
    pub execution: Execution,
}

impl Segmenter for ResidualSegmenter {
    fn segment(
        &self,
        flow: &FlowField,
        motion: &Motion,
        k: &CameraIntrinsics,
        depth: Option<&DepthMap>,
    ) -> Result<ProbabilityMap> {
        segment_residual_with(flow, motion, k, depth, self.sigma_r, self.execution)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct RansacPose {
    pub config: PoseConfig,
}

impl PoseEstimator for RansacPose {
    fn estimate(&self, masked_flow: &FlowField, mask: &SegMask, k: &CameraIntrinsics) -> Result<MotionEstimate> {
        estimate_motion(masked_flow, mask, k, &self.config)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub max_iters: usize,
    /// Stop when successive rotations differ by less than this, radians.
    pub eps_r: f64,
    /// Stop when successive translation directions differ by less than this, radians.
    pub eps_t: f64,
    pub schedule: ThresholdSchedule,
    pub cow_fraction: f64,
    /// Blur sigma range of the initial cow-mask, in grid pixels.
    pub cow_sigma_range: (f64, f64),
    pub min_support: usize,
    pub sigma_r: f64,
    pub seed: u64,
    pub execution: Execution,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            max_iters: 4,
            eps_r: 0.004363,
            eps_t: 0.01745,
            schedule: ThresholdSchedule::default(),
            cow_fraction: 0.25,
            cow_sigma_range: (2.0, 8.0),
            min_support: 50,
            sigma_r: 1.5,
            seed: 0,
            execution: Execution::default(),
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.max_iters < 1 {
            return bad("max_iters must be at least 1".into());
        }
        if !(self.eps_r > 0.0 && self.eps_t > 0.0) {
            return bad(format!("stop thresholds must be positive, got ({}, {})", self.eps_r, self.eps_t));
        }
        if !(0.0..=1.0).contains(&self.cow_fraction) {
            return bad(format!("cow_fraction must lie in [0, 1], got {}", self.cow_fraction));
        }
        let (lo, hi) = self.cow_sigma_range;
        if !(lo > 0.0 && hi >= lo && hi.is_finite()) {
            return bad(format!("cow_sigma_range must be positive and ordered, got ({lo}, {hi})"));
        }
        if !(self.sigma_r > 0.0 && self.sigma_r.is_finite()) {
            return bad(format!("sigma_r must be positive, got {}", self.sigma_r));
        }
        self.schedule.validate()
    }

    /// Default backends configured from this pipeline config.
    pub fn segmenter(&self) -> ResidualSegmenter {
        ResidualSegmenter {
            sigma_r: self.sigma_r,
            execution: self.execution,
        }
    }

    pub fn pose(&self) -> RansacPose {
        RansacPose {
            config: PoseConfig {
                min_support: self.min_support,
                seed: self.seed,
                execution: self.execution,
                ..PoseConfig::default()
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub motion: Motion,
    /// Binarization threshold; absent for the random-mask first iteration.
    pub z_threshold: Option<f64>,
    /// Masked fraction of valid flow pixels.
    pub mask_fraction: f64,
    pub delta_r: Option<f64>,
    pub delta_t: Option<f64>,
    pub inlier_count: usize,
    pub support_count: usize,
    pub mean_sampson_px: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FrameResult {
    pub pair: usize,
    /// Unit-translation motion of the last iteration.
    pub motion: Motion,
    pub converged: bool,
    pub trace: Vec<IterationRecord>,
    /// Mask used by the last iteration.
    #[serde(skip)]
    pub mask: SegMask,
}

impl FrameResult {
    pub fn iterations(&self) -> usize {
        self.trace.len()
    }
}

/// One JSON object per line.
pub fn trace_to_jsonl(trace: &[IterationRecord]) -> String {
    trace
        .iter()
        .map(|r| serde_json::to_string(r).expect("records serialize") + "\n")
        .collect()
}

fn at(iteration: usize) -> impl Fn(Error) -> Error {
    move |e| Error::AtIteration {
        iteration,
        source: Box::new(e),
    }
}

fn static_support(flow: &FlowField, mask: &SegMask) -> usize {
    flow.validity()
        .as_slice()
        .iter()
        .zip(mask.grid().as_slice())
        .filter(|(v, m)| **v && !**m)
        .count()
}

/// Runs the refinement loop on one frame pair.
///
/// The flow provider is called once. Iteration 1 masks a seeded cow-mask;
/// every later iteration segments against the previous motion and
/// binarizes at the scheduled threshold. Errors raised inside the loop are
/// wrapped with their iteration number.
pub fn run_pair(pair: usize, k: &CameraIntrinsics, backends: &BackendSet, config: &PipelineConfig) -> Result<FrameResult> {
    config.validate()?;
    let FlowInput { flow, depth } = backends.flow.flow(pair)?;
    if flow.dims() != (k.width, k.height) {
        return Err(Error::DimensionMismatch {
            expected: (k.width, k.height),
            found: flow.dims(),
        });
    }
    let valid = flow.validity().clone();
    let (w, h) = flow.dims();

    let mut mask = cow_mask(config.seed ^ pair as u64, h, w, config.cow_fraction, config.cow_sigma_range);
    let mut trace: Vec<IterationRecord> = Vec::with_capacity(config.max_iters);
    let mut converged = false;
    for i in 1..=config.max_iters {
        let z_threshold = if i == 1 {
            None
        } else {
            let prev = &trace[trace.len() - 1].motion;
            let z = backends
                .segmenter
                .segment(&flow, prev, k, depth.as_ref())
                .map_err(at(i))?;
            let thr = threshold_for_iteration(&config.schedule, i - 1);
            mask = binarize(&z, thr);
            let fraction = mask.fraction_within(&valid);
            if fraction > ALL_DYNAMIC_FRACTION {
                return Err(at(i)(Error::AllDynamic { fraction }));
            }
            Some(thr)
        };
        let support = static_support(&flow, &mask);
        if support < config.min_support {
            return Err(at(i)(Error::InsufficientStaticSupport {
                available: support,
                required: config.min_support,
            }));
        }
        let masked = mask_flow(&flow, &mask)?;
        let est = backends.pose.estimate(&masked, &mask, k).map_err(at(i))?;
        let (delta_r, delta_t) = match trace.last() {
            Some(prev) => (
                Some(geodesic_angle(&prev.motion.rotation, &est.motion.rotation)),
                Some(direction_angle(&prev.motion.translation, &est.motion.translation)),
            ),
            None => (None, None),
        };
        trace.push(IterationRecord {
            iteration: i,
            motion: est.motion,
            z_threshold,
            mask_fraction: mask.fraction_within(&valid),
            delta_r,
            delta_t,
            inlier_count: est.inlier_count,
            support_count: est.support_count,
            mean_sampson_px: est.mean_sampson_px,
        });
        if let (Some(dr), Some(dt)) = (delta_r, delta_t) {
            if dr < config.eps_r && dt < config.eps_t {
                converged = true;
                break;
            }
        }
    }
    let motion = trace.last().expect("at least one iteration").motion;
    Ok(FrameResult {
        pair,
        motion,
        converged,
        trace,
        mask,
    })
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScaleMode {
    /// Each unit translation is stretched to the ground-truth step length.
    #[default]
    GtScale,
    /// Unit-length steps.
    Unit,
}

impl std::str::FromStr for ScaleMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gt_scale" => Ok(Self::GtScale),
            "unit" => Ok(Self::Unit),
            _ => Err(Error::InvalidConfig(format!("unknown scale mode {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PairOutcome {
    pub pair: usize,
    pub result: Option<FrameResult>,
    /// Set when the pair failed and identity motion was substituted.
    pub error: Option<String>,
    pub error_iteration: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SequenceResult {
    pub trajectory: Trajectory,
    pub pairs: Vec<PairOutcome>,
}

/// Runs every pair and chains the motions into a world-from-camera
/// trajectory starting at the origin. A failed pair contributes identity
/// motion and flags the pose it leads to.
pub fn run_sequence(
    pairs: usize,
    k: &CameraIntrinsics,
    backends: &BackendSet,
    config: &PipelineConfig,
    scale: ScaleMode,
    gt_step_lengths: Option<&[f64]>,
) -> Result<SequenceResult> {
    config.validate()?;
    if pairs == 0 {
        return Err(Error::InvalidConfig("a sequence needs at least 2 frames".into()));
    }
    let lengths = match scale {
        ScaleMode::Unit => None,
        ScaleMode::GtScale => match gt_step_lengths {
            Some(l) if l.len() == pairs => Some(l),
            Some(l) => {
                return Err(Error::LengthMismatch {
                    est: pairs,
                    gt: l.len(),
                })
            }
            None => return Err(Error::InvalidConfig("gt_scale needs ground-truth step lengths".into())),
        },
    };
    let results = par::map_range(config.execution, pairs, |i| run_pair(i, k, backends, config));

    let mut poses = vec![Motion::identity()];
    let mut flags = vec![false];
    let mut outcomes = Vec::with_capacity(pairs);
    for (i, r) in results.into_iter().enumerate() {
        let prev = *poses.last().expect("non-empty");
        match r {
            Ok(res) => {
                let len = lengths.map_or(1.0, |l| l[i]);
                let step = res.motion.with_scale(len);
                poses.push(compose(&prev, &step)?);
                flags.push(false);
                outcomes.push(PairOutcome {
                    pair: i,
                    result: Some(res),
                    error: None,
                    error_iteration: None,
                });
            }
            Err(e) => {
                poses.push(prev);
                flags.push(true);
                outcomes.push(PairOutcome {
                    pair: i,
                    result: None,
                    error_iteration: e.iteration(),
                    error: Some(e.to_string()),
                });
            }
        }
    }
    let stamps = (0..poses.len()).map(|i| i as f64).collect();
    Ok(SequenceResult {
        trajectory: Trajectory::with_flags(stamps, poses, flags)?,
        pairs: outcomes,
    })
}

/// Ground-truth camera trajectory of a scene, stamped by frame index.
pub fn gt_trajectory(scene: &Scene) -> Result<Trajectory> {
    Trajectory::from_poses(scene.trajectory.clone())
}

/// Ground-truth translation length of every frame pair.
pub fn gt_step_lengths(scene: &Scene) -> Vec<f64> {
    scene
        .trajectory
        .windows(2)
        .map(|w| (w[1].translation - w[0].translation).norm())
        .collect()
}

/// Rotation and translation-direction errors of an estimate, radians.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MotionError {
    pub rotation: f64,
    pub translation_direction: f64,
}

impl MotionError {
    pub fn between(est: &Motion, gt: &Motion) -> Self {
        Self {
            rotation: geodesic_angle(&est.rotation, &gt.rotation),
            translation_direction: direction_angle(&est.translation, &gt.translation),
        }
    }

    pub fn total(&self) -> f64 {
        self.rotation + self.translation_direction
    }
}
