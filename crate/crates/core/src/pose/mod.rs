//! Ego-motion from masked flow, and the training-style losses.

mod loss;
mod refine;

pub use loss::{aggregate_loss, flow_loss, motion_loss, seg_loss, LossWeights, MOTION_LOSS_EPS};

use nalgebra::{Matrix3, Vector2, Vector3};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::epipolar::{
    decompose_essential, eight_point, in_front_of_both, motion_from_point_transform,
    sampson_distance,
};
use crate::error::{Error, Result};
use crate::flow::FlowField;
use crate::geometry::{CameraIntrinsics, Motion};
use crate::par::{self, Execution};
use crate::segmentation::SegMask;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PoseConfig {
    pub ransac_iters: usize,
    /// Sampson inlier threshold in pixels of the flow grid.
    pub inlier_thresh_px: f64,
    pub min_support: usize,
    pub refine_iters: usize,
    pub seed: u64,
    /// Hypotheses are scored on an evenly strided subset of this many
    /// correspondences; the winner is then re-scored on all of them.
    pub score_sample: usize,
    /// Median inlier flow below this (pixels) means no usable parallax.
    pub min_median_flow_px: f64,
    pub execution: Execution,
}

impl Default for PoseConfig {
    fn default() -> Self {
        Self {
            ransac_iters: 500,
            inlier_thresh_px: 1.0,
            min_support: 50,
            refine_iters: 10,
            seed: 0,
            score_sample: 1000,
            min_median_flow_px: 0.05,
            execution: Execution::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MotionEstimate {
    /// Pose of camera `t+1` in camera `t`, unit translation.
    pub motion: Motion,
    pub inlier_count: usize,
    pub support_count: usize,
    /// Mean Sampson distance of the inliers, in grid pixels.
    pub mean_sampson_px: f64,
    /// Truncated score of the winning hypothesis over the scoring subset:
    /// mean of `min(d^2, thr^2)` with `d` the Sampson distance in pixels.
    pub ransac_cost_px2: f64,
    /// Grid indices (`y * width + x`) of the inlier pixels.
    #[serde(skip)]
    pub inliers: Vec<usize>,
}

/// Normalized correspondences `x <-> x + flow` on valid, unmasked pixels.
#[derive(Debug, Clone, Default)]
pub struct Correspondences {
    pub x1: Vec<Vector2<f64>>,
    pub x2: Vec<Vector2<f64>>,
    pub flow_px: Vec<f64>,
    pub pixel: Vec<usize>,
}

impl Correspondences {
    pub fn build(flow: &FlowField, mask: &SegMask, k: &CameraIntrinsics) -> Result<Self> {
        mask.grid().ensure_dims(flow.dims())?;
        let (w, h) = flow.dims();
        let mut c = Correspondences::default();
        for y in 0..h {
            for x in 0..w {
                if mask.get(x, y) {
                    continue;
                }
                let Some(f) = flow.get(x, y) else { continue };
                let p = Vector2::new(x as f64, y as f64);
                c.x1.push(k.normalize(&p));
                c.x2.push(k.normalize(&(p + f)));
                c.flow_px.push(f.norm());
                c.pixel.push(y * w + x);
            }
        }
        Ok(c)
    }

    pub fn len(&self) -> usize {
        self.x1.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x1.is_empty()
    }
}

/// Estimates the up-to-scale camera motion from flow with dynamic pixels masked.
///
/// Seeded RANSAC over eight-point hypotheses with truncated Sampson scoring,
/// cheirality vote over the four decompositions of the winner, then
/// Levenberg-Marquardt refinement of the inlier Sampson cost. Hypotheses
/// are drawn up front and scored independently, so the result does not
/// depend on the execution mode.
pub fn estimate_motion(
    masked_flow: &FlowField,
    mask: &SegMask,
    k: &CameraIntrinsics,
    config: &PoseConfig,
) -> Result<MotionEstimate> {
    if masked_flow.dims() != (k.width, k.height) {
        return Err(Error::DimensionMismatch {
            expected: (k.width, k.height),
            found: masked_flow.dims(),
        });
    }
    let corr = Correspondences::build(masked_flow, mask, k)?;
    let n = corr.len();
    if n < config.min_support.max(8) {
        return Err(Error::InsufficientStaticSupport {
            available: n,
            required: config.min_support.max(8),
        });
    }
    let thr = config.inlier_thresh_px / k.fx;
    let thr2 = thr * thr;

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let samples: Vec<Vec<usize>> = (0..config.ransac_iters.max(1))
        .map(|_| sample(&mut rng, n, 8).into_vec())
        .collect();
    let subset: Vec<usize> = if n > config.score_sample && config.score_sample > 0 {
        (0..config.score_sample)
            .map(|i| i * n / config.score_sample)
            .collect()
    } else {
        (0..n).collect()
    };

    let scored = par::map_range(config.execution, samples.len(), |i| {
        let idx = &samples[i];
        let a: Vec<_> = idx.iter().map(|&j| corr.x1[j]).collect();
        let b: Vec<_> = idx.iter().map(|&j| corr.x2[j]).collect();
        let e = eight_point(&a, &b)?;
        let score: f64 = subset
            .iter()
            .map(|&j| {
                let d = sampson_distance(&e, &corr.x1[j], &corr.x2[j]);
                (d * d).min(thr2)
            })
            .sum();
        Some((score, e))
    });
    // lowest score wins; ties go to the lowest hypothesis index
    let (best_score, best_e) = scored
        .into_iter()
        .flatten()
        .fold(None::<(f64, Matrix3<f64>)>, |acc, (s, e)| match acc {
            Some((bs, _)) if bs <= s => acc,
            _ => Some((s, e)),
        })
        .ok_or_else(|| Error::DegenerateMotion("no non-degenerate hypothesis".into()))?;

    let inliers = inlier_set(&best_e, &corr, thr);
    if inliers.len() < 8 {
        return Err(Error::DegenerateMotion(format!(
            "best hypothesis has only {} inliers",
            inliers.len()
        )));
    }
    let mut mags: Vec<f64> = inliers.iter().map(|&i| corr.flow_px[i]).collect();
    let mid = mags.len() / 2;
    let median = *mags.select_nth_unstable_by(mid, |a, b| a.total_cmp(b)).1;
    if median < config.min_median_flow_px {
        return Err(Error::DegenerateMotion(format!(
            "median inlier flow {median:.3e} px carries no parallax"
        )));
    }

    let (r, t) = select_by_cheirality(&best_e, &corr, &inliers)
        .ok_or_else(|| Error::DegenerateMotion("essential matrix decomposition failed".into()))?;
    let (r, t) = refine::refine(&r, &t, &corr, &inliers, config.refine_iters);

    let e = crate::epipolar::essential_from_point_transform(&r, &t);
    let final_inliers = inlier_set(&e, &corr, thr);
    let mean_sampson_px = if final_inliers.is_empty() {
        f64::INFINITY
    } else {
        final_inliers
            .iter()
            .map(|&i| sampson_distance(&e, &corr.x1[i], &corr.x2[i]))
            .sum::<f64>()
            / final_inliers.len() as f64
            * k.fx
    };
    Ok(MotionEstimate {
        motion: motion_from_point_transform(&r, &t),
        inlier_count: final_inliers.len(),
        support_count: n,
        mean_sampson_px,
        ransac_cost_px2: best_score / subset.len() as f64 * k.fx * k.fx,
        inliers: final_inliers.iter().map(|&i| corr.pixel[i]).collect(),
    })
}

fn inlier_set(e: &Matrix3<f64>, corr: &Correspondences, thr: f64) -> Vec<usize> {
    (0..corr.len())
        .filter(|&i| sampson_distance(e, &corr.x1[i], &corr.x2[i]) < thr)
        .collect()
}

const CHEIRALITY_SAMPLE: usize = 1000;

fn select_by_cheirality(
    e: &Matrix3<f64>,
    corr: &Correspondences,
    inliers: &[usize],
) -> Option<(Matrix3<f64>, Vector3<f64>)> {
    let cands = decompose_essential(e)?;
    let m = inliers.len().min(CHEIRALITY_SAMPLE);
    let probe: Vec<usize> = (0..m).map(|i| inliers[i * inliers.len() / m]).collect();
    let mut best = None;
    let mut best_votes = 0usize;
    for (r, t) in cands {
        let votes = probe
            .iter()
            .filter(|&&i| in_front_of_both(&r, &t, &corr.x1[i], &corr.x2[i]))
            .count();
        if best.is_none() || votes > best_votes {
            best = Some((r, t));
            best_votes = votes;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{geodesic_angle, direction_angle, Rotation};
    use crate::grid::Grid;

    /// Analytic flow of a slanted plane under a known camera motion.
    fn plane_flow(cam: &Motion, k: &CameraIntrinsics) -> FlowField {
        let point = cam.inverse();
        FlowField::from_fn(k.width, k.height, |x, y| {
            let c = Vector2::new(x as f64, y as f64);
            let z = 6.0 + 0.04 * x as f64 - 0.03 * y as f64 + 2.0 * ((x / 20 + y / 15) % 2) as f64;
            let p = point.transform_point(&k.unproject(&c, z));
            let f = k.project(&p).unwrap() - c;
            [f.x, f.y]
        })
    }

    fn camera() -> CameraIntrinsics {
        CameraIntrinsics::new(80.0, 80.0, 79.5, 59.5, 160, 120).unwrap()
    }

    #[test]
    fn recovers_known_motion_from_exact_flow() {
        let k = camera();
        let cam = Motion::new(
            Rotation::from_axis_angle(&Vector3::new(0.01, -0.03, 0.005)),
            Vector3::new(0.15, -0.05, 0.3),
        );
        let flow = plane_flow(&cam, &k);
        let est = estimate_motion(&flow, &SegMask::empty(160, 120), &k, &PoseConfig::default()).unwrap();
        assert!(est.motion.up_to_scale);
        assert!(geodesic_angle(&est.motion.rotation, &cam.rotation).to_degrees() < 1e-6);
        assert!(direction_angle(&est.motion.translation, &cam.translation).to_degrees() < 1e-5);
        assert_eq!(est.inlier_count, est.support_count);
        assert!(est.inlier_count <= est.support_count);
    }

    #[test]
    fn zero_flow_is_degenerate() {
        let k = camera();
        let flow = FlowField::from_fn(160, 120, |_, _| [0.0, 0.0]);
        let err = estimate_motion(&flow, &SegMask::empty(160, 120), &k, &PoseConfig::default()).unwrap_err();
        assert!(matches!(err, Error::DegenerateMotion(_)), "{err}");
    }

    #[test]
    fn insufficient_support() {
        let k = camera();
        let flow = FlowField::from_fn(160, 120, |_, _| [1.0, 0.0]);
        let mask = SegMask::from_grid(Grid::from_fn(160, 120, |x, y| x > 6 || y > 6));
        let err = estimate_motion(&flow, &mask, &k, &PoseConfig::default()).unwrap_err();
        assert!(matches!(
            err,
            Error::InsufficientStaticSupport { available: 49, required: 50 }
        ));
    }

    #[test]
    fn deterministic_and_execution_independent() {
        let k = camera();
        let cam = Motion::new(
            Rotation::from_axis_angle(&Vector3::new(0.0, 0.02, 0.0)),
            Vector3::new(0.3, 0.0, 0.1),
        );
        let flow = plane_flow(&cam, &k);
        let mask = crate::segmentation::cow_mask(9, 120, 160, 0.5, (2.0, 8.0));
        let masked = crate::flow::mask_flow(&flow, &mask).unwrap();
        let seq = PoseConfig {
            execution: Execution::Sequential,
            seed: 4,
            ..Default::default()
        };
        let par = PoseConfig {
            execution: Execution::Parallel,
            ..seq
        };
        let a = estimate_motion(&masked, &mask, &k, &seq).unwrap();
        let b = estimate_motion(&masked, &mask, &k, &par).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.inliers, b.inliers);
    }
}
