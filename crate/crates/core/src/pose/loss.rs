use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::FlowField;
use crate::geometry::Motion;
use crate::segmentation::{ProbabilityMap, SegMask};

/// Floor on translation norms in the motion loss.
pub const MOTION_LOSS_EPS: f64 = 1e-6;

const BCE_CLAMP: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda1: 1.0,
            lambda2: 1.0,
        }
    }
}

impl LossWeights {
    pub fn new(lambda1: f64, lambda2: f64) -> Result<Self> {
        if !(lambda1 >= 0.0 && lambda2 >= 0.0 && lambda1.is_finite() && lambda2.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "loss weights must be finite and non-negative, got ({lambda1}, {lambda2})"
            )));
        }
        Ok(Self { lambda1, lambda2 })
    }
}

/// Scale-free translation direction error plus axis-angle rotation error.
pub fn motion_loss(est: &Motion, gt: &Motion) -> f64 {
    let a = est.translation / est.translation.norm().max(MOTION_LOSS_EPS);
    let b = gt.translation / gt.translation.norm().max(MOTION_LOSS_EPS);
    (a - b).norm() + (est.rotation.to_axis_angle() - gt.rotation.to_axis_angle()).norm()
}

/// Mean over jointly valid pixels of `|du| + |dv|`.
pub fn flow_loss(est: &FlowField, gt: &FlowField) -> Result<f64> {
    gt.validity().ensure_dims(est.dims())?;
    let (w, h) = est.dims();
    let mut sum = 0.0;
    let mut n = 0usize;
    for y in 0..h {
        for x in 0..w {
            if let (Some(a), Some(b)) = (est.get(x, y), gt.get(x, y)) {
                sum += (a.x - b.x).abs() + (a.y - b.y).abs();
                n += 1;
            }
        }
    }
    if n == 0 {
        return Err(Error::NoOverlap);
    }
    Ok(sum / n as f64)
}

/// Mean binary cross entropy over the valid pixels of `z`.
pub fn seg_loss(z: &ProbabilityMap, gt: &SegMask) -> Result<f64> {
    gt.grid().ensure_dims(z.dims())?;
    let (w, h) = z.dims();
    let mut sum = 0.0;
    let mut n = 0usize;
    for y in 0..h {
        for x in 0..w {
            if !z.is_valid(x, y) {
                continue;
            }
            let p = z.get(x, y).clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
            sum -= if gt.get(x, y) { p.ln() } else { (1.0 - p).ln() };
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::NoOverlap);
    }
    Ok(sum / n as f64)
}

pub fn aggregate_loss(l_m: f64, l_u: f64, l_p: f64, w: &LossWeights) -> f64 {
    w.lambda1 * l_m + w.lambda2 * l_u + l_p
}
