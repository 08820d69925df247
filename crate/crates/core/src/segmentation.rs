//! Dynamicness probabilities, binary motion masks, and the geometric
//! residual segmenter.

use nalgebra::{Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::depth::DepthMap;
use crate::epipolar::{essential_from_point_transform, sampson_distance};
use crate::error::{Error, Result};
use crate::flow::FlowField;
use crate::geometry::{CameraIntrinsics, Motion};
use crate::grid::Grid;
use crate::par::{self, Execution};

/// Binary motion mask; `true` marks a dynamic pixel.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct SegMask(Grid<bool>);

impl SegMask {
    pub fn empty(width: usize, height: usize) -> Self {
        Self(Grid::filled(width, height, false))
    }

    pub fn full(width: usize, height: usize) -> Self {
        Self(Grid::filled(width, height, true))
    }

    pub fn from_grid(grid: Grid<bool>) -> Self {
        Self(grid)
    }

    pub fn grid(&self) -> &Grid<bool> {
        &self.0
    }

    pub fn dims(&self) -> (usize, usize) {
        self.0.dims()
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> bool {
        *self.0.get(x, y)
    }

    pub fn set(&mut self, x: usize, y: usize, v: bool) {
        *self.0.get_mut(x, y) = v;
    }

    pub fn count(&self) -> usize {
        self.0.as_slice().iter().filter(|v| **v).count()
    }

    pub fn fraction(&self) -> f64 {
        self.count() as f64 / self.0.len().max(1) as f64
    }

    /// Fraction of `valid` pixels that are set; `0` when nothing is valid.
    pub fn fraction_within(&self, valid: &Grid<bool>) -> f64 {
        let mut n = 0usize;
        let mut set = 0usize;
        for (&m, &v) in self.0.as_slice().iter().zip(valid.as_slice()) {
            if v {
                n += 1;
                set += m as usize;
            }
        }
        if n == 0 {
            0.0
        } else {
            set as f64 / n as f64
        }
    }

    /// Intersection over union of the set pixels, restricted to `valid`.
    pub fn iou(&self, other: &SegMask, valid: Option<&Grid<bool>>) -> f64 {
        let mut inter = 0usize;
        let mut union = 0usize;
        for i in 0..self.0.len() {
            if valid.is_some_and(|v| !v.as_slice()[i]) {
                continue;
            }
            let a = self.0.as_slice()[i];
            let b = other.0.as_slice()[i];
            inter += (a && b) as usize;
            union += (a || b) as usize;
        }
        if union == 0 {
            1.0
        } else {
            inter as f64 / union as f64
        }
    }

    /// 8-bit grayscale samples, 255 for dynamic.
    pub fn to_u8(&self) -> Vec<u8> {
        self.0.as_slice().iter().map(|&m| if m { 255 } else { 0 }).collect()
    }
}

/// Majority-vote downsampling. With `valid`, only valid members vote and a
/// block without valid members is static.
pub fn downsample_mask(mask: &SegMask, valid: Option<&Grid<bool>>, factor: usize) -> Result<SegMask> {
    let (w, h) = mask.dims();
    if factor == 0 || w % factor != 0 || h % factor != 0 {
        return Err(Error::NotDivisible {
            width: w,
            height: h,
            factor,
        });
    }
    if let Some(v) = valid {
        v.ensure_dims(mask.dims())?;
    }
    Ok(SegMask(Grid::from_fn(w / factor, h / factor, |ox, oy| {
        let mut n = 0usize;
        let mut set = 0usize;
        for y in oy * factor..(oy + 1) * factor {
            for x in ox * factor..(ox + 1) * factor {
                if valid.is_none_or(|v| *v.get(x, y)) {
                    n += 1;
                    set += mask.get(x, y) as usize;
                }
            }
        }
        n > 0 && 2 * set >= n
    })))
}

/// Per-pixel probability of being dynamic, clamped to `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbabilityMap {
    values: Grid<f64>,
    valid: Grid<bool>,
}

impl ProbabilityMap {
    pub fn new(values: Grid<f64>, valid: Grid<bool>) -> Result<Self> {
        valid.ensure_dims(values.dims())?;
        let mut values = values;
        for (p, &v) in values.as_mut_slice().iter_mut().zip(valid.as_slice()) {
            *p = if v && p.is_finite() { p.clamp(0.0, 1.0) } else { 0.0 };
        }
        Ok(Self { values, valid })
    }

    pub fn constant(width: usize, height: usize, p: f64) -> Self {
        Self::new(Grid::filled(width, height, p), Grid::filled(width, height, true)).unwrap()
    }

    pub fn dims(&self) -> (usize, usize) {
        self.values.dims()
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        *self.values.get(x, y)
    }

    pub fn is_valid(&self, x: usize, y: usize) -> bool {
        *self.valid.get(x, y)
    }

    pub fn values(&self) -> &Grid<f64> {
        &self.values
    }

    pub fn validity(&self) -> &Grid<bool> {
        &self.valid
    }

    /// Probabilities quantized to 8 bits.
    pub fn to_u8(&self) -> Vec<u8> {
        self.values
            .as_slice()
            .iter()
            .map(|p| (p * 255.0).round() as u8)
            .collect()
    }
}

/// Geometric decay of the binarization threshold with a floor.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThresholdSchedule {
    pub z0: f64,
    pub gamma: f64,
    pub z_min: f64,
}

impl Default for ThresholdSchedule {
    fn default() -> Self {
        Self {
            z0: 0.9,
            gamma: 0.7,
            z_min: 0.5,
        }
    }
}

impl ThresholdSchedule {
    pub fn new(z0: f64, gamma: f64, z_min: f64) -> Result<Self> {
        let s = Self { z0, gamma, z_min };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        let unit = |v: f64| v > 0.0 && v <= 1.0;
        if unit(self.z0) && unit(self.gamma) && unit(self.z_min) && self.z_min <= self.z0 {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!("threshold schedule {self:?}")))
        }
    }
}

/// Threshold for segmenter iteration `i` (1-based): `max(z_min, z0 * gamma^(i-1))`.
pub fn threshold_for_iteration(s: &ThresholdSchedule, i: usize) -> f64 {
    assert!(i >= 1, "iterations are 1-based");
    let exp = i32::try_from(i - 1).unwrap_or(i32::MAX);
    (s.z0 * s.gamma.powi(exp)).max(s.z_min)
}

/// `mask = z >= threshold` on valid pixels.
pub fn binarize(z: &ProbabilityMap, threshold: f64) -> SegMask {
    let data = z
        .values
        .as_slice()
        .iter()
        .zip(z.valid.as_slice())
        .map(|(&p, &v)| v && p >= threshold)
        .collect();
    SegMask(Grid::from_vec(z.values.width(), z.values.height(), data).unwrap())
}

/// Randomly shaped, locally connected mask covering `fraction` of the grid.
///
/// Gaussian white noise is blurred with a log-uniform sigma from
/// `sigma_range` and the highest-valued `round(fraction * n)` pixels are
/// selected (ties broken by pixel index).
pub fn cow_mask(seed: u64, h: usize, w: usize, fraction: f64, sigma_range: (f64, f64)) -> SegMask {
    let fraction = fraction.clamp(0.0, 1.0);
    let n = w * h;
    let k = ((fraction * n as f64).round() as usize).min(n);
    if k == 0 {
        return SegMask::empty(w, h);
    }
    if k == n {
        return SegMask::full(w, h);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (lo, hi) = (sigma_range.0.min(sigma_range.1), sigma_range.0.max(sigma_range.1));
    let sigma = if hi > lo {
        (lo.ln() + rng.random::<f64>() * (hi.ln() - lo.ln())).exp()
    } else {
        lo
    };
    let noise: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
    let blurred = gaussian_blur(&noise, w, h, sigma);

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_unstable_by(|&a, &b| blurred[b].total_cmp(&blurred[a]).then(a.cmp(&b)));
    let mut data = vec![false; n];
    for &i in &order[..k] {
        data[i] = true;
    }
    SegMask(Grid::from_vec(w, h, data).unwrap())
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let r = (3.0 * sigma).ceil().max(1.0) as i64;
    let mut k: Vec<f64> = (-r..=r)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// Separable Gaussian blur with mirrored borders.
fn gaussian_blur(src: &[f64], w: usize, h: usize, sigma: f64) -> Vec<f64> {
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as i64;
    let reflect = |i: i64, n: usize| -> usize {
        let n = n as i64;
        if n == 1 {
            return 0;
        }
        let period = 2 * (n - 1);
        let mut m = i.rem_euclid(period);
        if m >= n {
            m = period - m;
        }
        m as usize
    };
    let mut tmp = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (j, kv) in k.iter().enumerate() {
                acc += kv * src[y * w + reflect(x as i64 + j as i64 - r, w)];
            }
            tmp[y * w + x] = acc;
        }
    }
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (j, kv) in k.iter().enumerate() {
                acc += kv * tmp[reflect(y as i64 + j as i64 - r, h) * w + x];
            }
            out[y * w + x] = acc;
        }
    }
    out
}

/// `1 - exp(-(r / sigma)^2)`.
#[inline]
pub fn residual_probability(residual: f64, sigma_r: f64) -> f64 {
    if !residual.is_finite() {
        return 1.0;
    }
    let q = residual / sigma_r;
    1.0 - (-q * q).exp()
}

/// Residual-flow segmenter.
///
/// With `depth`, the residual is the full 2D difference between the observed
/// flow and the rigid flow induced by `motion` on the depth map; an
/// up-to-scale `motion` first gets its translation length fitted by
/// [`fit_translation_scale`]. Without depth, the residual is the Sampson
/// distance to `E = [t]x R` of the point transform, converted to pixels via
/// `fx`.
pub fn segment_residual(
    flow: &FlowField,
    motion: &Motion,
    k: &CameraIntrinsics,
    depth: Option<&DepthMap>,
    sigma_r: f64,
) -> Result<ProbabilityMap> {
    segment_residual_with(flow, motion, k, depth, sigma_r, Execution::default())
}

pub fn segment_residual_with(
    flow: &FlowField,
    motion: &Motion,
    k: &CameraIntrinsics,
    depth: Option<&DepthMap>,
    sigma_r: f64,
    exec: Execution,
) -> Result<ProbabilityMap> {
    let residuals = residual_map(flow, motion, k, depth, exec)?;
    let (w, h) = flow.dims();
    let mut valid = Grid::filled(w, h, false);
    let values = Grid::from_vec(
        w,
        h,
        residuals
            .iter()
            .enumerate()
            .map(|(i, r)| match r {
                Some(r) => {
                    valid.as_mut_slice()[i] = true;
                    residual_probability(*r, sigma_r)
                }
                None => 0.0,
            })
            .collect(),
    )?;
    ProbabilityMap::new(values, valid)
}

/// Per-pixel residual in pixels; `None` where it is undefined.
pub fn residual_map(
    flow: &FlowField,
    motion: &Motion,
    k: &CameraIntrinsics,
    depth: Option<&DepthMap>,
    exec: Execution,
) -> Result<Vec<Option<f64>>> {
    if !motion.is_finite() {
        return Err(Error::DegenerateMotion("non-finite motion".into()));
    }
    if flow.valid_count() == 0 {
        return Err(Error::InvalidConfig("flow has no valid pixel".into()));
    }
    let (w, h) = flow.dims();
    let point = motion.inverse();
    let r = point.rotation.to_matrix();

    if let Some(depth) = depth {
        depth.grid().ensure_dims(flow.dims())?;
        let t = if motion.up_to_scale {
            point.translation * fit_translation_scale(flow, motion, k, depth)
        } else {
            point.translation
        };
        let rows = par::map_range(exec, h, |y| {
            (0..w)
                .map(|x| {
                    let f = flow.get(x, y)?;
                    let z = depth.get(x, y)?;
                    let c = Vector2::new(x as f64, y as f64);
                    let moved = r * k.unproject(&c, z) + t;
                    if moved.z <= 1e-9 {
                        return Some(f64::INFINITY);
                    }
                    let rigid = k.project_unchecked(&moved) - c;
                    Some((f - rigid).norm())
                })
                .collect::<Vec<_>>()
        });
        return Ok(rows.into_iter().flatten().collect());
    }

    if point.translation.norm() < 1e-9 {
        return Err(Error::DegenerateMotion(
            "epipolar residual is undefined without translation".into(),
        ));
    }
    let e = essential_from_point_transform(&r, &point.translation.normalize());
    let rows = par::map_range(exec, h, |y| {
        (0..w)
            .map(|x| {
                let f = flow.get(x, y)?;
                let c = Vector2::new(x as f64, y as f64);
                let x1 = k.normalize(&c);
                let x2 = k.normalize(&(c + f));
                Some(sampson_distance(&e, &x1, &x2) * k.fx)
            })
            .collect::<Vec<_>>()
    });
    Ok(rows.into_iter().flatten().collect())
}

/// Robust translation length for an up-to-scale motion given depth.
///
/// Each pixel yields the least-squares scale of its two linear
/// reprojection equations; the median over pixels away from the epipole is
/// returned (zero if no pixel qualifies).
pub fn fit_translation_scale(
    flow: &FlowField,
    motion: &Motion,
    k: &CameraIntrinsics,
    depth: &DepthMap,
) -> f64 {
    let point = motion.inverse();
    let r = point.rotation.to_matrix();
    let n = point.translation.norm();
    if n < 1e-12 {
        return 0.0;
    }
    let t: Vector3<f64> = point.translation / n;
    let (w, h) = flow.dims();
    let mut scales = Vec::new();
    for y in 0..h {
        for x in 0..w {
            let (Some(f), Some(z)) = (flow.get(x, y), depth.get(x, y)) else {
                continue;
            };
            let c = Vector2::new(x as f64, y as f64);
            let a3 = r * k.unproject(&c, z);
            let m = k.normalize(&(c + f));
            let a = Vector2::new(t.x - m.x * t.z, t.y - m.y * t.z);
            let b = Vector2::new(m.x * a3.z - a3.x, m.y * a3.z - a3.y);
            let aa = a.dot(&a);
            // skip pixels whose ray is nearly parallel to the translation
            if aa < 1e-6 {
                continue;
            }
            scales.push(a.dot(&b) / aa);
        }
    }
    if scales.is_empty() {
        return 0.0;
    }
    let mid = scales.len() / 2;
    let (_, m, _) = scales.select_nth_unstable_by(mid, |a, b| a.total_cmp(b));
    *m
}
