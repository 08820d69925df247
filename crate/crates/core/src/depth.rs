use nalgebra::Vector2;

use crate::error::{Error, Result};
use crate::grid::Grid;

/// Per-pixel depth along the optical axis; non-positive entries are invalid.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap(Grid<f64>);

impl DepthMap {
    pub fn invalid(width: usize, height: usize) -> Self {
        Self(Grid::filled(width, height, 0.0))
    }

    pub fn from_grid(grid: Grid<f64>) -> Self {
        let mut grid = grid;
        for d in grid.as_mut_slice() {
            if !(d.is_finite() && *d > 0.0) {
                *d = 0.0;
            }
        }
        Self(grid)
    }

    pub fn grid(&self) -> &Grid<f64> {
        &self.0
    }

    pub fn dims(&self) -> (usize, usize) {
        self.0.dims()
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> Option<f64> {
        let d = *self.0.get(x, y);
        (d > 0.0).then_some(d)
    }

    pub fn set(&mut self, x: usize, y: usize, depth: f64) {
        *self.0.get_mut(x, y) = if depth.is_finite() && depth > 0.0 { depth } else { 0.0 };
    }

    /// Depth at a sub-pixel location by bilinear interpolation of inverse
    /// depth, which is exact on planar surfaces.
    ///
    /// Every tap from [`bilinear_taps`] must be valid, and their depths must
    /// agree within a factor of `1 + max_spread`; otherwise the lookup
    /// straddles a depth discontinuity and yields `None`.
    pub fn bilinear(&self, p: &Vector2<f64>, max_spread: f64) -> Option<f64> {
        let (w, h) = self.dims();
        let mut acc = 0.0;
        let mut lo = f64::INFINITY;
        let mut hi: f64 = 0.0;
        for (x, y, wgt) in bilinear_taps(p, w, h)?.into_iter().flatten() {
            let d = self.get(x, y)?;
            lo = lo.min(d);
            hi = hi.max(d);
            acc += wgt / d;
        }
        (hi <= lo * (1.0 + max_spread)).then_some(1.0 / acc)
    }

    /// Mean of valid depths in each `factor x factor` block.
    pub fn downsample(&self, factor: usize) -> Result<DepthMap> {
        let (w, h) = self.dims();
        if factor == 0 || w % factor != 0 || h % factor != 0 {
            return Err(Error::NotDivisible {
                width: w,
                height: h,
                factor,
            });
        }
        let out = Grid::from_fn(w / factor, h / factor, |ox, oy| {
            let mut sum = 0.0;
            let mut n = 0usize;
            for y in oy * factor..(oy + 1) * factor {
                for x in ox * factor..(ox + 1) * factor {
                    if let Some(d) = self.get(x, y) {
                        sum += d;
                        n += 1;
                    }
                }
            }
            if n > 0 {
                sum / n as f64
            } else {
                0.0
            }
        });
        Ok(DepthMap(out))
    }
}

/// Weights below this snap to zero, so lookups landing on a pixel center up
/// to rounding do not depend on the neighbors.
pub const TAP_EPS: f64 = 1e-9;

/// Neighbors `(x, y, weight)` of a bilinear lookup at `p` on a `w x h` grid.
///
/// Taps with weight at most [`TAP_EPS`] are dropped and the rest renormalized;
/// `None` if a kept tap falls outside the grid.
pub fn bilinear_taps(p: &Vector2<f64>, w: usize, h: usize) -> Option<[Option<(usize, usize, f64)>; 4]> {
    if !(p.x.is_finite() && p.y.is_finite()) {
        return None;
    }
    let x0 = p.x.floor();
    let y0 = p.y.floor();
    let snap = |a: f64| if a <= TAP_EPS { 0.0 } else if a >= 1.0 - TAP_EPS { 1.0 } else { a };
    let ax = snap(p.x - x0);
    let ay = snap(p.y - y0);
    let mut taps = [None; 4];
    for (slot, (dx, dy, wgt)) in taps.iter_mut().zip([
        (0, 0, (1.0 - ax) * (1.0 - ay)),
        (1, 0, ax * (1.0 - ay)),
        (0, 1, (1.0 - ax) * ay),
        (1, 1, ax * ay),
    ]) {
        if wgt <= 0.0 {
            continue;
        }
        let x = x0 as i64 + dx;
        let y = y0 as i64 + dy;
        if x < 0 || y < 0 || x >= w as i64 || y >= h as i64 {
            return None;
        }
        *slot = Some((x as usize, y as usize, wgt));
    }
    Some(taps)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bilinear_interpolates_and_rejects_discontinuities() {
        let mut d = DepthMap::invalid(3, 3);
        for y in 0..3 {
            for x in 0..3 {
                d.set(x, y, 1.0 / (0.1 + x as f64 * 0.001 + y as f64 * 0.002));
            }
        }
        // inverse depth is affine in the pixel grid on a plane
        let v = d.bilinear(&Vector2::new(0.5, 0.25), 0.05).unwrap();
        assert!((v - 1.0 / 0.101).abs() < 1e-12);
        let corner = d.bilinear(&Vector2::new(2.0, 2.0), 0.05).unwrap();
        assert!((corner - 1.0 / 0.106).abs() < 1e-12);
        assert_eq!(d.bilinear(&Vector2::new(2.5, 1.0), 0.05), None);

        d.set(1, 1, 3.0);
        assert_eq!(d.bilinear(&Vector2::new(0.5, 0.5), 0.05), None);
        d.set(1, 1, 0.0);
        assert_eq!(d.bilinear(&Vector2::new(0.5, 0.5), 0.05), None);
        assert_eq!(d.bilinear(&Vector2::new(0.0, 0.0), 0.05), Some(10.0));
        // a hair past the last column still resolves to that column
        assert!(d.bilinear(&Vector2::new(2.0 + 1e-12, 1.0), 0.05).is_some());
    }
}
