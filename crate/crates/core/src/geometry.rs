//! Rigid-motion algebra and the pinhole camera model.
//!
//! Pixel convention: integer coordinates address pixel centers, so the
//! top-left pixel of a `W x H` image spans `[-0.5, 0.5)^2` and the image
//! center sits at `((W - 1) / 2, (H - 1) / 2)`.

use nalgebra::{Matrix3, Matrix4, Quaternion, UnitQuaternion, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const MIN_DEPTH: f64 = 1e-9;

/// Unit quaternion rotation kept in the `w >= 0` hemisphere.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rotation(UnitQuaternion<f64>);

impl Rotation {
    pub fn identity() -> Self {
        Self(UnitQuaternion::identity())
    }

    /// Builds a rotation from raw `(w, x, y, z)` components, normalizing them.
    pub fn from_wxyz(w: f64, x: f64, y: f64, z: f64) -> Self {
        Self::canonical(UnitQuaternion::from_quaternion(Quaternion::new(w, x, y, z)))
    }

    /// Exponential map of an axis-angle (so(3)) vector.
    pub fn from_axis_angle(v: &Vector3<f64>) -> Self {
        Self::canonical(UnitQuaternion::from_scaled_axis(*v))
    }

    /// Projects an arbitrary 3x3 matrix onto the closest rotation.
    pub fn from_matrix(m: &Matrix3<f64>) -> Self {
        let r = nalgebra::Rotation3::from_matrix(m);
        Self::canonical(UnitQuaternion::from_rotation_matrix(&r))
    }

    pub fn from_unit_quaternion(q: UnitQuaternion<f64>) -> Self {
        Self::canonical(q)
    }

    fn canonical(q: UnitQuaternion<f64>) -> Self {
        if q.w < 0.0 {
            Self(UnitQuaternion::new_unchecked(-q.into_inner()))
        } else {
            Self(q)
        }
    }

    pub fn wxyz(&self) -> [f64; 4] {
        let q = self.0.quaternion();
        [q.w, q.i, q.j, q.k]
    }

    pub fn quaternion(&self) -> &UnitQuaternion<f64> {
        &self.0
    }

    /// Logarithm map; the returned vector has norm in `[0, pi]`.
    pub fn to_axis_angle(&self) -> Vector3<f64> {
        self.0.scaled_axis()
    }

    pub fn to_matrix(&self) -> Matrix3<f64> {
        *self.0.to_rotation_matrix().matrix()
    }

    pub fn angle(&self) -> f64 {
        let q = self.0.quaternion();
        2.0 * q.imag().norm().atan2(q.w.abs())
    }

    pub fn inverse(&self) -> Self {
        Self::canonical(self.0.inverse())
    }

    /// `self * other`: applies `other` first.
    pub fn compose(&self, other: &Rotation) -> Self {
        Self::canonical(self.0 * other.0)
    }

    pub fn rotate(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.0.transform_vector(v)
    }

    pub fn is_finite(&self) -> bool {
        self.wxyz().iter().all(|c| c.is_finite())
    }
}

impl Default for Rotation {
    fn default() -> Self {
        Self::identity()
    }
}

impl Serialize for Rotation {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.wxyz().serialize(s)
    }
}

impl<'de> Deserialize<'de> for Rotation {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let [w, x, y, z] = <[f64; 4]>::deserialize(d)?;
        let q = Quaternion::new(w, x, y, z);
        // already-unit input is kept bit for bit so round trips are exact
        if (q.norm() - 1.0).abs() <= 4.0 * f64::EPSILON {
            Ok(Self::canonical(UnitQuaternion::new_unchecked(q)))
        } else {
            Ok(Self::from_wxyz(w, x, y, z))
        }
    }
}

/// Geodesic distance on SO(3), in `[0, pi]`.
pub fn geodesic_angle(a: &Rotation, b: &Rotation) -> f64 {
    a.inverse().compose(b).angle()
}

/// Angle between two directions; zero vectors compare as orthogonal to everything.
pub fn direction_angle(a: &Vector3<f64>, b: &Vector3<f64>) -> f64 {
    let (na, nb) = (a.norm(), b.norm());
    if na < MIN_DEPTH || nb < MIN_DEPTH {
        return std::f64::consts::FRAC_PI_2;
    }
    // atan2 form stays accurate for nearly parallel vectors.
    a.cross(b).norm().atan2(a.dot(b))
}

/// A rigid transform `x -> R x + t`.
///
/// As a camera motion between frames `t` and `t+1` it is the pose of camera
/// `t+1` expressed in camera `t`, so points move from camera `t` coordinates
/// to camera `t+1` coordinates through [`Motion::inverse`]. When
/// `up_to_scale` is set only the direction of `translation` is meaningful.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Motion {
    pub rotation: Rotation,
    pub translation: Vector3<f64>,
    #[serde(default)]
    pub up_to_scale: bool,
}

impl Motion {
    pub fn identity() -> Self {
        Self::new(Rotation::identity(), Vector3::zeros())
    }

    pub fn new(rotation: Rotation, translation: Vector3<f64>) -> Self {
        Self {
            rotation,
            translation,
            up_to_scale: false,
        }
    }

    /// Up-to-scale motion; the translation is normalized (zero stays zero).
    pub fn new_up_to_scale(rotation: Rotation, translation: Vector3<f64>) -> Self {
        let n = translation.norm();
        let translation = if n > 0.0 { translation / n } else { translation };
        Self {
            rotation,
            translation,
            up_to_scale: true,
        }
    }

    /// Metric motion with the translation direction scaled to length `scale`.
    pub fn with_scale(&self, scale: f64) -> Self {
        let n = self.translation.norm();
        let translation = if n > 0.0 {
            self.translation * (scale / n)
        } else {
            self.translation
        };
        Self::new(self.rotation, translation)
    }

    pub fn from_matrix4(m: &Matrix4<f64>) -> Self {
        let r: Matrix3<f64> = m.fixed_view::<3, 3>(0, 0).into_owned();
        let t: Vector3<f64> = m.fixed_view::<3, 1>(0, 3).into_owned();
        Self::new(Rotation::from_matrix(&r), t)
    }

    pub fn to_matrix4(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0)
            .copy_from(&self.rotation.to_matrix());
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation.rotate(p) + self.translation
    }

    pub fn inverse(&self) -> Self {
        let rotation = self.rotation.inverse();
        Self {
            rotation,
            translation: -rotation.rotate(&self.translation),
            up_to_scale: self.up_to_scale,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.rotation.is_finite() && self.translation.iter().all(|c| c.is_finite())
    }
}

impl Default for Motion {
    fn default() -> Self {
        Self::identity()
    }
}

/// `a ∘ b`: the motion that applies `b` first, then `a`.
pub fn compose(a: &Motion, b: &Motion) -> Result<Motion> {
    if a.up_to_scale || b.up_to_scale {
        return Err(Error::UpToScaleComposition);
    }
    Ok(Motion::new(
        a.rotation.compose(&b.rotation),
        a.rotation.rotate(&b.translation) + a.translation,
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Result<Self> {
        let k = Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        };
        k.validate()?;
        Ok(k)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.fx.is_finite()
            && self.fy.is_finite()
            && self.fx > 0.0
            && self.fy > 0.0
            && self.cx > 0.0
            && self.cy > 0.0
            && self.cx < self.width as f64
            && self.cy < self.height as f64;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidIntrinsics(format!("{self:?}")))
        }
    }

    /// Intrinsics of the same camera sampled on a `width x height` grid whose
    /// pixels tile the native image, keeping pixel centers aligned.
    pub fn for_grid(&self, width: usize, height: usize) -> Self {
        let sx = width as f64 / self.width as f64;
        let sy = height as f64 / self.height as f64;
        Self {
            fx: self.fx * sx,
            fy: self.fy * sy,
            cx: (self.cx + 0.5) * sx - 0.5,
            cy: (self.cy + 0.5) * sy - 0.5,
            width,
            height,
        }
    }

    pub fn project(&self, p: &Vector3<f64>) -> Result<Vector2<f64>> {
        if p.z <= MIN_DEPTH {
            return Err(Error::BehindCamera(p.z));
        }
        Ok(self.project_unchecked(p))
    }

    #[inline]
    pub(crate) fn project_unchecked(&self, p: &Vector3<f64>) -> Vector2<f64> {
        Vector2::new(self.fx * p.x / p.z + self.cx, self.fy * p.y / p.z + self.cy)
    }

    pub fn unproject(&self, pixel: &Vector2<f64>, depth: f64) -> Vector3<f64> {
        let n = self.normalize(pixel);
        Vector3::new(n.x * depth, n.y * depth, depth)
    }

    /// Pixel to normalized image coordinates.
    #[inline]
    pub fn normalize(&self, pixel: &Vector2<f64>) -> Vector2<f64> {
        Vector2::new((pixel.x - self.cx) / self.fx, (pixel.y - self.cy) / self.fy)
    }

    #[inline]
    pub fn denormalize(&self, n: &Vector2<f64>) -> Vector2<f64> {
        Vector2::new(n.x * self.fx + self.cx, n.y * self.fy + self.cy)
    }

    pub fn contains(&self, pixel: &Vector2<f64>) -> bool {
        pixel.x >= -0.5
            && pixel.y >= -0.5
            && pixel.x < self.width as f64 - 0.5
            && pixel.y < self.height as f64 - 0.5
    }
}

pub fn project(point: &Vector3<f64>, k: &CameraIntrinsics) -> Result<Vector2<f64>> {
    k.project(point)
}

pub fn unproject(pixel: &Vector2<f64>, depth: f64, k: &CameraIntrinsics) -> Vector3<f64> {
    k.unproject(pixel, depth)
}

/// Two-channel grid of normalized pixel coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct IntrinsicsLayer {
    pub width: usize,
    pub height: usize,
    pub data: Vec<[f64; 2]>,
}

impl IntrinsicsLayer {
    pub fn at(&self, x: usize, y: usize) -> [f64; 2] {
        self.data[y * self.width + x]
    }
}

/// Samples normalized coordinates at the centers of an `h x w` grid laid
/// over the native image of `k`.
pub fn make_intrinsics_layer(k: &CameraIntrinsics, h: usize, w: usize) -> IntrinsicsLayer {
    let sx = k.width as f64 / w as f64;
    let sy = k.height as f64 / h as f64;
    let mut data = Vec::with_capacity(w * h);
    for y in 0..h {
        let v = (y as f64 + 0.5) * sy - 0.5;
        for x in 0..w {
            let u = (x as f64 + 0.5) * sx - 0.5;
            data.push([(u - k.cx) / k.fx, (v - k.cy) / k.fy]);
        }
    }
    IntrinsicsLayer {
        width: w,
        height: h,
        data,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CropRect {
    pub x: f64,
    pub y: f64,
    pub width: f64,
    pub height: f64,
}

/// Intrinsics after cropping `crop` out of the image and resizing it to `out_size`.
pub fn rcr_adjust(
    k: &CameraIntrinsics,
    crop: &CropRect,
    out_size: (usize, usize),
) -> Result<CameraIntrinsics> {
    let (img_w, img_h) = (k.width as f64, k.height as f64);
    let eps = 1e-9;
    let inside = crop.x >= -eps
        && crop.y >= -eps
        && crop.width > 0.0
        && crop.height > 0.0
        && crop.x + crop.width <= img_w + eps
        && crop.y + crop.height <= img_h + eps;
    if !inside {
        return Err(Error::CropOutOfBounds {
            x: crop.x,
            y: crop.y,
            width: crop.width,
            height: crop.height,
            image_width: img_w,
            image_height: img_h,
        });
    }
    let (out_w, out_h) = out_size;
    if out_w == 0 || out_h == 0 {
        return Err(Error::InvalidConfig("output size must be at least 1x1".into()));
    }
    let sx = out_w as f64 / crop.width;
    let sy = out_h as f64 / crop.height;
    CameraIntrinsics::new(
        k.fx * sx,
        k.fy * sy,
        (k.cx - crop.x) * sx,
        (k.cy - crop.y) * sy,
        out_w,
        out_h,
    )
}

pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::{FRAC_PI_2, PI};

    fn random_motion(rng: &mut ChaCha8Rng) -> Motion {
        let axis = Vector3::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        );
        let t = Vector3::new(
            rng.random_range(-3.0..3.0),
            rng.random_range(-3.0..3.0),
            rng.random_range(-3.0..3.0),
        );
        Motion::new(Rotation::from_axis_angle(&(axis * 1.5)), t)
    }

    fn motion_close(a: &Motion, b: &Motion, tol: f64) -> bool {
        (a.to_matrix4() - b.to_matrix4()).abs().max() < tol
    }

    #[test]
    fn compose_identity_and_inverse() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            let m = random_motion(&mut rng);
            let left = compose(&Motion::identity(), &m).unwrap();
            assert!(motion_close(&left, &m, 1e-15));
            let id = compose(&m, &m.inverse()).unwrap();
            assert!(motion_close(&id, &Motion::identity(), 1e-12));
            let id = compose(&m.inverse(), &m).unwrap();
            assert!(motion_close(&id, &Motion::identity(), 1e-12));
        }
    }

    #[test]
    fn compose_matches_homogeneous_product() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..50 {
            let a = random_motion(&mut rng);
            let b = random_motion(&mut rng);
            let ab = compose(&a, &b).unwrap();
            let oracle = a.to_matrix4() * b.to_matrix4();
            assert!((ab.to_matrix4() - oracle).abs().max() < 1e-12);
        }
    }

    #[test]
    fn compose_rejects_up_to_scale() {
        let m = Motion::new_up_to_scale(Rotation::identity(), Vector3::new(0.0, 0.0, 2.0));
        assert_relative_eq!(m.translation.norm(), 1.0);
        assert!(matches!(
            compose(&m, &Motion::identity()),
            Err(Error::UpToScaleComposition)
        ));
        assert!(matches!(
            compose(&Motion::identity(), &m),
            Err(Error::UpToScaleComposition)
        ));
    }

    #[test]
    fn geodesic_examples() {
        let r = Rotation::from_axis_angle(&Vector3::new(0.3, -0.2, 0.9));
        assert!(geodesic_angle(&r, &r) < 1e-12);
        let z90 = Rotation::from_axis_angle(&Vector3::new(0.0, 0.0, FRAC_PI_2));
        assert_relative_eq!(
            geodesic_angle(&Rotation::identity(), &z90),
            FRAC_PI_2,
            epsilon = 1e-12
        );
    }

    #[test]
    fn geodesic_matches_matrix_log() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let a = random_motion(&mut rng).rotation;
            let b = random_motion(&mut rng).rotation;
            let rel = a.to_matrix().transpose() * b.to_matrix();
            // Angle of the matrix logarithm from the trace identity.
            let oracle = ((rel.trace() - 1.0) / 2.0).clamp(-1.0, 1.0).acos();
            let got = geodesic_angle(&a, &b);
            assert!((0.0..=PI).contains(&got));
            assert!((got - oracle).abs() < 1e-7, "{got} vs {oracle}");
        }
    }

    #[test]
    fn canonical_sign_and_axis_angle_round_trip() {
        let r = Rotation::from_wxyz(-0.5, 0.5, 0.5, 0.5);
        assert!(r.wxyz()[0] >= 0.0);
        let v = Vector3::new(0.4, -1.1, 0.7);
        let back = Rotation::from_axis_angle(&v).to_axis_angle();
        assert!((back - v).norm() < 1e-12);
    }

    #[test]
    fn projection_examples() {
        let k = CameraIntrinsics::new(100.0, 100.0, 50.0, 50.0, 100, 100).unwrap();
        let p = k.project(&Vector3::new(0.0, 0.0, 7.0)).unwrap();
        assert_eq!(p, Vector2::new(50.0, 50.0));
        let p = k.project(&Vector3::new(1.0, 2.0, 4.0)).unwrap();
        assert_eq!(p, Vector2::new(75.0, 100.0));
        assert!(matches!(
            k.project(&Vector3::new(1.0, 1.0, 0.0)),
            Err(Error::BehindCamera(_))
        ));
        assert!(matches!(
            k.project(&Vector3::new(1.0, 1.0, -2.0)),
            Err(Error::BehindCamera(_))
        ));
    }

    #[test]
    fn intrinsics_layer_examples() {
        let k = CameraIntrinsics::new(320.0, 310.0, 20.0, 12.0, 64, 48).unwrap();
        let full = make_intrinsics_layer(&k, 48, 64);
        assert_eq!(full.at(20, 12), [0.0, 0.0]);
        assert_eq!(full.at(0, 0), [(0.0 - 20.0) / 320.0, (0.0 - 12.0) / 310.0]);

        // Quarter grid: each cell center is the mean of its 4x4 native pixel centers.
        let quarter = make_intrinsics_layer(&k, 12, 16);
        for y in 0..12 {
            for x in 0..16 {
                let mut u = 0.0;
                let mut v = 0.0;
                for dy in 0..4 {
                    for dx in 0..4 {
                        u += (4 * x + dx) as f64;
                        v += (4 * y + dy) as f64;
                    }
                }
                let (u, v) = (u / 16.0, v / 16.0);
                let got = quarter.at(x, y);
                assert!((got[0] - (u - k.cx) / k.fx).abs() < 1e-15);
                assert!((got[1] - (v - k.cy) / k.fy).abs() < 1e-15);
            }
        }

        // Same layer from the grid-scaled intrinsics.
        let kq = k.for_grid(16, 12);
        for y in 0..12 {
            for x in 0..16 {
                let n = kq.normalize(&Vector2::new(x as f64, y as f64));
                let got = quarter.at(x, y);
                assert!((got[0] - n.x).abs() < 1e-14 && (got[1] - n.y).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn rcr_examples() {
        let k = CameraIntrinsics::new(320.0, 320.0, 160.0, 120.0, 320, 240).unwrap();
        let full = CropRect {
            x: 0.0,
            y: 0.0,
            width: 320.0,
            height: 240.0,
        };
        assert_eq!(rcr_adjust(&k, &full, (320, 240)).unwrap(), k);

        let shifted = CropRect {
            x: 10.0,
            y: 20.0,
            width: 300.0,
            height: 200.0,
        };
        let a = rcr_adjust(&k, &shifted, (300, 200)).unwrap();
        assert_eq!((a.fx, a.fy, a.cx, a.cy), (320.0, 320.0, 150.0, 100.0));

        let half = rcr_adjust(&k, &full, (160, 120)).unwrap();
        assert_eq!((half.fx, half.fy, half.cx, half.cy), (160.0, 160.0, 80.0, 60.0));

        let bad = CropRect {
            x: 100.0,
            y: 0.0,
            width: 300.0,
            height: 240.0,
        };
        assert!(matches!(
            rcr_adjust(&k, &bad, (100, 100)),
            Err(Error::CropOutOfBounds { .. })
        ));
    }

    fn arb_rotation() -> impl Strategy<Value = Rotation> {
        (-2.0..2.0f64, -2.0..2.0f64, -2.0..2.0f64)
            .prop_map(|(x, y, z)| Rotation::from_axis_angle(&Vector3::new(x, y, z)))
    }

    proptest! {
        #[test]
        fn rotation_composition_is_associative(a in arb_rotation(), b in arb_rotation(), c in arb_rotation()) {
            let l = a.compose(&b).compose(&c).to_matrix();
            let r = a.compose(&b.compose(&c)).to_matrix();
            prop_assert!((l - r).abs().max() < 1e-12);
            let id = a.compose(&a.inverse());
            prop_assert!(id.angle() < 1e-12);
        }

        #[test]
        fn geodesic_is_a_metric(a in arb_rotation(), b in arb_rotation(), c in arb_rotation()) {
            let ab = geodesic_angle(&a, &b);
            prop_assert!((ab - geodesic_angle(&b, &a)).abs() < 1e-9);
            prop_assert!(ab <= geodesic_angle(&a, &c) + geodesic_angle(&c, &b) + 1e-9);
        }

        #[test]
        fn project_unproject_inverse(x in -5.0..5.0f64, y in -5.0..5.0f64, z in 0.01..50.0f64) {
            let k = CameraIntrinsics::new(300.0, 280.0, 160.5, 119.5, 320, 240).unwrap();
            let p = Vector3::new(x, y, z);
            let back = k.unproject(&k.project(&p).unwrap(), z);
            prop_assert!((back - p).norm() < 1e-12 * (1.0 + p.norm()));
        }

        #[test]
        fn rcr_composition_law(
            x1 in 0.0..40.0f64, y1 in 0.0..30.0f64, s1 in 0.3..2.0f64,
            x2 in 0.0..20.0f64, y2 in 0.0..15.0f64, s2 in 0.3..2.0f64,
        ) {
            let k = CameraIntrinsics::new(500.0, 480.0, 320.0, 240.0, 640, 480).unwrap();
            let c1 = CropRect { x: x1, y: y1, width: 560.0, height: 420.0 };
            let o1 = ((560.0 * s1).round() as usize, (420.0 * s1).round() as usize);
            let k1 = rcr_adjust(&k, &c1, o1).unwrap();
            let (w1, h1) = (o1.0 as f64, o1.1 as f64);
            let c2 = CropRect { x: x2 * s1, y: y2 * s1, width: w1 * 0.8, height: h1 * 0.8 };
            let o2 = ((w1 * 0.8 * s2).round().max(1.0) as usize, (h1 * 0.8 * s2).round().max(1.0) as usize);
            let twice = rcr_adjust(&k1, &c2, o2).unwrap();

            let (sx1, sy1) = (w1 / c1.width, h1 / c1.height);
            let combined = CropRect {
                x: c1.x + c2.x / sx1,
                y: c1.y + c2.y / sy1,
                width: c2.width / sx1,
                height: c2.height / sy1,
            };
            let once = rcr_adjust(&k, &combined, o2).unwrap();
            for (a, b) in [(twice.fx, once.fx), (twice.fy, once.fy), (twice.cx, once.cx), (twice.cy, once.cy)] {
                prop_assert!((a - b).abs() < 1e-9 * (1.0 + a.abs()));
            }
        }
    }
}
