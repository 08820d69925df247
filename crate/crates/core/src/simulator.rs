//! Deterministic synthetic dynamic scenes with exact per-pixel ground truth.
//!
//! The world is a closed room (an inward-facing box) furnished with static
//! cuboids, plus rigid cuboid bodies that move between frames. Frames are
//! rendered by casting one ray per pixel center, so every pixel sees the
//! nearest surface and flow, depth and masks are analytic.

use std::path::Path;

use nalgebra::{Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::depth::{bilinear_taps, DepthMap};
use crate::error::{Error, Result};
use crate::flow::{write_flo, FlowField};
use crate::geometry::{compose, CameraIntrinsics, Motion, Rotation};
use crate::grid::Grid;
use crate::par::{self, Execution};
use crate::pgm;
use crate::segmentation::SegMask;

/// Default static/dynamic threshold for [`recover_motion_mask`], scene units.
pub const DEFAULT_TAU: f64 = 0.05;

const RAY_EPS: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MotionMagnitudes {
    /// Camera translation per frame, scene units.
    pub camera_translation: f64,
    pub camera_rotation_deg: f64,
    /// Body translation per frame, scene units.
    pub body_translation: f64,
    pub body_rotation_deg: f64,
}

impl Default for MotionMagnitudes {
    fn default() -> Self {
        Self {
            camera_translation: 0.25,
            camera_rotation_deg: 1.5,
            body_translation: 0.3,
            body_rotation_deg: 2.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneConfig {
    pub width: usize,
    pub height: usize,
    /// Focal length in pixels; the principal point is the image center.
    pub focal: f64,
    /// Number of static cuboids furnishing the room.
    pub n_static: usize,
    pub n_bodies: usize,
    /// Fraction of frame-0 pixels that should see a moving body.
    pub dynamic_fraction_target: f64,
    pub motion: MotionMagnitudes,
    pub frames: usize,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            width: 640,
            height: 480,
            focal: 320.0,
            n_static: 6,
            n_bodies: 3,
            dynamic_fraction_target: 0.3,
            motion: MotionMagnitudes::default(),
            frames: 10,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if self.width < 2 || self.height < 2 {
            return bad(format!("image must be at least 2x2, got {}x{}", self.width, self.height));
        }
        if !(self.focal.is_finite() && self.focal > 0.0) {
            return bad(format!("focal must be positive, got {}", self.focal));
        }
        if self.frames < 2 {
            return bad(format!("need at least 2 frames, got {}", self.frames));
        }
        if !(0.0..=1.0).contains(&self.dynamic_fraction_target) {
            return bad(format!(
                "dynamic_fraction_target must lie in [0, 1], got {}",
                self.dynamic_fraction_target
            ));
        }
        let m = &self.motion;
        for (name, v) in [
            ("camera_translation", m.camera_translation),
            ("camera_rotation_deg", m.camera_rotation_deg),
            ("body_translation", m.body_translation),
            ("body_rotation_deg", m.body_rotation_deg),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return bad(format!("{name} must be finite and non-negative, got {v}"));
            }
        }
        Ok(())
    }

    pub fn intrinsics(&self) -> CameraIntrinsics {
        CameraIntrinsics {
            fx: self.focal,
            fy: self.focal,
            cx: (self.width as f64 - 1.0) / 2.0,
            cy: (self.height as f64 - 1.0) / 2.0,
            width: self.width,
            height: self.height,
        }
    }
}

/// Axis-aligned box in its own frame, centered at the origin.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Cuboid {
    pub half_extents: Vector3<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StaticObject {
    pub shape: Cuboid,
    /// Object-to-world.
    pub pose: Motion,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RigidBody {
    pub shape: Cuboid,
    /// Body-to-world, one per frame.
    pub poses: Vec<Motion>,
}

impl RigidBody {
    /// Whether the body moves between frames `t` and `t + 1`.
    pub fn moves(&self, t: usize) -> bool {
        let (a, b) = (&self.poses[t], &self.poses[t + 1]);
        a.rotation.wxyz() != b.rotation.wxyz() || a.translation != b.translation
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub seed: u64,
    pub config: SceneConfig,
    pub k: CameraIntrinsics,
    pub room_min: Vector3<f64>,
    pub room_max: Vector3<f64>,
    pub statics: Vec<StaticObject>,
    pub bodies: Vec<RigidBody>,
    /// World-from-camera pose of every frame; frame 0 is the world origin.
    pub trajectory: Vec<Motion>,
}

/// Which face of which object a ray hit. Object 0 is the room, then the
/// static objects, then the bodies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct SurfaceId {
    pub object: u32,
    pub face: u8,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hit {
    /// Ray parameter; equals camera depth for rays built by [`Scene::camera_ray`].
    pub depth: f64,
    pub surface: SurfaceId,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FramePairTruth {
    pub flow: FlowField,
    pub depth_t: DepthMap,
    pub depth_t1: DepthMap,
    pub gt_mask: SegMask,
    /// Pose of camera `t+1` in camera `t`.
    pub gt_motion: Motion,
}

fn ray_box(half: &Vector3<f64>, o: &Vector3<f64>, d: &Vector3<f64>) -> Option<(f64, u8)> {
    let mut t_in = f64::NEG_INFINITY;
    let mut t_out = f64::INFINITY;
    let mut face = 0u8;
    for i in 0..3 {
        if d[i] == 0.0 {
            if o[i].abs() > half[i] {
                return None;
            }
            continue;
        }
        let a = (-half[i] - o[i]) / d[i];
        let b = (half[i] - o[i]) / d[i];
        let (near, far) = if a < b { (a, b) } else { (b, a) };
        if near > t_in {
            t_in = near;
            face = (2 * i) as u8 + u8::from(d[i] < 0.0);
        }
        t_out = t_out.min(far);
    }
    (t_in <= t_out && t_in > RAY_EPS).then_some((t_in, face))
}

fn ray_room(lo: &Vector3<f64>, hi: &Vector3<f64>, o: &Vector3<f64>, d: &Vector3<f64>) -> Option<(f64, u8)> {
    let mut best: Option<(f64, u8)> = None;
    for i in 0..3 {
        if d[i] == 0.0 {
            continue;
        }
        let (bound, face) = if d[i] > 0.0 {
            (hi[i], (2 * i + 1) as u8)
        } else {
            (lo[i], (2 * i) as u8)
        };
        let t = (bound - o[i]) / d[i];
        if t > RAY_EPS && best.is_none_or(|(bt, _)| t < bt) {
            best = Some((t, face));
        }
    }
    best
}

impl Scene {
    pub fn frames(&self) -> usize {
        self.trajectory.len()
    }

    /// World-space ray through a (sub-)pixel of camera `frame`.
    pub fn camera_ray(&self, k: &CameraIntrinsics, frame: usize, pixel: &Vector2<f64>) -> (Vector3<f64>, Vector3<f64>) {
        let cam = &self.trajectory[frame];
        let n = k.normalize(pixel);
        (cam.translation, cam.rotation.rotate(&Vector3::new(n.x, n.y, 1.0)))
    }

    /// Nearest surface along a world ray at `frame`. Exact depth ties go to
    /// the lowest object index.
    pub fn cast(&self, frame: usize, o: &Vector3<f64>, d: &Vector3<f64>) -> Option<Hit> {
        let mut best = ray_room(&self.room_min, &self.room_max, o, d).map(|(t, f)| Hit {
            depth: t,
            surface: SurfaceId { object: 0, face: f },
        });
        let mut consider = |object: u32, shape: &Cuboid, pose: &Motion| {
            let inv = pose.inverse();
            let lo = inv.transform_point(o);
            let ld = inv.rotation.rotate(d);
            if let Some((t, f)) = ray_box(&shape.half_extents, &lo, &ld) {
                if best.is_none_or(|b| t < b.depth) {
                    best = Some(Hit {
                        depth: t,
                        surface: SurfaceId { object, face: f },
                    });
                }
            }
        };
        for (i, s) in self.statics.iter().enumerate() {
            consider(1 + i as u32, &s.shape, &s.pose);
        }
        let base = 1 + self.statics.len() as u32;
        for (i, b) in self.bodies.iter().enumerate() {
            consider(base + i as u32, &b.shape, &b.poses[frame]);
        }
        best
    }

    /// Object-to-world pose of `object` at `frame`.
    fn object_pose(&self, object: u32, frame: usize) -> Option<Motion> {
        let i = object as usize;
        if i == 0 {
            return None;
        }
        if i <= self.statics.len() {
            return Some(self.statics[i - 1].pose);
        }
        Some(self.bodies[i - 1 - self.statics.len()].poses[frame])
    }

    fn body_index(&self, object: u32) -> Option<usize> {
        (object as usize).checked_sub(1 + self.statics.len())
    }

    /// Renders depth and surface ids of `frame` with intrinsics `k`.
    pub fn render_frame(&self, k: &CameraIntrinsics, frame: usize, exec: Execution) -> Grid<Option<Hit>> {
        let (w, h) = (k.width, k.height);
        let mut out = vec![None; w * h];
        par::for_each_row(exec, &mut out, w, |y, row| {
            for (x, px) in row.iter_mut().enumerate() {
                let (o, d) = self.camera_ray(k, frame, &Vector2::new(x as f64, y as f64));
                *px = self.cast(frame, &o, &d);
            }
        });
        Grid::from_vec(w, h, out).expect("row buffer matches grid")
    }

    /// Fraction of pixels of `frame` that see a body moving into `frame + 1`.
    fn moving_fraction(&self, k: &CameraIntrinsics, frame: usize, exec: Execution) -> f64 {
        let hits = self.render_frame(k, frame, exec);
        let n = hits
            .as_slice()
            .iter()
            .filter(|h| {
                h.and_then(|h| self.body_index(h.surface.object))
                    .is_some_and(|b| self.bodies[b].moves(frame))
            })
            .count();
        n as f64 / hits.len() as f64
    }
}

fn uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * rng.random::<f64>()
}

fn random_axis(rng: &mut ChaCha8Rng) -> Vector3<f64> {
    loop {
        let v = Vector3::new(uniform(rng, -1.0, 1.0), uniform(rng, -1.0, 1.0), uniform(rng, -1.0, 1.0));
        let n = v.norm();
        if n > 1e-3 && n <= 1.0 {
            return v / n;
        }
    }
}

fn contains_with_margin(shape: &Cuboid, pose: &Motion, p: &Vector3<f64>, margin: f64) -> bool {
    let l = pose.inverse().transform_point(p);
    (0..3).all(|i| l[i].abs() <= shape.half_extents[i] + margin)
}

const ROOM_MIN: [f64; 3] = [-6.0, -3.0, -4.0];
const ROOM_MAX: [f64; 3] = [6.0, 1.5, 18.0];
const CAMERA_CLEARANCE: f64 = 0.3;
const PLACEMENT_ATTEMPTS: usize = 64;

/// Builds a scene from `seed`. Bodies are scaled together so the moving
/// pixel fraction of frame 0 approximates the configured target.
pub fn generate_scene(seed: u64, config: &SceneConfig) -> Result<Scene> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = &config.motion;

    let mut trajectory = vec![Motion::identity()];
    for _ in 1..config.frames {
        let dir = Vector3::new(uniform(&mut rng, -0.5, 0.5), uniform(&mut rng, -0.2, 0.2), 1.0).normalize();
        let angle = m.camera_rotation_deg.to_radians() * uniform(&mut rng, 0.5, 1.0);
        let step = Motion::new(
            Rotation::from_axis_angle(&(random_axis(&mut rng) * angle)),
            dir * m.camera_translation,
        );
        trajectory.push(compose(trajectory.last().expect("non-empty"), &step)?);
    }
    let room_min = Vector3::from(ROOM_MIN);
    let room_max = Vector3::from(ROOM_MAX);
    for (f, c) in trajectory.iter().enumerate() {
        let p = c.translation;
        if (0..3).any(|i| p[i] < room_min[i] + 0.5 || p[i] > room_max[i] - 0.5) {
            return Err(Error::InvalidConfig(format!(
                "camera leaves the room at frame {f}; reduce frames or camera_translation"
            )));
        }
    }
    let clear_of_path = |shape: &Cuboid, pose: &Motion| {
        trajectory
            .iter()
            .all(|c| !contains_with_margin(shape, pose, &c.translation, CAMERA_CLEARANCE))
    };

    let mut statics = Vec::with_capacity(config.n_static);
    for _ in 0..config.n_static {
        for _ in 0..PLACEMENT_ATTEMPTS {
            let half = Vector3::new(
                uniform(&mut rng, 0.3, 1.0),
                uniform(&mut rng, 0.3, 1.2),
                uniform(&mut rng, 0.3, 1.0),
            );
            let side = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            let center = Vector3::new(
                side * uniform(&mut rng, 1.5, 4.5),
                ROOM_MAX[1] - half.y,
                uniform(&mut rng, 3.0, 15.0),
            );
            let yaw = uniform(&mut rng, -0.6, 0.6);
            let shape = Cuboid { half_extents: half };
            let pose = Motion::new(Rotation::from_axis_angle(&Vector3::new(0.0, yaw, 0.0)), center);
            if clear_of_path(&shape, &pose) {
                statics.push(StaticObject { shape, pose });
                break;
            }
        }
    }

    let k = config.intrinsics();
    let mut bodies = Vec::with_capacity(config.n_bodies);
    for _ in 0..config.n_bodies {
        let z = uniform(&mut rng, 3.5, 8.0);
        let c0 = Vector3::new(z * uniform(&mut rng, -0.6, 0.6), z * uniform(&mut rng, -0.4, 0.4), z);
        let half = Vector3::new(
            uniform(&mut rng, 0.3, 0.8),
            uniform(&mut rng, 0.3, 0.8),
            uniform(&mut rng, 0.3, 0.8),
        );
        let q0 = Rotation::from_axis_angle(&(random_axis(&mut rng) * uniform(&mut rng, 0.0, std::f64::consts::PI)));
        // lateral motion keeps the body's image displacement large
        let view = c0.normalize();
        let a = random_axis(&mut rng);
        let lateral = (a - view * a.dot(&view)).try_normalize(1e-9).unwrap_or_else(Vector3::x);
        let v = lateral * m.body_translation * uniform(&mut rng, 0.75, 1.25);
        let spin = Rotation::from_axis_angle(
            &(random_axis(&mut rng) * m.body_rotation_deg.to_radians() * uniform(&mut rng, 0.5, 1.0)),
        );
        let mut poses = Vec::with_capacity(config.frames);
        let (mut c, mut q) = (c0, q0);
        for _ in 0..config.frames {
            poses.push(Motion::new(q, c));
            c += v;
            q = spin.compose(&q);
        }
        bodies.push(RigidBody {
            shape: Cuboid { half_extents: half },
            poses,
        });
    }

    let mut scene = Scene {
        seed,
        config: *config,
        k,
        room_min,
        room_max,
        statics,
        bodies,
        trajectory,
    };
    calibrate_body_scale(&mut scene);
    Ok(scene)
}

/// Bisects a common scale of all bodies so the frame-0 moving fraction
/// meets the target. Coverage only grows with scale, and the scale is capped
/// so that no body ever swallows a camera.
fn calibrate_body_scale(scene: &mut Scene) {
    if scene.bodies.is_empty() {
        return;
    }
    let base: Vec<Vector3<f64>> = scene.bodies.iter().map(|b| b.shape.half_extents).collect();
    let mut s_max = f64::INFINITY;
    for (b, h) in scene.bodies.iter().zip(&base) {
        for (pose, cam) in b.poses.iter().zip(&scene.trajectory) {
            let l = pose.inverse().transform_point(&cam.translation);
            let fit = (0..3)
                .map(|i| (l[i].abs() - CAMERA_CLEARANCE) / h[i])
                .fold(f64::NEG_INFINITY, f64::max);
            s_max = s_max.min(fit);
        }
    }
    let s_max = s_max.max(0.0);
    let cfg = scene.config;
    let factor = if cfg.width.is_multiple_of(4) && cfg.height.is_multiple_of(4) && cfg.width >= 64 { 4 } else { 1 };
    let probe = scene.k.for_grid(cfg.width / factor, cfg.height / factor);
    let set_scale = |scene: &mut Scene, s: f64| {
        for (b, h) in scene.bodies.iter_mut().zip(&base) {
            b.shape.half_extents = h * s;
        }
    };
    let target = cfg.dynamic_fraction_target;
    let (mut lo, mut hi) = (0.0, s_max);
    set_scale(scene, hi);
    if scene.moving_fraction(&probe, 0, Execution::default()) > target {
        for _ in 0..30 {
            let mid = 0.5 * (lo + hi);
            set_scale(scene, mid);
            if scene.moving_fraction(&probe, 0, Execution::default()) < target {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let f_lo = {
            set_scale(scene, lo);
            scene.moving_fraction(&probe, 0, Execution::default())
        };
        let f_hi = {
            set_scale(scene, hi);
            scene.moving_fraction(&probe, 0, Execution::default())
        };
        let pick = if (target - f_lo).abs() <= (f_hi - target).abs() { lo } else { hi };
        set_scale(scene, pick);
    }
}

/// Ground truth for frames `t` and `t + 1`.
pub fn render_pair(scene: &Scene, t: usize) -> Result<FramePairTruth> {
    render_pair_with(scene, t, Execution::default())
}

/// Flow is valid where the surface point seen at `t` stays in view at
/// `t + 1`, is the nearest surface there, and lands on a pixel neighborhood
/// lying entirely on the same face (so depth interpolation is exact).
pub fn render_pair_with(scene: &Scene, t: usize, exec: Execution) -> Result<FramePairTruth> {
    if t + 1 >= scene.frames() {
        return Err(Error::FrameOutOfRange {
            index: t,
            len: scene.frames(),
        });
    }
    let k = &scene.k;
    let (w, h) = (k.width, k.height);
    let hits_t = scene.render_frame(k, t, exec);
    let hits_t1 = scene.render_frame(k, t + 1, exec);
    let cam_t1_inv = scene.trajectory[t + 1].inverse();

    let mut cells: Vec<Option<[f64; 2]>> = vec![None; w * h];
    par::for_each_row(exec, &mut cells, w, |y, row| {
        for (x, cell) in row.iter_mut().enumerate() {
            let Some(hit) = *hits_t.get(x, y) else { continue };
            let p = Vector2::new(x as f64, y as f64);
            let (o, d) = scene.camera_ray(k, t, &p);
            let world = o + d * hit.depth;
            let moved = match scene.object_pose(hit.surface.object, t) {
                Some(pose_t) => {
                    let local = pose_t.inverse().transform_point(&world);
                    scene
                        .object_pose(hit.surface.object, t + 1)
                        .expect("same object")
                        .transform_point(&local)
                }
                None => world,
            };
            let c = cam_t1_inv.transform_point(&moved);
            if c.z <= RAY_EPS {
                continue;
            }
            let q = k.project_unchecked(&c);
            let (o1, d1) = scene.camera_ray(k, t + 1, &q);
            let Some(seen) = scene.cast(t + 1, &o1, &d1) else { continue };
            if seen.surface != hit.surface || (seen.depth - c.z).abs() > 1e-7 * c.z {
                continue;
            }
            if !neighborhood_on_surface(&hits_t1, &q, hit.surface) {
                continue;
            }
            *cell = Some([q.x - p.x, q.y - p.y]);
        }
    });

    let mut flow = FlowField::new(w, h);
    for (i, c) in cells.iter().enumerate() {
        if let Some(uv) = c {
            flow.set(i % w, i / w, *uv);
        }
    }
    let depth_of = |hits: &Grid<Option<Hit>>| DepthMap::from_grid(hits.map(|h| h.map_or(0.0, |h| h.depth)));
    let gt_mask = SegMask::from_grid(hits_t.map(|h| {
        h.and_then(|h| scene.body_index(h.surface.object))
            .is_some_and(|b| scene.bodies[b].moves(t))
    }));
    Ok(FramePairTruth {
        flow,
        depth_t: depth_of(&hits_t),
        depth_t1: depth_of(&hits_t1),
        gt_mask,
        gt_motion: compose(&scene.trajectory[t].inverse(), &scene.trajectory[t + 1])?,
    })
}

fn neighborhood_on_surface(hits: &Grid<Option<Hit>>, q: &Vector2<f64>, s: SurfaceId) -> bool {
    let (w, h) = hits.dims();
    bilinear_taps(q, w, h).is_some_and(|taps| {
        taps.into_iter()
            .flatten()
            .all(|(x, y, _)| hits.get(x, y).is_some_and(|hh| hh.surface == s))
    })
}

/// Labels a pixel dynamic when its 3D point, carried by the camera motion
/// alone, misses the point observed at the flow target by more than `tau`.
///
/// Pixels with invalid flow or depth, or whose target depth cannot be
/// interpolated, are left static.
pub fn recover_motion_mask(
    depth_t: &DepthMap,
    depth_t1: &DepthMap,
    flow: &FlowField,
    cam_motion: &Motion,
    k: &CameraIntrinsics,
    tau: f64,
) -> Result<SegMask> {
    if cam_motion.up_to_scale {
        return Err(Error::UpToScaleComposition);
    }
    let dims = flow.dims();
    depth_t.grid().ensure_dims(dims)?;
    depth_t1.grid().ensure_dims(dims)?;
    if dims != (k.width, k.height) {
        return Err(Error::DimensionMismatch {
            expected: (k.width, k.height),
            found: dims,
        });
    }
    let point = cam_motion.inverse();
    let mask = Grid::from_fn(dims.0, dims.1, |x, y| {
        let (Some(f), Some(z)) = (flow.get(x, y), depth_t.get(x, y)) else {
            return false;
        };
        let p = Vector2::new(x as f64, y as f64);
        let q = p + f;
        let Some(z1) = depth_t1.bilinear(&q, f64::INFINITY) else {
            return false;
        };
        let predicted = point.transform_point(&k.unproject(&p, z));
        (predicted - k.unproject(&q, z1)).norm() > tau
    });
    Ok(SegMask::from_grid(mask))
}

/// Adds independent `N(0, sigma^2)` noise to both channels of every valid pixel.
pub fn add_flow_noise(flow: &FlowField, sigma: f64, seed: u64) -> Result<FlowField> {
    if !(sigma.is_finite() && sigma >= 0.0) {
        return Err(Error::InvalidConfig(format!("noise sigma must be non-negative, got {sigma}")));
    }
    let mut out = flow.clone();
    if sigma == 0.0 {
        return Ok(out);
    }
    let normal = Normal::new(0.0, sigma).map_err(|e| Error::InvalidConfig(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (w, h) = flow.dims();
    for y in 0..h {
        for x in 0..w {
            if let Some(f) = flow.get(x, y) {
                let du = normal.sample(&mut rng);
                let dv = normal.sample(&mut rng);
                out.set(x, y, [f.x + du, f.y + dv]);
            }
        }
    }
    Ok(out)
}

/// Depth quantization of exported 16-bit PGM files, scene units per count.
pub const DEPTH_PGM_UNIT: f64 = 1e-3;

/// Writes `flow.flo`, `depth_t.pgm` (16-bit), `depth_t1.pgm` and `mask.pgm`
/// (8-bit, 255 = dynamic) into `dir`.
pub fn export_truth(dir: impl AsRef<Path>, truth: &FramePairTruth) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    write_flo(dir.join("flow.flo"), &truth.flow)?;
    for (name, d) in [("depth_t.pgm", &truth.depth_t), ("depth_t1.pgm", &truth.depth_t1)] {
        let (w, h) = d.dims();
        let counts: Vec<u16> = d
            .grid()
            .as_slice()
            .iter()
            .map(|z| (z / DEPTH_PGM_UNIT).round().clamp(0.0, u16::MAX as f64) as u16)
            .collect();
        pgm::write_pgm16(dir.join(name), w, h, &counts)?;
    }
    let (w, h) = truth.gt_mask.dims();
    pgm::write_pgm8(dir.join("mask.pgm"), w, h, &truth.gt_mask.to_u8())?;
    Ok(())
}

/// Reads a depth map written by [`export_truth`]; zero samples are invalid.
pub fn read_depth_pgm(path: impl AsRef<Path>) -> Result<DepthMap> {
    let (w, h, counts) = pgm::read_pgm(path)?;
    let grid = Grid::from_vec(w, h, counts.iter().map(|&c| c as f64 * DEPTH_PGM_UNIT).collect())?;
    Ok(DepthMap::from_grid(grid))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::epipolar::{essential_from_motion, sampson_distance};

    fn small(n_bodies: usize, target: f64) -> SceneConfig {
        SceneConfig {
            width: 160,
            height: 120,
            focal: 80.0,
            n_bodies,
            dynamic_fraction_target: target,
            frames: 3,
            ..Default::default()
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate_scene(5, &small(3, 0.3)).unwrap();
        let b = generate_scene(5, &small(3, 0.3)).unwrap();
        assert_eq!(a, b);
        assert_eq!(render_pair(&a, 0).unwrap(), render_pair(&b, 0).unwrap());
        assert_ne!(a, generate_scene(6, &small(3, 0.3)).unwrap());
    }

    #[test]
    fn invalid_configs() {
        for cfg in [
            SceneConfig { frames: 1, ..small(1, 0.3) },
            SceneConfig { dynamic_fraction_target: 1.5, ..small(1, 0.3) },
            SceneConfig { focal: 0.0, ..small(1, 0.3) },
            SceneConfig { frames: 200, ..small(1, 0.3) },
        ] {
            assert!(matches!(generate_scene(1, &cfg), Err(Error::InvalidConfig(_))), "{cfg:?}");
        }
    }

    #[test]
    fn frame_out_of_range() {
        let s = generate_scene(1, &small(1, 0.3)).unwrap();
        assert!(matches!(render_pair(&s, 2), Err(Error::FrameOutOfRange { index: 2, len: 3 })));
    }

    #[test]
    fn no_bodies_means_empty_masks() {
        let s = generate_scene(2, &small(0, 0.3)).unwrap();
        for t in 0..2 {
            assert_eq!(render_pair(&s, t).unwrap().gt_mask.count(), 0);
        }
    }

    #[test]
    fn still_camera_on_static_scene_gives_zero_flow() {
        let mut cfg = small(0, 0.0);
        cfg.motion.camera_translation = 0.0;
        cfg.motion.camera_rotation_deg = 0.0;
        let s = generate_scene(3, &cfg).unwrap();
        let truth = render_pair(&s, 0).unwrap();
        assert_eq!(truth.flow.valid_count(), 160 * 120);
        for y in 0..120 {
            for x in 0..160 {
                assert!(truth.flow.get(x, y).unwrap().norm() < 1e-9);
            }
        }
    }

    #[test]
    fn lateral_camera_translation_flow_sign() {
        let mut s = generate_scene(4, &small(0, 0.0)).unwrap();
        s.trajectory[1] = Motion::new(Rotation::identity(), Vector3::new(0.2, 0.0, 0.0));
        let truth = render_pair(&s, 0).unwrap();
        let mut n = 0;
        for y in 0..120 {
            for x in 0..160 {
                if let Some(f) = truth.flow.get(x, y) {
                    // per-point oracle: u' - u = -fx * tx / z for a pure x translation
                    let z = truth.depth_t.get(x, y).unwrap();
                    assert!((f.x - (-80.0 * 0.2 / z)).abs() < 1e-9);
                    assert!(f.x < 0.0 && f.y.abs() < 1e-9);
                    n += 1;
                }
            }
        }
        assert!(n > 10_000);
    }

    #[test]
    fn static_flow_satisfies_epipolar_constraint() {
        let s = generate_scene(7, &small(3, 0.3)).unwrap();
        let truth = render_pair(&s, 0).unwrap();
        let e = essential_from_motion(&truth.gt_motion);
        let mut n = 0;
        for y in 0..120 {
            for x in 0..160 {
                if truth.gt_mask.get(x, y) {
                    continue;
                }
                if let Some(f) = truth.flow.get(x, y) {
                    let p = Vector2::new(x as f64, y as f64);
                    let d = sampson_distance(&e, &s.k.normalize(&p), &s.k.normalize(&(p + f)));
                    assert!(d < 1e-9, "{d}");
                    n += 1;
                }
            }
        }
        assert!(n > 5_000);
    }

    /// Independent intersection oracle: each face as a rectangle in world
    /// space, every hit collected, then sorted by depth.
    fn brute_force_nearest(s: &Scene, frame: usize, o: &Vector3<f64>, d: &Vector3<f64>) -> f64 {
        let mut boxes: Vec<(Vector3<f64>, Motion, bool)> = vec![(
            (s.room_max - s.room_min) / 2.0,
            Motion::new(Rotation::identity(), (s.room_max + s.room_min) / 2.0),
            true,
        )];
        boxes.extend(s.statics.iter().map(|o| (o.shape.half_extents, o.pose, false)));
        boxes.extend(s.bodies.iter().map(|b| (b.shape.half_extents, b.poses[frame], false)));
        let mut depths = Vec::new();
        for (half, pose, _) in &boxes {
            let r = pose.rotation.to_matrix();
            for axis in 0..3 {
                for sign in [-1.0, 1.0] {
                    let n: Vector3<f64> = r.column(axis).into_owned() * sign;
                    let c = pose.translation + n * half[axis];
                    let denom = n.dot(d);
                    if denom.abs() < 1e-15 {
                        continue;
                    }
                    let t = n.dot(&(c - o)) / denom;
                    if t <= 1e-9 {
                        continue;
                    }
                    let local = pose.inverse().transform_point(&(o + d * t));
                    let inside = (0..3).all(|i| i == axis || local[i].abs() <= half[i] + 1e-9);
                    if inside {
                        depths.push(t);
                    }
                }
            }
        }
        depths.sort_by(f64::total_cmp);
        depths[0]
    }

    #[test]
    fn z_buffer_matches_brute_force_depth_sort() {
        let mut cfg = small(4, 0.5);
        cfg.width = 40;
        cfg.height = 30;
        cfg.focal = 20.0;
        let s = generate_scene(8, &cfg).unwrap();
        for frame in 0..2 {
            let hits = s.render_frame(&s.k, frame, Execution::Sequential);
            for y in 0..30 {
                for x in 0..40 {
                    let (o, d) = s.camera_ray(&s.k, frame, &Vector2::new(x as f64, y as f64));
                    let want = brute_force_nearest(&s, frame, &o, &d);
                    let got = hits.get(x, y).unwrap().depth;
                    assert!((got - want).abs() < 1e-9 * want, "({x},{y}) {got} vs {want}");
                }
            }
        }
    }

    #[test]
    fn recovery_reproduces_ground_truth_mask() {
        for seed in 0..4 {
            let s = generate_scene(seed, &small(3, 0.3)).unwrap();
            let truth = render_pair(&s, 0).unwrap();
            let rec = recover_motion_mask(&truth.depth_t, &truth.depth_t1, &truth.flow, &truth.gt_motion, &s.k, DEFAULT_TAU)
                .unwrap();
            let valid = truth.flow.validity();
            for y in 0..120 {
                for x in 0..160 {
                    if *valid.get(x, y) {
                        assert_eq!(rec.get(x, y), truth.gt_mask.get(x, y), "seed {seed} ({x},{y})");
                    }
                }
            }
            let all_static = recover_motion_mask(
                &truth.depth_t,
                &truth.depth_t1,
                &truth.flow,
                &truth.gt_motion,
                &s.k,
                f64::INFINITY,
            )
            .unwrap();
            assert_eq!(all_static.count(), 0);
        }
    }

    #[test]
    fn recovery_rejects_up_to_scale_motion() {
        let s = generate_scene(1, &small(1, 0.3)).unwrap();
        let truth = render_pair(&s, 0).unwrap();
        let m = Motion::new_up_to_scale(truth.gt_motion.rotation, truth.gt_motion.translation);
        assert!(recover_motion_mask(&truth.depth_t, &truth.depth_t1, &truth.flow, &m, &s.k, 0.05).is_err());
    }

    #[test]
    fn flow_noise_statistics() {
        let flow = FlowField::from_fn(400, 250, |_, _| [1.0, -2.0]);
        assert_eq!(add_flow_noise(&flow, 0.0, 1).unwrap(), flow);
        let a = add_flow_noise(&flow, 1.0, 9).unwrap();
        assert_eq!(a, add_flow_noise(&flow, 1.0, 9).unwrap());
        for (c, base) in [(0usize, 1.0), (1, -2.0)] {
            let v: Vec<f64> = a.vectors().as_slice().iter().map(|uv| uv[c] - base).collect();
            let mean = v.iter().sum::<f64>() / v.len() as f64;
            let var = v.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / v.len() as f64;
            assert!((0.9..=1.1).contains(&var.sqrt()));
            assert!(mean.abs() < 0.02);
        }
        let mut partial = flow.clone();
        partial.invalidate(0, 0);
        let b = add_flow_noise(&partial, 1.0, 9).unwrap();
        assert_eq!(b.raw(0, 0), partial.raw(0, 0));
        assert!(!b.is_valid(0, 0));
    }

    #[test]
    fn parallel_and_sequential_rendering_agree() {
        let s = generate_scene(11, &small(2, 0.3)).unwrap();
        assert_eq!(
            render_pair_with(&s, 1, Execution::Sequential).unwrap(),
            render_pair_with(&s, 1, Execution::Parallel).unwrap()
        );
    }

    #[test]
    fn export_writes_all_files() {
        let s = generate_scene(1, &small(1, 0.3)).unwrap();
        let truth = render_pair(&s, 0).unwrap();
        let dir = tempfile::tempdir().unwrap();
        export_truth(dir.path(), &truth).unwrap();
        let back = crate::flow::read_flo(dir.path().join("flow.flo")).unwrap();
        assert_eq!(back.valid_count(), truth.flow.valid_count());
        let (w, h, mask) = pgm::read_pgm(dir.path().join("mask.pgm")).unwrap();
        assert_eq!((w, h), (160, 120));
        assert_eq!(mask.iter().filter(|&&v| v > 0).count(), truth.gt_mask.count());
        let depth = read_depth_pgm(dir.path().join("depth_t.pgm")).unwrap();
        for (a, b) in depth.grid().as_slice().iter().zip(truth.depth_t.grid().as_slice()) {
            assert!((a - b).abs() <= 0.5 * DEPTH_PGM_UNIT + 1e-12);
        }
    }
}
