//! Trajectories, Umeyama alignment, absolute trajectory error and the TUM /
//! KITTI text formats.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use nalgebra::{Matrix3, Matrix4, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Motion, Rotation};

/// Timestamped world-from-camera poses with one flag per pose.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    timestamps: Vec<f64>,
    poses: Vec<Motion>,
    flags: Vec<bool>,
}

impl Trajectory {
    pub fn new(timestamps: Vec<f64>, poses: Vec<Motion>) -> Result<Self> {
        let flags = vec![false; poses.len()];
        Self::with_flags(timestamps, poses, flags)
    }

    pub fn with_flags(timestamps: Vec<f64>, poses: Vec<Motion>, flags: Vec<bool>) -> Result<Self> {
        if poses.is_empty() {
            return Err(Error::EmptyTrajectory);
        }
        if timestamps.len() != poses.len() || flags.len() != poses.len() {
            return Err(Error::LengthMismatch {
                est: timestamps.len(),
                gt: poses.len(),
            });
        }
        if let Some(i) = timestamps.windows(2).position(|w| w[1].partial_cmp(&w[0]) != Some(std::cmp::Ordering::Greater)) {
            return Err(Error::InvalidConfig(format!(
                "timestamps must increase strictly, but {} follows {} at pose {}",
                timestamps[i + 1],
                timestamps[i],
                i + 1
            )));
        }
        if let Some(i) = poses.iter().position(|p| p.up_to_scale || !p.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "pose {i} must be finite and metric"
            )));
        }
        Ok(Self { timestamps, poses, flags })
    }

    /// Poses stamped `0, 1, 2, ...`.
    pub fn from_poses(poses: Vec<Motion>) -> Result<Self> {
        let t = (0..poses.len()).map(|i| i as f64).collect();
        Self::new(t, poses)
    }

    pub fn len(&self) -> usize {
        self.poses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.poses.is_empty()
    }

    pub fn timestamps(&self) -> &[f64] {
        &self.timestamps
    }

    pub fn poses(&self) -> &[Motion] {
        &self.poses
    }

    pub fn flags(&self) -> &[bool] {
        &self.flags
    }

    pub fn positions(&self) -> Vec<Vector3<f64>> {
        self.poses.iter().map(|p| p.translation).collect()
    }

    /// Applies `x -> s R x + t` to every pose (positions scale, rotations rotate).
    pub fn transformed(&self, sim: &Similarity) -> Self {
        let poses = self
            .poses
            .iter()
            .map(|p| Motion::new(sim.rotation.compose(&p.rotation), sim.apply(&p.translation)))
            .collect();
        Self {
            timestamps: self.timestamps.clone(),
            poses,
            flags: self.flags.clone(),
        }
    }
}

/// `x -> scale * R x + translation`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Similarity {
    pub scale: f64,
    pub rotation: Rotation,
    pub translation: Vector3<f64>,
}

impl Similarity {
    pub fn identity() -> Self {
        Self {
            scale: 1.0,
            rotation: Rotation::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn apply(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation.rotate(p) * self.scale + self.translation
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Alignment {
    /// Compare positions as they are.
    None,
    /// Rotation and translation.
    Rigid,
    /// Rotation, translation and scale.
    #[default]
    Similarity,
}

impl FromStr for Alignment {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Self::None),
            "rigid" | "se3" => Ok(Self::Rigid),
            "similarity" | "sim3" => Ok(Self::Similarity),
            _ => Err(Error::InvalidConfig(format!("unknown alignment {s:?}"))),
        }
    }
}

const SPREAD_RTOL: f64 = 1e-10;

/// Least-squares transform taking `est` positions onto `gt` positions.
pub fn umeyama_align(est: &Trajectory, gt: &Trajectory, with_scale: bool) -> Result<Similarity> {
    if est.len() != gt.len() {
        return Err(Error::LengthMismatch {
            est: est.len(),
            gt: gt.len(),
        });
    }
    let n = est.len();
    if n < 3 {
        return Err(Error::DegenerateSpread);
    }
    let e = est.positions();
    let g = gt.positions();
    let mu_e = e.iter().sum::<Vector3<f64>>() / n as f64;
    let mu_g = g.iter().sum::<Vector3<f64>>() / n as f64;
    let mut cov = Matrix3::zeros();
    let mut var_e = 0.0;
    for (a, b) in e.iter().zip(&g) {
        let (da, db) = (a - mu_e, b - mu_g);
        cov += db * da.transpose();
        var_e += da.norm_squared();
    }
    cov /= n as f64;
    var_e /= n as f64;
    let svd = cov.svd(true, true);
    let d = svd.singular_values;
    let mut order = [0usize, 1, 2];
    order.sort_by(|&i, &j| d[j].total_cmp(&d[i]));
    if var_e <= 0.0 || d[order[1]] <= SPREAD_RTOL * d[order[0]].max(f64::MIN_POSITIVE) {
        return Err(Error::DegenerateSpread);
    }
    let u = svd.u.ok_or(Error::DegenerateSpread)?;
    let v_t = svd.v_t.ok_or(Error::DegenerateSpread)?;
    let mut s = Matrix3::identity();
    if u.determinant() * v_t.determinant() < 0.0 {
        // flip the weakest direction
        s[(order[2], order[2])] = -1.0;
    }
    let r = u * s * v_t;
    let scale = if with_scale {
        (Matrix3::from_diagonal(&d) * s).trace() / var_e
    } else {
        1.0
    };
    let rotation = Rotation::from_matrix(&r);
    let translation = mu_g - rotation.rotate(&mu_e) * scale;
    Ok(Similarity {
        scale,
        rotation,
        translation,
    })
}

/// RMSE of position residuals after the requested alignment.
pub fn ate_rmse(est: &Trajectory, gt: &Trajectory, alignment: Alignment) -> Result<f64> {
    let sim = match alignment {
        Alignment::None => {
            if est.len() != gt.len() {
                return Err(Error::LengthMismatch {
                    est: est.len(),
                    gt: gt.len(),
                });
            }
            Similarity::identity()
        }
        Alignment::Rigid => umeyama_align(est, gt, false)?,
        Alignment::Similarity => umeyama_align(est, gt, true)?,
    };
    let sq: f64 = est
        .poses
        .iter()
        .zip(&gt.poses)
        .map(|(a, b)| (sim.apply(&a.translation) - b.translation).norm_squared())
        .sum();
    Ok((sq / est.len() as f64).sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrajectoryFormat {
    /// `timestamp tx ty tz qx qy qz qw`
    Tum,
    /// Twelve numbers per line, the row-major top 3x4 of the pose matrix.
    Kitti,
}

impl FromStr for TrajectoryFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "tum" => Ok(Self::Tum),
            "kitti" => Ok(Self::Kitti),
            _ => Err(Error::InvalidConfig(format!("unknown trajectory format {s:?}"))),
        }
    }
}

pub fn format_trajectory(traj: &Trajectory, format: TrajectoryFormat) -> String {
    let mut out = String::new();
    for (t, p) in traj.timestamps.iter().zip(&traj.poses) {
        match format {
            TrajectoryFormat::Tum => {
                let [w, x, y, z] = p.rotation.wxyz();
                let v = p.translation;
                writeln!(out, "{t} {} {} {} {x} {y} {z} {w}", v.x, v.y, v.z).expect("string write");
            }
            TrajectoryFormat::Kitti => {
                let m = p.to_matrix4();
                let fields: Vec<String> = (0..3)
                    .flat_map(|r| (0..4).map(move |c| (r, c)))
                    .map(|(r, c)| m[(r, c)].to_string())
                    .collect();
                writeln!(out, "{}", fields.join(" ")).expect("string write");
            }
        }
    }
    out
}

/// Parses a trajectory. Blank lines and lines starting with `#` are skipped;
/// KITTI poses are stamped with their pose index.
pub fn parse_trajectory(text: &str, format: TrajectoryFormat) -> Result<Trajectory> {
    let expected = match format {
        TrajectoryFormat::Tum => 8,
        TrajectoryFormat::Kitti => 12,
    };
    let mut timestamps = Vec::new();
    let mut poses = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let s = raw.trim();
        if s.is_empty() || s.starts_with('#') {
            continue;
        }
        let vals = s
            .split_whitespace()
            .map(|f| {
                f.parse::<f64>().map_err(|_| Error::Parse {
                    line,
                    message: format!("not a number: {f:?}"),
                })
            })
            .collect::<Result<Vec<f64>>>()?;
        if vals.len() != expected {
            return Err(Error::Parse {
                line,
                message: format!("expected {expected} fields, found {}", vals.len()),
            });
        }
        if let Some(v) = vals.iter().find(|v| !v.is_finite()) {
            return Err(Error::Parse {
                line,
                message: format!("non-finite value {v}"),
            });
        }
        let pose = match format {
            TrajectoryFormat::Tum => {
                let q = nalgebra::Quaternion::new(vals[7], vals[4], vals[5], vals[6]);
                if q.norm() < 1e-12 {
                    return Err(Error::Parse {
                        line,
                        message: "zero quaternion".into(),
                    });
                }
                timestamps.push(vals[0]);
                Motion::new(
                    Rotation::from_unit_quaternion(nalgebra::UnitQuaternion::from_quaternion(q)),
                    Vector3::new(vals[1], vals[2], vals[3]),
                )
            }
            TrajectoryFormat::Kitti => {
                let mut m = Matrix4::identity();
                for (k, v) in vals.iter().enumerate() {
                    m[(k / 4, k % 4)] = *v;
                }
                timestamps.push(poses.len() as f64);
                Motion::from_matrix4(&m)
            }
        };
        if let Some(&prev) = timestamps.iter().rev().nth(1) {
            if timestamps[timestamps.len() - 1].partial_cmp(&prev) != Some(std::cmp::Ordering::Greater) {
                return Err(Error::Parse {
                    line,
                    message: "timestamps must increase strictly".into(),
                });
            }
        }
        poses.push(pose);
    }
    if poses.is_empty() {
        return Err(Error::EmptyTrajectory);
    }
    Trajectory::new(timestamps, poses)
}

pub fn write_trajectory(path: impl AsRef<Path>, traj: &Trajectory, format: TrajectoryFormat) -> Result<()> {
    std::fs::write(path, format_trajectory(traj, format))?;
    Ok(())
}

pub fn read_trajectory(path: impl AsRef<Path>, format: TrajectoryFormat) -> Result<Trajectory> {
    parse_trajectory(&std::fs::read_to_string(path)?, format)
}
