//! Levenberg-Marquardt on the Sampson residuals of a fixed inlier set.
//!
//! Rotation is updated on the left by `exp([w]x)`, translation moves on the
//! unit sphere along two tangent directions, giving five parameters.

use nalgebra::{Matrix3, SMatrix, SVector, Vector2, Vector3};

use super::Correspondences;
use crate::epipolar::essential_from_point_transform;
use crate::geometry::{skew, Rotation};

type Mat5 = SMatrix<f64, 5, 5>;
type Vec5 = SVector<f64, 5>;

/// Signed Sampson residual and its derivatives along the five parameter
/// directions, where `de[k]` is the derivative of `e` along direction `k`.
fn residual_and_jacobian(
    e: &Matrix3<f64>,
    de: &[Matrix3<f64>; 5],
    x1: &Vector2<f64>,
    x2: &Vector2<f64>,
) -> Option<(f64, Vec5)> {
    let a = Vector3::new(x1.x, x1.y, 1.0);
    let b = Vector3::new(x2.x, x2.y, 1.0);
    let ea = e * a;
    let etb = e.tr_mul(&b);
    let num = b.dot(&ea);
    let den = ea.x * ea.x + ea.y * ea.y + etb.x * etb.x + etb.y * etb.y;
    if den <= 1e-300 {
        return None;
    }
    let s = den.sqrt();
    let c = num / (den * s);
    let j = Vec5::from_fn(|k, _| {
        let da = de[k] * a;
        let dtb = de[k].tr_mul(&b);
        let dden = ea.x * da.x + ea.y * da.y + etb.x * dtb.x + etb.y * dtb.y;
        b.dot(&da) / s - c * dden
    });
    Some((num / s, j))
}

fn tangent_basis(t: &Vector3<f64>) -> (Vector3<f64>, Vector3<f64>) {
    let helper = if t.x.abs() < 0.9 { Vector3::x() } else { Vector3::y() };
    let b1 = t.cross(&helper).normalize();
    let b2 = t.cross(&b1);
    (b1, b2)
}

/// Derivatives of `[t]x R` along the left rotation update and the two
/// tangent directions of `t`.
fn directions(r: &Matrix3<f64>, t: &Vector3<f64>) -> [Matrix3<f64>; 5] {
    let tx = skew(t);
    let (b1, b2) = tangent_basis(t);
    [
        tx * skew(&Vector3::x()) * r,
        tx * skew(&Vector3::y()) * r,
        tx * skew(&Vector3::z()) * r,
        skew(&b1) * r,
        skew(&b2) * r,
    ]
}

fn cost(r: &Matrix3<f64>, t: &Vector3<f64>, corr: &Correspondences, idx: &[usize]) -> f64 {
    let e = essential_from_point_transform(r, t);
    idx.iter()
        .map(|&i| {
            let d = crate::epipolar::sampson_signed(&e, &corr.x1[i], &corr.x2[i]);
            d * d
        })
        .sum()
}

pub(super) fn refine(
    r: &Matrix3<f64>,
    t: &Vector3<f64>,
    corr: &Correspondences,
    idx: &[usize],
    iters: usize,
) -> (Matrix3<f64>, Vector3<f64>) {
    let mut r = *r;
    let mut t = t.normalize();
    let mut lambda = 1e-3;
    let mut current = cost(&r, &t, corr, idx);
    for _ in 0..iters {
        if current <= 1e-30 {
            break;
        }
        let e = essential_from_point_transform(&r, &t);
        let (b1, b2) = tangent_basis(&t);
        let de = directions(&r, &t);
        let mut jtj = Mat5::zeros();
        let mut jtr = Vec5::zeros();
        for &i in idx {
            let Some((res, j)) = residual_and_jacobian(&e, &de, &corr.x1[i], &corr.x2[i]) else {
                continue;
            };
            jtj += j * j.transpose();
            jtr += j * res;
        }
        let mut improved = false;
        let mut stalled = false;
        for _ in 0..8 {
            let mut a = jtj;
            for k in 0..5 {
                a[(k, k)] += lambda * jtj[(k, k)].max(1e-12);
            }
            let Some(step) = a.cholesky().map(|c| c.solve(&(-jtr))) else {
                lambda *= 10.0;
                continue;
            };
            let w = Vector3::new(step[0], step[1], step[2]);
            let r_new = Rotation::from_axis_angle(&w).to_matrix() * r;
            let t_new = (t + b1 * step[3] + b2 * step[4]).normalize();
            let c_new = cost(&r_new, &t_new, corr, idx);
            if c_new < current {
                r = Rotation::from_matrix(&r_new).to_matrix();
                t = t_new;
                stalled = current - c_new <= 1e-10 * current;
                current = c_new;
                lambda = (lambda * 0.1).max(1e-12);
                improved = true;
                break;
            }
            lambda *= 10.0;
        }
        if !improved || stalled {
            break;
        }
    }
    (r, t)
}
