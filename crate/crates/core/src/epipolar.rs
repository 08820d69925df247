//! Two-view relations in normalized image coordinates.
//!
//! Everything here works with the point transform `x2 = R x1 + t` that maps
//! camera-1 coordinates into camera-2 coordinates, for which the essential
//! matrix is `E = [t]x R` and `x2^T E x1 = 0`.

use nalgebra::{Matrix3, Matrix4, SymmetricEigen, Vector2, Vector3};

use crate::geometry::{skew, Motion, Rotation};

#[inline]
fn homog(p: &Vector2<f64>) -> Vector3<f64> {
    Vector3::new(p.x, p.y, 1.0)
}

pub fn essential_from_point_transform(r: &Matrix3<f64>, t: &Vector3<f64>) -> Matrix3<f64> {
    skew(t) * r
}

/// Essential matrix for a camera motion (pose of camera 2 in camera 1).
pub fn essential_from_motion(m: &Motion) -> Matrix3<f64> {
    let p = m.inverse();
    essential_from_point_transform(&p.rotation.to_matrix(), &p.translation)
}

/// First-order geometric distance of `(x1, x2)` to the epipolar constraint.
#[inline]
pub fn sampson_distance(e: &Matrix3<f64>, x1: &Vector2<f64>, x2: &Vector2<f64>) -> f64 {
    sampson_signed(e, x1, x2).abs()
}

/// Signed Sampson residual; its square is the Sampson error.
#[inline]
pub fn sampson_signed(e: &Matrix3<f64>, x1: &Vector2<f64>, x2: &Vector2<f64>) -> f64 {
    let a = homog(x1);
    let b = homog(x2);
    let ea = e * a;
    let etb = e.transpose() * b;
    let num = b.dot(&ea);
    let den = ea.x * ea.x + ea.y * ea.y + etb.x * etb.x + etb.y * etb.y;
    if den <= f64::MIN_POSITIVE {
        if num == 0.0 {
            0.0
        } else {
            f64::INFINITY
        }
    } else {
        num / den.sqrt()
    }
}

/// Linear eight-point solve followed by projection onto the essential manifold.
///
/// Takes at least eight correspondences; returns `None` for degenerate input.
pub fn eight_point(x1: &[Vector2<f64>], x2: &[Vector2<f64>]) -> Option<Matrix3<f64>> {
    if x1.len() < 8 || x1.len() != x2.len() {
        return None;
    }
    let rows: Vec<[f64; 9]> = x1
        .iter()
        .zip(x2)
        .map(|(a, b)| [b.x * a.x, b.x * a.y, b.x, b.y * a.x, b.y * a.y, b.y, a.x, a.y, 1.0])
        .collect();
    let v = if rows.len() == 8 {
        null_vector_8x9(&rows)?
    } else {
        // normal equations; the null vector is the eigenvector of the
        // smallest eigenvalue
        let mut ata = nalgebra::SMatrix::<f64, 9, 9>::zeros();
        for r in &rows {
            let row = nalgebra::SVector::<f64, 9>::from_column_slice(r);
            ata += row * row.transpose();
        }
        let eig = SymmetricEigen::new(ata);
        let (imin, _) = eig
            .eigenvalues
            .iter()
            .enumerate()
            .min_by(|a, b| a.1.total_cmp(b.1))?;
        let c = eig.eigenvectors.column(imin);
        std::array::from_fn(|i| c[i])
    };
    let e = Matrix3::new(v[0], v[1], v[2], v[3], v[4], v[5], v[6], v[7], v[8]);
    let e = project_to_essential(&e)?;
    e.iter().all(|c| c.is_finite()).then_some(e)
}

/// Null vector of a rank-8 system by Gaussian elimination with full
/// pivoting. `None` when the rows are rank deficient.
fn null_vector_8x9(rows: &[[f64; 9]]) -> Option<[f64; 9]> {
    let mut a = [[0.0; 9]; 8];
    a.copy_from_slice(rows);
    let scale = a.iter().flatten().fold(0.0f64, |m, v| m.max(v.abs()));
    let mut cols: [usize; 9] = std::array::from_fn(|i| i);
    for k in 0..8 {
        let (mut pr, mut pc, mut best) = (k, k, 0.0);
        for (r, row) in a.iter().enumerate().skip(k) {
            for (c, v) in row.iter().enumerate().skip(k) {
                if v.abs() > best {
                    (pr, pc, best) = (r, c, v.abs());
                }
            }
        }
        if best <= 1e-12 * scale {
            return None;
        }
        a.swap(k, pr);
        for row in a.iter_mut() {
            row.swap(k, pc);
        }
        cols.swap(k, pc);
        let pivot = a[k];
        for row in a.iter_mut().skip(k + 1) {
            let f = row[k] / pivot[k];
            for (v, p) in row[k..].iter_mut().zip(&pivot[k..]) {
                *v -= f * p;
            }
        }
    }
    // free variable is the last permuted column
    let mut y = [0.0; 9];
    y[8] = 1.0;
    for k in (0..8).rev() {
        let s: f64 = (k + 1..9).map(|c| a[k][c] * y[c]).sum();
        y[k] = -s / a[k][k];
    }
    let norm = y.iter().map(|v| v * v).sum::<f64>().sqrt();
    let mut v = [0.0; 9];
    for (k, &c) in cols.iter().enumerate() {
        v[c] = y[k] / norm;
    }
    Some(v)
}

/// Closest essential matrix (singular values `(1, 1, 0)`) in Frobenius norm.
pub fn project_to_essential(e: &Matrix3<f64>) -> Option<Matrix3<f64>> {
    let svd = e.svd(true, true);
    let u = svd.u?;
    let v_t = svd.v_t?;
    if svd.singular_values[0] <= f64::EPSILON {
        return None;
    }
    let s = Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, 0.0));
    Some(u * s * v_t)
}

/// The four `(R, t)` point transforms consistent with `e`, with unit `t`.
pub fn decompose_essential(e: &Matrix3<f64>) -> Option<[(Matrix3<f64>, Vector3<f64>); 4]> {
    let svd = e.svd(true, true);
    let mut u = svd.u?;
    let mut v_t = svd.v_t?;
    if u.determinant() < 0.0 {
        u = -u;
    }
    if v_t.determinant() < 0.0 {
        v_t = -v_t;
    }
    let w = Matrix3::new(0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0);
    let r1 = u * w * v_t;
    let r2 = u * w.transpose() * v_t;
    let t: Vector3<f64> = u.column(2).into_owned();
    let t = t.normalize();
    Some([(r1, t), (r1, -t), (r2, t), (r2, -t)])
}

/// Linear (DLT) triangulation; returns the point in camera-1 coordinates.
pub fn triangulate(
    r: &Matrix3<f64>,
    t: &Vector3<f64>,
    x1: &Vector2<f64>,
    x2: &Vector2<f64>,
) -> Option<Vector3<f64>> {
    // P1 = [I | 0], P2 = [R | t]
    let mut a = Matrix4::zeros();
    a.set_row(0, &nalgebra::RowVector4::new(-1.0, 0.0, x1.x, 0.0));
    a.set_row(1, &nalgebra::RowVector4::new(0.0, -1.0, x1.y, 0.0));
    let p2_0 = nalgebra::RowVector4::new(r[(0, 0)], r[(0, 1)], r[(0, 2)], t.x);
    let p2_1 = nalgebra::RowVector4::new(r[(1, 0)], r[(1, 1)], r[(1, 2)], t.y);
    let p2_2 = nalgebra::RowVector4::new(r[(2, 0)], r[(2, 1)], r[(2, 2)], t.z);
    a.set_row(2, &(p2_2 * x2.x - p2_0));
    a.set_row(3, &(p2_2 * x2.y - p2_1));
    let eig = SymmetricEigen::new(a.transpose() * a);
    let (imin, _) = eig
        .eigenvalues
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(b.1))?;
    let h = eig.eigenvectors.column(imin);
    if h[3].abs() < 1e-12 {
        return None;
    }
    Some(Vector3::new(h[0] / h[3], h[1] / h[3], h[2] / h[3]))
}

/// Depths of a correspondence in both cameras, solved in closed form from
/// `d2 x2 = d1 R x1 + t`. `None` when the rays are parallel.
pub fn two_view_depths(
    r: &Matrix3<f64>,
    t: &Vector3<f64>,
    x1: &Vector2<f64>,
    x2: &Vector2<f64>,
) -> Option<(f64, f64)> {
    let b = homog(x2);
    let ra = r * homog(x1);
    let bxr = b.cross(&ra);
    let den = bxr.norm_squared();
    if den < 1e-18 {
        return None;
    }
    let d1 = -b.cross(t).dot(&bxr) / den;
    let d2 = (ra * d1 + t).z;
    Some((d1, d2))
}

/// Whether the correspondence triangulates in front of both cameras.
pub fn in_front_of_both(
    r: &Matrix3<f64>,
    t: &Vector3<f64>,
    x1: &Vector2<f64>,
    x2: &Vector2<f64>,
) -> bool {
    matches!(two_view_depths(r, t, x1, x2), Some((d1, d2)) if d1 > 0.0 && d2 > 0.0)
}

/// Camera motion (pose of camera 2 in camera 1) from a point transform.
pub fn motion_from_point_transform(r: &Matrix3<f64>, t: &Vector3<f64>) -> Motion {
    let p = Motion::new(Rotation::from_matrix(r), *t);
    let m = p.inverse();
    Motion::new_up_to_scale(m.rotation, m.translation)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    type Views = (Matrix3<f64>, Vector3<f64>, Vec<Vector2<f64>>, Vec<Vector2<f64>>);

    fn scene(seed: u64, n: usize) -> Views {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let r = Rotation::from_axis_angle(&Vector3::new(0.05, -0.1, 0.02)).to_matrix();
        let t = Vector3::new(0.3, -0.1, 0.9).normalize();
        let mut x1 = Vec::new();
        let mut x2 = Vec::new();
        while x1.len() < n {
            let p = Vector3::new(
                rng.random_range(-3.0..3.0),
                rng.random_range(-2.0..2.0),
                rng.random_range(4.0..12.0),
            );
            let q = r * p + t;
            if q.z > 0.1 {
                x1.push(Vector2::new(p.x / p.z, p.y / p.z));
                x2.push(Vector2::new(q.x / q.z, q.y / q.z));
            }
        }
        (r, t, x1, x2)
    }

    #[test]
    fn eight_point_recovers_exact_essential() {
        for n in [8, 9, 30] {
            let (r, t, x1, x2) = scene(1, n);
            let e = eight_point(&x1, &x2).unwrap();
            for (a, b) in x1.iter().zip(&x2) {
                assert!(sampson_distance(&e, a, b) < 1e-10);
            }
            let truth = essential_from_point_transform(&r, &t);
            let sign = if (e - truth).norm() < (e + truth).norm() { 1.0 } else { -1.0 };
            assert!((e * sign - truth).norm() < 1e-8, "n = {n}");
        }
    }

    #[test]
    fn minimal_sample_with_repeated_point_is_degenerate() {
        let (_, _, mut x1, mut x2) = scene(4, 8);
        x1[7] = x1[0];
        x2[7] = x2[0];
        assert!(eight_point(&x1, &x2).is_none());
    }

    #[test]
    fn decomposition_contains_truth_and_cheirality_selects_it() {
        let (r, t, x1, x2) = scene(2, 40);
        let e = eight_point(&x1, &x2).unwrap();
        let cands = decompose_essential(&e).unwrap();
        let votes: Vec<usize> = cands
            .iter()
            .map(|(cr, ct)| {
                x1.iter()
                    .zip(&x2)
                    .filter(|(a, b)| in_front_of_both(cr, ct, a, b))
                    .count()
            })
            .collect();
        let best = votes.iter().enumerate().max_by_key(|v| v.1).unwrap().0;
        let (br, bt) = cands[best];
        assert_eq!(votes[best], 40);
        assert!((br - r).norm() < 1e-8);
        assert!((bt - t).norm() < 1e-8);
    }

    #[test]
    fn triangulation_recovers_point() {
        let r = Rotation::from_axis_angle(&Vector3::new(0.0, 0.1, 0.0)).to_matrix();
        let t = Vector3::new(-1.0, 0.0, 0.1);
        let p = Vector3::new(0.5, -0.3, 6.0);
        let q = r * p + t;
        let x1 = Vector2::new(p.x / p.z, p.y / p.z);
        let x2 = Vector2::new(q.x / q.z, q.y / q.z);
        let got = triangulate(&r, &t, &x1, &x2).unwrap();
        assert!((got - p).norm() < 1e-9);
        let (d1, d2) = two_view_depths(&r, &t, &x1, &x2).unwrap();
        assert!((d1 - p.z).abs() < 1e-9 && (d2 - q.z).abs() < 1e-9);
    }

    #[test]
    fn motion_conversion_round_trip() {
        let cam = Motion::new(
            Rotation::from_axis_angle(&Vector3::new(0.02, 0.03, -0.01)),
            Vector3::new(0.1, 0.0, 0.5),
        );
        let p = cam.inverse();
        let back = motion_from_point_transform(&p.rotation.to_matrix(), &p.translation);
        assert!(crate::geometry::geodesic_angle(&back.rotation, &cam.rotation) < 1e-12);
        assert!((back.translation - cam.translation.normalize()).norm() < 1e-12);
    }
}
