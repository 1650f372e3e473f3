//! Closed-form rigid (optionally similarity) alignment of corresponding
//! point sets, plus a generalized variant that aligns a whole population to
//! its own mean.

use nalgebra::{Matrix3, SVD};

use super::mesh::{Mesh, Vec3};
use crate::{Error, Result};

/// `p -> scale * rotation * p + translation`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidTransform {
    pub rotation: Matrix3<f64>,
    pub translation: Vec3,
    pub scale: f64,
}

impl RigidTransform {
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vec3::zeros(),
            scale: 1.0,
        }
    }

    pub fn apply(&self, p: &Vec3) -> Vec3 {
        self.rotation * p * self.scale + self.translation
    }
}

fn centroid(points: &[Vec3]) -> Vec3 {
    points.iter().fold(Vec3::zeros(), |acc, p| acc + p) / points.len() as f64
}

/// Least-squares transform taking `source` onto `target` (Kabsch/Umeyama).
///
/// Reflections are excluded by the determinant correction on the smallest
/// singular direction.
pub fn procrustes_points(source: &[Vec3], target: &[Vec3], allow_scale: bool) -> Result<RigidTransform> {
    if source.len() != target.len() {
        return Err(Error::Dimension(format!(
            "procrustes needs equal point counts, got {} and {}",
            source.len(),
            target.len()
        )));
    }
    if source.len() < 3 {
        return Err(Error::Degenerate("procrustes needs at least 3 points".into()));
    }
    let cs = centroid(source);
    let ct = centroid(target);

    let mut cov = Matrix3::zeros();
    let mut spread = Matrix3::zeros();
    let mut src_ss = 0.0;
    for (s, t) in source.iter().zip(target) {
        let a = s - cs;
        let b = t - ct;
        cov += b * a.transpose();
        spread += a * a.transpose();
        src_ss += a.norm_squared();
    }
    let sv = spread.symmetric_eigenvalues();
    let mut sv: Vec<f64> = sv.iter().copied().collect();
    sv.sort_by(|a, b| b.total_cmp(a));
    if sv[0] <= 0.0 || sv[1] <= 1e-12 * sv[0] {
        return Err(Error::Degenerate(
            "source points are collinear or coincident".into(),
        ));
    }

    let svd = SVD::new(cov, true, true);
    let u = svd.u.ok_or_else(|| Error::Degenerate("SVD failed".into()))?;
    let v_t = svd.v_t.ok_or_else(|| Error::Degenerate("SVD failed".into()))?;
    let d = (u * v_t).determinant().signum();
    let correction = Matrix3::from_diagonal(&Vec3::new(1.0, 1.0, d));
    let rotation = u * correction * v_t;

    let scale = if allow_scale {
        let s = svd.singular_values;
        (s[0] + s[1] + d * s[2]) / src_ss
    } else {
        1.0
    };
    let translation = ct - rotation * cs * scale;
    Ok(RigidTransform {
        rotation,
        translation,
        scale,
    })
}

/// Align `source` onto `target` (same vertex count, index correspondence).
pub fn procrustes_align(source: &Mesh, target: &Mesh, allow_scale: bool) -> Result<(Mesh, RigidTransform)> {
    if source.vertex_count() != target.vertex_count() {
        return Err(Error::Dimension(format!(
            "vertex count mismatch: {} vs {}",
            source.vertex_count(),
            target.vertex_count()
        )));
    }
    let xf = procrustes_points(source.vertices(), target.vertices(), allow_scale)?;
    let moved = source.vertices().iter().map(|p| xf.apply(p)).collect();
    Ok((source.with_vertices(moved)?, xf))
}

/// Rigidly align every shape to the population mean, iterating until the
/// mean stops moving. Shapes are centred at the origin; no scaling.
///
/// At convergence each shape is Procrustes-optimal against the returned
/// mean, so any linear combination of deviations from the mean is also
/// rotation-stationary against it.
pub fn generalized_procrustes(shapes: &[Vec<Vec3>], tol: f64, max_iter: usize) -> Result<(Vec<Vec<Vec3>>, Vec<Vec3>)> {
    let first = shapes
        .first()
        .ok_or_else(|| Error::InvalidArgument("no shapes to align".into()))?;
    let n = first.len();
    if shapes.iter().any(|s| s.len() != n) {
        return Err(Error::Dimension("shapes differ in vertex count".into()));
    }
    let center = |s: &[Vec3]| {
        let c = centroid(s);
        s.iter().map(|p| p - c).collect::<Vec<_>>()
    };
    let mut aligned: Vec<Vec<Vec3>> = shapes.iter().map(|s| center(s)).collect();
    let mut mean = aligned[0].clone();
    for _ in 0..max_iter {
        for s in aligned.iter_mut() {
            let xf = procrustes_points(s, &mean, false)?;
            for p in s.iter_mut() {
                *p = xf.apply(p);
            }
        }
        let mut next = vec![Vec3::zeros(); n];
        for s in &aligned {
            for (m, p) in next.iter_mut().zip(s) {
                *m += p;
            }
        }
        for m in next.iter_mut() {
            *m /= aligned.len() as f64;
        }
        let shift = next
            .iter()
            .zip(&mean)
            .map(|(a, b)| (a - b).norm_squared())
            .sum::<f64>()
            .sqrt();
        let size = next.iter().map(|p| p.norm_squared()).sum::<f64>().sqrt().max(1e-300);
        mean = next;
        if shift <= tol * size {
            break;
        }
    }
    Ok((aligned, mean))
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Rotation3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cloud(seed: u64, n: usize) -> Vec<Vec3> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)) * 10.0)
            .collect()
    }

    fn rms(a: &[Vec3], b: &[Vec3]) -> f64 {
        (a.iter().zip(b).map(|(x, y)| (x - y).norm_squared()).sum::<f64>() / a.len() as f64).sqrt()
    }

    #[test]
    fn recovers_exact_rigid_motion() {
        let src = cloud(1, 40);
        let rot = Rotation3::from_axis_angle(&Vec3::z_axis(), 30f64.to_radians());
        let dst: Vec<Vec3> = src.iter().map(|p| rot * p + Vec3::new(5.0, 0.0, 0.0)).collect();
        let xf = procrustes_points(&src, &dst, false).unwrap();
        let moved: Vec<Vec3> = src.iter().map(|p| xf.apply(p)).collect();
        assert!(rms(&moved, &dst) < 1e-9);
        assert!((xf.rotation - rot.matrix()).amax() < 1e-12);
    }

    #[test]
    fn identity_when_equal() {
        let src = cloud(2, 20);
        let xf = procrustes_points(&src, &src, false).unwrap();
        assert!((xf.rotation - Matrix3::identity()).amax() < 1e-12);
        assert!(xf.translation.norm() < 1e-12);
    }

    #[test]
    fn recovers_scale() {
        let src = cloud(3, 20);
        let dst: Vec<Vec3> = src.iter().map(|p| p * 2.5 + Vec3::new(1.0, 2.0, 3.0)).collect();
        let xf = procrustes_points(&src, &dst, true).unwrap();
        assert!((xf.scale - 2.5).abs() < 1e-12);
    }

    #[test]
    fn never_returns_a_reflection() {
        let src = cloud(4, 30);
        let dst: Vec<Vec3> = src.iter().map(|p| Vec3::new(-p.x, p.y, p.z)).collect();
        let xf = procrustes_points(&src, &dst, false).unwrap();
        assert!((xf.rotation.determinant() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn collinear_source_is_degenerate() {
        let src: Vec<Vec3> = (0..5).map(|i| Vec3::new(i as f64, 2.0 * i as f64, 0.0)).collect();
        let err = procrustes_points(&src, &cloud(5, 5), false).unwrap_err();
        assert!(matches!(err, Error::Degenerate(_)));
    }

    #[test]
    fn count_mismatch() {
        assert!(matches!(
            procrustes_points(&cloud(1, 5), &cloud(1, 6), false),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn gpa_shapes_are_stationary_against_mean() {
        let base = cloud(6, 30);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let shapes: Vec<Vec<Vec3>> = (0..5)
            .map(|k| {
                let rot = Rotation3::from_euler_angles(0.1 * k as f64, -0.05 * k as f64, 0.2);
                base.iter()
                    .map(|p| rot * (p + Vec3::new(rng.random(), rng.random(), rng.random())) + Vec3::new(k as f64, 0.0, 0.0))
                    .collect()
            })
            .collect();
        let (aligned, mean) = generalized_procrustes(&shapes, 1e-14, 200).unwrap();
        for s in &aligned {
            let xf = procrustes_points(s, &mean, false).unwrap();
            assert!((xf.rotation - Matrix3::identity()).amax() < 1e-9);
            assert!(xf.translation.norm() < 1e-9);
        }
    }
}
