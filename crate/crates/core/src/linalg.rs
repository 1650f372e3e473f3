//! Small dense linear-algebra helpers shared across modules.
//!
//! The symmetric eigensolver is a cyclic Jacobi iteration. All matrices it
//! sees are small (patch Laplacians, Gram matrices of tensor unfoldings,
//! latent covariances), where Jacobi is accurate and simple.

use nalgebra::{DMatrix, DVector};

use crate::{Error, Result};

/// Eigenpairs of a symmetric matrix, eigenvalues ascending.
///
/// Column `k` of `vectors` pairs with `values[k]`. Each eigenvector is
/// sign-normalized so that its largest-magnitude component is positive
/// (the first such component wins ties).
#[derive(Debug, Clone)]
pub struct SymmetricEigen {
    pub values: DVector<f64>,
    pub vectors: DMatrix<f64>,
}

const MAX_SWEEPS: usize = 100;

/// Relative asymmetry tolerated before a matrix is rejected as non-symmetric.
pub const SYMMETRY_TOL: f64 = 1e-10;

pub fn is_symmetric(a: &DMatrix<f64>, tol: f64) -> bool {
    if !a.is_square() {
        return false;
    }
    let scale = a.amax().max(1.0);
    let n = a.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            if (a[(i, j)] - a[(j, i)]).abs() > tol * scale {
                return false;
            }
        }
    }
    true
}

/// Cyclic Jacobi eigendecomposition of a symmetric matrix.
pub fn symmetric_eigen(a: &DMatrix<f64>) -> Result<SymmetricEigen> {
    if !a.is_square() {
        return Err(Error::Dimension(format!(
            "eigendecomposition needs a square matrix, got {}x{}",
            a.nrows(),
            a.ncols()
        )));
    }
    if !is_symmetric(a, SYMMETRY_TOL) {
        return Err(Error::InvalidArgument("matrix is not symmetric".into()));
    }
    if a.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("eigendecomposition input".into()));
    }
    let n = a.nrows();
    // symmetrize exactly so rotations act on a truly symmetric matrix
    let mut m = (a + a.transpose()) * 0.5;
    let mut v = DMatrix::<f64>::identity(n, n);

    let total = m.norm();
    if n > 1 && total > 0.0 {
        for _ in 0..MAX_SWEEPS {
            let mut off = 0.0;
            for p in 0..n {
                for q in (p + 1)..n {
                    off += m[(p, q)] * m[(p, q)];
                }
            }
            if off.sqrt() <= 1e-15 * total {
                break;
            }
            for p in 0..n {
                for q in (p + 1)..n {
                    let apq = m[(p, q)];
                    if apq.abs() <= f64::MIN_POSITIVE {
                        continue;
                    }
                    let app = m[(p, p)];
                    let aqq = m[(q, q)];
                    let theta = (aqq - app) / (2.0 * apq);
                    let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                    let t = if theta == 0.0 { 1.0 } else { t };
                    let c = 1.0 / (t * t + 1.0).sqrt();
                    let s = t * c;
                    for k in 0..n {
                        let mkp = m[(k, p)];
                        let mkq = m[(k, q)];
                        m[(k, p)] = c * mkp - s * mkq;
                        m[(k, q)] = s * mkp + c * mkq;
                    }
                    for k in 0..n {
                        let mpk = m[(p, k)];
                        let mqk = m[(q, k)];
                        m[(p, k)] = c * mpk - s * mqk;
                        m[(q, k)] = s * mpk + c * mqk;
                    }
                    for k in 0..n {
                        let vkp = v[(k, p)];
                        let vkq = v[(k, q)];
                        v[(k, p)] = c * vkp - s * vkq;
                        v[(k, q)] = s * vkp + c * vkq;
                    }
                }
            }
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| m[(i, i)].total_cmp(&m[(j, j)]).then(i.cmp(&j)));
    let values = DVector::from_iterator(n, order.iter().map(|&i| m[(i, i)]));
    let mut vectors = DMatrix::<f64>::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        let mut col = v.column(src).into_owned();
        fix_sign(&mut col);
        vectors.set_column(dst, &col);
    }
    Ok(SymmetricEigen { values, vectors })
}

/// Flip `v` so its largest-magnitude entry is positive.
pub fn fix_sign(v: &mut DVector<f64>) {
    let mut best = 0;
    let mut best_abs = -1.0;
    for (i, x) in v.iter().enumerate() {
        // strict comparison with a small relative margin keeps the first of near-equal entries
        if x.abs() > best_abs * (1.0 + 1e-9) {
            best = i;
            best_abs = x.abs();
        }
    }
    if !v.is_empty() && v[best] < 0.0 {
        v.neg_mut();
    }
}

/// Symmetric inverse square root `S^{-1/2}` with eigenvalues floored at `floor`.
pub fn inverse_sqrt_psd(s: &DMatrix<f64>, floor: f64) -> Result<DMatrix<f64>> {
    let eig = symmetric_eigen(s)?;
    let n = s.nrows();
    let mut out = DMatrix::<f64>::zeros(n, n);
    for k in 0..n {
        let lam = eig.values[k].max(floor);
        let u = eig.vectors.column(k);
        out += (u * u.transpose()) / lam.sqrt();
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn three_cycle_laplacian_spectrum() {
        let l = DMatrix::from_row_slice(3, 3, &[2.0, -1.0, -1.0, -1.0, 2.0, -1.0, -1.0, -1.0, 2.0]);
        let eig = symmetric_eigen(&l).unwrap();
        assert!(eig.values[0].abs() < 1e-12);
        assert!((eig.values[1] - 3.0).abs() < 1e-12);
        assert!((eig.values[2] - 3.0).abs() < 1e-12);
    }

    #[test]
    fn reconstructs_random_symmetric() {
        let n = 9;
        let b = DMatrix::from_fn(n, n, |i, j| ((i * 7 + j * 3) as f64).sin());
        let a = &b + b.transpose();
        let eig = symmetric_eigen(&a).unwrap();
        let rebuilt = &eig.vectors * DMatrix::from_diagonal(&eig.values) * eig.vectors.transpose();
        assert!((rebuilt - &a).amax() < 1e-10);
        let gram = eig.vectors.transpose() * &eig.vectors;
        assert!((gram - DMatrix::identity(n, n)).amax() < 1e-12);
        for k in 1..n {
            assert!(eig.values[k - 1] <= eig.values[k]);
        }
    }

    #[test]
    fn rejects_asymmetric() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 0.0, 1.0]);
        assert!(symmetric_eigen(&a).is_err());
    }

    #[test]
    fn largest_component_is_positive() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 0.3, 0.3, 4.0]);
        let eig = symmetric_eigen(&a).unwrap();
        for k in 0..2 {
            let col = eig.vectors.column(k);
            let imax = col.iamax();
            assert!(col[imax] > 0.0);
        }
    }
}
