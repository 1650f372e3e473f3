use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::{Error, Result};

/// Smallest rank whose cumulative squared singular values reach `fraction`.
pub fn variance_truncation(singular_values: &[f64], fraction: f64) -> Result<usize> {
    if singular_values.is_empty() {
        return Err(Error::InvalidArgument("empty spectrum".into()));
    }
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::InvalidArgument(format!("variance fraction must lie in (0, 1], got {fraction}")));
    }
    let total: f64 = singular_values.iter().map(|s| s * s).sum();
    if !(total > 0.0) {
        return Ok(1);
    }
    let mut acc = 0.0;
    for (k, s) in singular_values.iter().enumerate() {
        acc += s * s;
        if acc / total >= fraction * (1.0 - 1e-15) {
            return Ok(k + 1);
        }
    }
    Ok(singular_values.len())
}

fn standardize(data: &DMatrix<f64>) -> DMatrix<f64> {
    let n = data.nrows() as f64;
    let mut z = data.clone();
    for mut c in z.column_iter_mut() {
        let m = c.sum() / n;
        c.add_scalar_mut(-m);
        let sd = (c.norm_squared() / (n - 1.0)).sqrt();
        if sd > 0.0 {
            c /= sd;
        }
    }
    z
}

/// Descending correlation eigenvalues, through whichever Gram side is smaller.
fn correlation_spectrum(z: &DMatrix<f64>) -> Vec<f64> {
    let n = z.nrows();
    let gram = if n < z.ncols() { z * z.transpose() } else { z.transpose() * z };
    let mut ev: Vec<f64> = gram.symmetric_eigenvalues().iter().map(|v| v / (n - 1) as f64).collect();
    ev.sort_by(|a, b| b.total_cmp(a));
    ev
}

/// Number of leading components whose correlation eigenvalue beats the 95th
/// percentile of the same-rank eigenvalue over column-permuted surrogates.
///
/// `data` holds one sample per row.
pub fn parallel_analysis(data: &DMatrix<f64>, n_permutations: usize, seed: u64) -> Result<usize> {
    if data.nrows() < 3 {
        return Err(Error::InvalidArgument(format!(
            "parallel analysis needs at least 3 samples, got {}",
            data.nrows()
        )));
    }
    if n_permutations == 0 {
        return Err(Error::InvalidArgument("need at least one permutation".into()));
    }
    if data.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("parallel analysis data".into()));
    }
    let z = standardize(data);
    let observed = correlation_spectrum(&z);
    let k = observed.len();
    let mut null: Vec<Vec<f64>> = vec![Vec::with_capacity(n_permutations); k];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut perm = z.clone();
    let mut column = vec![0.0; z.nrows()];
    for _ in 0..n_permutations {
        for c in 0..z.ncols() {
            column.copy_from_slice(z.column(c).as_slice());
            column.shuffle(&mut rng);
            perm.set_column(c, &nalgebra::DVector::from_column_slice(&column));
        }
        for (slot, v) in null.iter_mut().zip(correlation_spectrum(&perm)) {
            slot.push(v);
        }
    }
    let rank = ((0.95 * n_permutations as f64).ceil() as usize).clamp(1, n_permutations) - 1;
    let mut count = 0;
    for (obs, mut sims) in observed.into_iter().zip(null) {
        sims.sort_by(f64::total_cmp);
        if obs > sims[rank] {
            count += 1;
        } else {
            break;
        }
    }
    Ok(count)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn truncation_examples() {
        assert_eq!(variance_truncation(&[1.0; 4], 0.95).unwrap(), 4);
        assert_eq!(variance_truncation(&[10.0, 1e-6], 0.95).unwrap(), 1);
        assert_eq!(variance_truncation(&[3.0, 4.0], 1.0).unwrap(), 2);
        assert!(variance_truncation(&[], 0.95).is_err());
    }

    #[test]
    fn too_few_samples() {
        assert!(parallel_analysis(&DMatrix::zeros(2, 4), 10, 0).is_err());
    }
}
