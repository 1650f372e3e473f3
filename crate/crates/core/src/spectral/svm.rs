//! L2-regularized hinge-loss linear SVM trained by dual coordinate descent.
//!
//! The bias is folded in as an extra constant feature, so the primal is
//! `0.5 * (|w|^2 + b^2) + C * sum_i max(0, 1 - y_i (w . x_i + b))`.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::{Error, Result};

#[derive(Debug, Clone, Copy)]
pub struct SvmOptions {
    pub max_epochs: usize,
    /// Stop when the largest projected-gradient violation drops below this.
    pub tolerance: f64,
    pub seed: u64,
}

impl Default for SvmOptions {
    fn default() -> Self {
        Self {
            max_epochs: 5000,
            tolerance: 1e-8,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct LinearSvm {
    pub weights: Vec<f64>,
    pub bias: f64,
    pub c: f64,
    /// Dual objective (to be minimized) after each epoch.
    pub dual_history: Vec<f64>,
}

impl LinearSvm {
    pub fn decision(&self, x: &[f64]) -> f64 {
        dot(&self.weights, x) + self.bias
    }

    /// Primal objective on a data set.
    pub fn primal_objective(&self, xs: &[Vec<f64>], ys: &[f64]) -> f64 {
        primal_objective(&self.weights, self.bias, self.c, xs, ys)
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn primal_objective(w: &[f64], b: f64, c: f64, xs: &[Vec<f64>], ys: &[f64]) -> f64 {
    let reg = 0.5 * (dot(w, w) + b * b);
    let loss: f64 = xs
        .iter()
        .zip(ys)
        .map(|(x, &y)| (1.0 - y * (dot(w, x) + b)).max(0.0))
        .sum();
    reg + c * loss
}

fn validate(xs: &[Vec<f64>], ys: &[f64], c: f64) -> Result<usize> {
    if xs.len() != ys.len() {
        return Err(Error::Dimension(format!(
            "{} feature rows but {} labels",
            xs.len(),
            ys.len()
        )));
    }
    if !(c > 0.0) {
        return Err(Error::InvalidArgument(format!("C must be positive, got {c}")));
    }
    let dim = xs.first().map(|x| x.len()).unwrap_or(0);
    if xs.iter().any(|x| x.len() != dim) {
        return Err(Error::Dimension("feature rows differ in length".into()));
    }
    if ys.iter().any(|&y| y != 1.0 && y != -1.0) {
        return Err(Error::InvalidArgument("labels must be +1 or -1".into()));
    }
    let pos = ys.iter().filter(|&&y| y > 0.0).count();
    if pos == 0 || pos == ys.len() {
        return Err(Error::InvalidArgument(
            "SVM training needs at least one example of each class".into(),
        ));
    }
    Ok(dim)
}

/// Dual coordinate descent on the box-constrained dual.
pub fn train_linear_svm(xs: &[Vec<f64>], ys: &[f64], c: f64, options: SvmOptions) -> Result<LinearSvm> {
    let dim = validate(xs, ys, c)?;
    let n = xs.len();
    let q: Vec<f64> = xs.iter().map(|x| dot(x, x) + 1.0).collect();
    let mut alpha = vec![0.0; n];
    let mut w = vec![0.0; dim];
    let mut b = 0.0;
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
    let mut history = Vec::new();

    for _ in 0..options.max_epochs {
        order.shuffle(&mut rng);
        let mut max_violation = 0.0f64;
        for &i in &order {
            let y = ys[i];
            let g = y * (dot(&w, &xs[i]) + b) - 1.0;
            let pg = if alpha[i] == 0.0 {
                g.min(0.0)
            } else if alpha[i] == c {
                g.max(0.0)
            } else {
                g
            };
            max_violation = max_violation.max(pg.abs());
            if pg != 0.0 {
                let old = alpha[i];
                alpha[i] = (old - g / q[i]).clamp(0.0, c);
                let step = (alpha[i] - old) * y;
                if step != 0.0 {
                    for (wk, xk) in w.iter_mut().zip(&xs[i]) {
                        *wk += step * xk;
                    }
                    b += step;
                }
            }
        }
        let dual = 0.5 * (dot(&w, &w) + b * b) - alpha.iter().sum::<f64>();
        history.push(dual);
        if max_violation < options.tolerance {
            break;
        }
    }
    Ok(LinearSvm {
        weights: w,
        bias: b,
        c,
        dual_history: history,
    })
}

/// Train one action-unit classifier on stacked spectral features.
///
/// Features are standardized per dimension for training and the scaling is
/// folded back into the returned weights and bias, so the classifier acts
/// directly on raw feature vectors.
pub fn train_au_svm(features: &[Vec<f64>], labels: &[f64], c: f64, options: SvmOptions) -> Result<LinearSvm> {
    let dim = validate(features, labels, c)?;
    let n = features.len() as f64;
    let mut mean = vec![0.0; dim];
    for x in features {
        for (m, v) in mean.iter_mut().zip(x) {
            *m += v / n;
        }
    }
    let mut scale = vec![0.0; dim];
    for x in features {
        for ((s, v), m) in scale.iter_mut().zip(x).zip(&mean) {
            *s += (v - m) * (v - m) / n;
        }
    }
    for s in scale.iter_mut() {
        *s = if *s > 1e-24 { s.sqrt() } else { 1.0 };
    }
    let standardized: Vec<Vec<f64>> = features
        .iter()
        .map(|x| x.iter().zip(&mean).zip(&scale).map(|((v, m), s)| (v - m) / s).collect())
        .collect();
    let mut svm = train_linear_svm(&standardized, labels, c, options)?;
    let w: Vec<f64> = svm.weights.iter().zip(&scale).map(|(w, s)| w / s).collect();
    svm.bias -= dot(&w, &mean);
    svm.weights = w;
    Ok(svm)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn blobs(seed: u64, n: usize, gap: f64) -> (Vec<Vec<f64>>, Vec<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        for i in 0..n {
            let y = if i % 2 == 0 { 1.0 } else { -1.0 };
            xs.push(vec![y * gap + rng.random_range(-1.0..1.0), 0.5 + rng.random_range(-1.0..1.0)]);
            ys.push(y);
        }
        (xs, ys)
    }

    #[test]
    fn separable_blobs_are_separated() {
        let (xs, ys) = blobs(1, 40, 2.0);
        let svm = train_linear_svm(&xs, &ys, 10.0, SvmOptions::default()).unwrap();
        for (x, y) in xs.iter().zip(&ys) {
            assert!(svm.decision(x) * y > 0.0);
        }
    }

    #[test]
    fn flipped_labels_negate_the_classifier() {
        let (xs, ys) = blobs(2, 30, 0.7);
        let flipped: Vec<f64> = ys.iter().map(|y| -y).collect();
        let a = train_linear_svm(&xs, &ys, 1.0, SvmOptions::default()).unwrap();
        let b = train_linear_svm(&xs, &flipped, 1.0, SvmOptions::default()).unwrap();
        for (u, v) in a.weights.iter().zip(&b.weights) {
            assert!((u + v).abs() < 1e-9);
        }
        assert!((a.bias + b.bias).abs() < 1e-9);
    }

    #[test]
    fn vanishing_c_shrinks_weights() {
        let (xs, ys) = blobs(3, 30, 1.0);
        let mut last = f64::INFINITY;
        for c in [1.0, 1e-2, 1e-4, 1e-6] {
            let svm = train_linear_svm(&xs, &ys, c, SvmOptions::default()).unwrap();
            let norm = dot(&svm.weights, &svm.weights).sqrt();
            assert!(norm <= last + 1e-12);
            last = norm;
        }
        assert!(last < 1e-4);
    }

    #[test]
    fn dual_objective_is_monotone() {
        let (xs, ys) = blobs(4, 60, 0.3);
        let svm = train_linear_svm(&xs, &ys, 1.0, SvmOptions::default()).unwrap();
        for pair in svm.dual_history.windows(2) {
            assert!(pair[1] <= pair[0] + 1e-12);
        }
    }

    #[test]
    fn single_class_is_rejected() {
        let xs = vec![vec![1.0], vec![2.0]];
        assert!(train_linear_svm(&xs, &[1.0, 1.0], 1.0, SvmOptions::default()).is_err());
    }

    #[test]
    fn standardized_training_folds_back() {
        let (mut xs, ys) = blobs(5, 40, 2.0);
        for x in xs.iter_mut() {
            x[1] = x[1] * 1000.0 + 50.0;
        }
        let svm = train_au_svm(&xs, &ys, 1.0, SvmOptions::default()).unwrap();
        let acc = xs.iter().zip(&ys).filter(|(x, y)| svm.decision(x) * **y > 0.0).count();
        assert_eq!(acc, xs.len());
    }
}
