//! Latent codes, Gaussian priors and hyperellipsoid sampling.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::fsutil::write_atomic;
use crate::linalg::{inverse_sqrt_psd, is_symmetric, symmetric_eigen, SYMMETRY_TOL};
use crate::stats::chi2_quantile;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Space {
    Identity,
    Expression,
}

/// Pre-flow coefficients `w` or post-flow latents `z`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Coords {
    #[serde(rename = "w")]
    PreFlow,
    #[serde(rename = "z")]
    PostFlow,
}

impl fmt::Display for Space {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Identity => "identity",
            Self::Expression => "expression",
        })
    }
}

impl FromStr for Space {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "identity" => Ok(Self::Identity),
            "expression" => Ok(Self::Expression),
            _ => Err(Error::Format(format!("unknown latent space '{s}'"))),
        }
    }
}

impl fmt::Display for Coords {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::PreFlow => "w",
            Self::PostFlow => "z",
        })
    }
}

impl FromStr for Coords {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "w" => Ok(Self::PreFlow),
            "z" => Ok(Self::PostFlow),
            _ => Err(Error::Format(format!("unknown latent coordinates '{s}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LatentCode {
    pub values: DVector<f64>,
    pub space: Space,
    pub coords: Coords,
}

impl LatentCode {
    pub fn new(values: DVector<f64>, space: Space, coords: Coords) -> Self {
        Self { values, space, coords }
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    fn same_tags(&self, other: &Self) -> Result<()> {
        if self.space != other.space || self.coords != other.coords {
            return Err(Error::InvalidArgument(format!(
                "latent tag mismatch: {} {} vs {} {}",
                self.space, self.coords, other.space, other.coords
            )));
        }
        if self.dim() != other.dim() {
            return Err(Error::Dimension(format!("latent lengths {} and {}", self.dim(), other.dim())));
        }
        Ok(())
    }
}

/// One code per line: `<space> <coords> <values...>`.
impl fmt::Display for LatentCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {}", self.space, self.coords)?;
        for v in self.values.iter() {
            write!(f, " {v:?}")?;
        }
        Ok(())
    }
}

impl FromStr for LatentCode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut t = s.split_whitespace();
        let space = t.next().ok_or_else(|| Error::Format("empty latent code".into()))?.parse()?;
        let coords = t.next().ok_or_else(|| Error::Format("latent code lacks coordinates".into()))?.parse()?;
        let values = t
            .map(|v| v.parse::<f64>().map_err(|_| Error::Format(format!("bad latent value '{v}'"))))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self::new(DVector::from_vec(values), space, coords))
    }
}

pub fn save_codes(codes: &[LatentCode], path: &Path) -> Result<()> {
    let mut text = String::from("# space coords values...\n");
    for c in codes {
        text.push_str(&c.to_string());
        text.push('\n');
    }
    write_atomic(path, text.as_bytes())
}

pub fn load_codes(path: &Path) -> Result<Vec<LatentCode>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty() && !l.trim_start().starts_with('#'))
        .map(|(no, l)| {
            l.parse().map_err(|e: Error| Error::Parse {
                path: path.to_path_buf(),
                line: no + 1,
                msg: e.to_string(),
            })
        })
        .collect()
}

/// Multivariate normal with a precomputed symmetric whitener `Σ^{-1/2}`.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianPrior {
    mean: DVector<f64>,
    cov: DMatrix<f64>,
    whitener: DMatrix<f64>,
}

impl GaussianPrior {
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        let d = mean.len();
        if d == 0 || cov.shape() != (d, d) {
            return Err(Error::Dimension(format!("covariance {:?} for a mean of length {d}", cov.shape())));
        }
        let scale = cov.amax().max(1.0);
        if !is_symmetric(&cov, SYMMETRY_TOL) {
            return Err(Error::InvalidArgument("covariance is not symmetric".into()));
        }
        let eig = symmetric_eigen(&cov)?;
        if eig.values.iter().any(|&l| l < -1e-10 * scale) {
            return Err(Error::InvalidArgument("covariance is not positive semidefinite".into()));
        }
        let clipped = eig.values.map(|l| l.max(0.0));
        let cov = &eig.vectors * DMatrix::from_diagonal(&clipped) * eig.vectors.transpose();
        let cov = (&cov + cov.transpose()) * 0.5;
        let floor = (1e-12 * cov.trace() / d as f64).max(f64::MIN_POSITIVE);
        let whitener = inverse_sqrt_psd(&cov, floor)?;
        Ok(Self { mean, cov, whitener })
    }

    pub fn standard(dim: usize) -> Self {
        Self {
            mean: DVector::zeros(dim),
            cov: DMatrix::identity(dim, dim),
            whitener: DMatrix::identity(dim, dim),
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn cov(&self) -> &DMatrix<f64> {
        &self.cov
    }

    pub fn whitener(&self) -> &DMatrix<f64> {
        &self.whitener
    }

    pub fn mahalanobis(&self, b: &DVector<f64>) -> f64 {
        (&self.whitener * (b - &self.mean)).norm()
    }

    /// Draws `mean + Σ^{1/2} n`, `n ~ N(0, I)`, one per column.
    pub fn sample(&self, count: usize, seed: u64) -> Result<DMatrix<f64>> {
        let eig = symmetric_eigen(&self.cov)?;
        let root = &eig.vectors * DMatrix::from_diagonal(&eig.values.map(|l| l.max(0.0).sqrt())) * eig.vectors.transpose();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = DMatrix::from_fn(self.dim(), count, |_, _| StandardNormal.sample(&mut rng));
        let mut out = root * n;
        for mut c in out.column_iter_mut() {
            c += &self.mean;
        }
        Ok(out)
    }
}

/// Unbiased mean and covariance of the samples.
pub fn fit_prior(samples: &[DVector<f64>]) -> Result<GaussianPrior> {
    if samples.len() < 2 {
        return Err(Error::InvalidArgument(format!("a prior needs at least 2 samples, got {}", samples.len())));
    }
    let d = samples[0].len();
    if samples.iter().any(|s| s.len() != d) {
        return Err(Error::Dimension("samples differ in length".into()));
    }
    let n = samples.len() as f64;
    let mean = samples.iter().fold(DVector::zeros(d), |acc, s| acc + s) / n;
    let mut cov = DMatrix::zeros(d, d);
    for s in samples {
        let c = s - &mean;
        cov += &c * c.transpose();
    }
    GaussianPrior::new(mean, cov / (n - 1.0))
}

/// `β = sqrt(χ²_ζ(ρ))`.
pub fn chi2_critical(dof: f64, confidence: f64) -> Result<f64> {
    Ok(chi2_quantile(confidence, dof)?.sqrt())
}

/// Rescales `b` along its direction from the mean onto the shell of
/// Mahalanobis radius `beta`.
pub fn project_to_hyperellipsoid(b: &DVector<f64>, prior: &GaussianPrior, beta: f64) -> Result<DVector<f64>> {
    if b.len() != prior.dim() {
        return Err(Error::Dimension(format!("point has length {}, prior {}", b.len(), prior.dim())));
    }
    if !(beta > 0.0 && beta.is_finite()) {
        return Err(Error::InvalidArgument(format!("radius must be positive, got {beta}")));
    }
    let dir = b - prior.mean();
    let dist = (prior.whitener() * &dir).norm();
    if !(dist > 0.0) {
        return Err(Error::Degenerate("point coincides with the prior mean; direction undefined".into()));
    }
    Ok(dir * (beta / dist) + prior.mean())
}

/// `(1 − ν)·a + ν·b`.
pub fn interpolate(a: &LatentCode, b: &LatentCode, nu: f64) -> Result<LatentCode> {
    a.same_tags(b)?;
    if !(0.0..=1.0).contains(&nu) {
        return Err(Error::InvalidArgument(format!("interpolation weight must lie in [0, 1], got {nu}")));
    }
    let values = if nu == 0.0 {
        a.values.clone()
    } else if nu == 1.0 {
        b.values.clone()
    } else {
        &a.values * (1.0 - nu) + &b.values * nu
    };
    Ok(LatentCode::new(values, a.space, a.coords))
}

/// Euclidean nearest neighbour; ties resolve to the lowest index.
pub fn nearest_neighbor(query: &LatentCode, pool: &[LatentCode]) -> Result<(usize, f64)> {
    if pool.is_empty() {
        return Err(Error::InvalidArgument("empty neighbour pool".into()));
    }
    let mut best = (0, f64::INFINITY);
    for (i, p) in pool.iter().enumerate() {
        query.same_tags(p)?;
        let d = (&p.values - &query.values).norm();
        if d < best.1 {
            best = (i, d);
        }
    }
    Ok(best)
}

/// Confidence level, degrees of freedom and shell radius for one space.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShellPreset {
    pub rho: f64,
    pub zeta: f64,
    pub beta: f64,
}

impl ShellPreset {
    /// The radius implied by `(zeta, rho)`, independent of the stored `beta`.
    pub fn chi2_beta(&self) -> Result<f64> {
        chi2_critical(self.zeta, self.rho)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LatentPresets {
    pub expression: ShellPreset,
    pub identity: ShellPreset,
}

impl LatentPresets {
    /// The published infant-model values, kept verbatim. The stored radii
    /// differ from the chi-squared radii of the same `(zeta, rho)`.
    pub fn published() -> Self {
        Self {
            expression: ShellPreset {
                rho: 0.99,
                zeta: 7.0,
                beta: 4.07,
            },
            identity: ShellPreset {
                rho: 0.99,
                zeta: 26.0,
                beta: 6.01,
            },
        }
    }
}

impl Default for LatentPresets {
    fn default() -> Self {
        Self::published()
    }
}
