use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::tensor::ShapeTensor;
use crate::binio::{Reader, Writer};
use crate::fsutil::write_atomic;
use crate::linalg::symmetric_eigen;
use crate::{Error, Result};

const MAGIC: &[u8; 4] = b"MFBM";
const VERSION: u32 = 1;

/// Provenance stored alongside the model.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ModelMeta {
    pub augmented: bool,
    pub seed: Option<u64>,
    pub identities: Vec<String>,
    pub expressions: Vec<String>,
}

/// `x = mu + C x2 w_id x3 w_ex`.
///
/// The core is stored as a `3N × (d_id·d_ex)` matrix whose column
/// `a + d_id·b` is the vertex fiber `C[:, a, b]`.
#[derive(Debug, Clone, PartialEq)]
pub struct BilinearModel {
    mean: DVector<f64>,
    core: DMatrix<f64>,
    u_id: DMatrix<f64>,
    u_ex: DMatrix<f64>,
    lambda_id: DVector<f64>,
    lambda_ex: DVector<f64>,
    sv_id: DVector<f64>,
    sv_ex: DVector<f64>,
    pub meta: ModelMeta,
}

/// Mode basis from the Gram matrix of an unfolding: eigenvectors sorted by
/// descending eigenvalue, plus the singular values.
fn gram_basis(gram: &DMatrix<f64>) -> Result<(DMatrix<f64>, DVector<f64>)> {
    let sym = (gram + gram.transpose()) * 0.5;
    let eig = symmetric_eigen(&sym)?;
    let n = eig.values.len();
    let order: Vec<usize> = (0..n).rev().collect();
    let u = DMatrix::from_fn(n, n, |r, c| eig.vectors[(r, order[c])]);
    let sv = DVector::from_iterator(n, order.iter().map(|&k| eig.values[k].max(0.0).sqrt()));
    Ok((u, sv))
}

/// Higher-order SVD of the grand-mean-centered tensor with the vertex mode
/// left uncompressed.
pub fn hosvd(tensor: &ShapeTensor, d_id: usize, d_ex: usize) -> Result<BilinearModel> {
    let (nv, ni, ne) = tensor.dims();
    if d_id == 0 || d_id > ni {
        return Err(Error::InvalidArgument(format!("identity rank {d_id} outside 1..={ni}")));
    }
    if d_ex == 0 || d_ex > ne {
        return Err(Error::InvalidArgument(format!("expression rank {d_ex} outside 1..={ne}")));
    }
    let raw = tensor.unfold(1)?;
    let mean = raw.column_mean();
    let mut centered = raw;
    for mut c in centered.column_iter_mut() {
        c -= &mean;
    }
    // Per-expression vertex × identity slabs.
    let slabs: Vec<DMatrix<f64>> = (0..ne).map(|e| centered.columns(e * ni, ni).into_owned()).collect();

    let mut g_id = DMatrix::zeros(ni, ni);
    for s in &slabs {
        g_id += s.transpose() * s;
    }
    let mut g_ex = DMatrix::zeros(ne, ne);
    for e in 0..ne {
        for f in e..ne {
            let v = slabs[e].dot(&slabs[f]);
            g_ex[(e, f)] = v;
            g_ex[(f, e)] = v;
        }
    }
    let (u_id_full, sv_id) = gram_basis(&g_id)?;
    let (u_ex_full, sv_ex) = gram_basis(&g_ex)?;
    let u_id = u_id_full.columns(0, d_id).into_owned();
    let u_ex = u_ex_full.columns(0, d_ex).into_owned();

    let projected: Vec<DMatrix<f64>> = slabs.iter().map(|s| s * &u_id).collect();
    let mut core = DMatrix::zeros(nv, d_id * d_ex);
    for b in 0..d_ex {
        let mut block = core.columns_mut(b * d_id, d_id);
        for (e, p) in projected.iter().enumerate() {
            block += p * u_ex[(e, b)];
        }
    }
    let lambda = |sv: &DVector<f64>, d: usize, count: usize| {
        let denom = (count.max(2) - 1) as f64;
        DVector::from_iterator(d, sv.iter().take(d).map(|s| s * s / denom))
    };
    let meta = ModelMeta {
        identities: tensor
            .identities()
            .iter()
            .map(|l| format!("{}:{}", l.name, l.kind.as_str()))
            .collect(),
        expressions: tensor.expressions().to_vec(),
        augmented: tensor.identities().iter().any(|l| l.kind != super::IdentityKind::Original),
        seed: None,
    };
    Ok(BilinearModel {
        lambda_id: lambda(&sv_id, d_id, ni),
        lambda_ex: lambda(&sv_ex, d_ex, ne),
        mean,
        core,
        u_id,
        u_ex,
        sv_id,
        sv_ex,
        meta,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub enum EncodeMode {
    /// Solve for `w_id` with this `w_ex`.
    FixExpression(DVector<f64>),
    /// Solve for `w_ex` with this `w_id`.
    FixIdentity(DVector<f64>),
    /// Alternate the two solves starting from `w_ex`.
    Alternate {
        w_ex: DVector<f64>,
        tol: f64,
        max_iter: usize,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Encoding {
    pub w_id: DVector<f64>,
    pub w_ex: DVector<f64>,
    /// Squared residual after every half-step.
    pub residuals: Vec<f64>,
}

impl BilinearModel {
    pub fn vertex_dim(&self) -> usize {
        self.mean.len()
    }

    pub fn vertex_count(&self) -> usize {
        self.mean.len() / 3
    }

    pub fn d_id(&self) -> usize {
        self.u_id.ncols()
    }

    pub fn d_ex(&self) -> usize {
        self.u_ex.ncols()
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn core(&self) -> &DMatrix<f64> {
        &self.core
    }

    pub fn u_id(&self) -> &DMatrix<f64> {
        &self.u_id
    }

    pub fn u_ex(&self) -> &DMatrix<f64> {
        &self.u_ex
    }

    pub fn lambda_id(&self) -> &DVector<f64> {
        &self.lambda_id
    }

    pub fn lambda_ex(&self) -> &DVector<f64> {
        &self.lambda_ex
    }

    /// All identity-mode singular values, including truncated ones.
    pub fn singular_values_id(&self) -> &DVector<f64> {
        &self.sv_id
    }

    pub fn singular_values_ex(&self) -> &DVector<f64> {
        &self.sv_ex
    }

    /// Training coefficients: row `i` of `U_id`.
    pub fn identity_code(&self, i: usize) -> DVector<f64> {
        self.u_id.row(i).transpose()
    }

    pub fn expression_code(&self, e: usize) -> DVector<f64> {
        self.u_ex.row(e).transpose()
    }

    fn check(&self, w_id: &DVector<f64>, w_ex: &DVector<f64>) -> Result<()> {
        if w_id.len() != self.d_id() || w_ex.len() != self.d_ex() {
            return Err(Error::Dimension(format!(
                "coefficients ({}, {}) do not match model ranks ({}, {})",
                w_id.len(),
                w_ex.len(),
                self.d_id(),
                self.d_ex()
            )));
        }
        Ok(())
    }

    /// `C x2 w_id x3 w_ex` without the mean.
    pub fn offset(&self, w_id: &DVector<f64>, w_ex: &DVector<f64>) -> Result<DVector<f64>> {
        self.check(w_id, w_ex)?;
        Ok(self.identity_basis(w_ex)? * w_id)
    }

    pub fn reconstruct(&self, w_id: &DVector<f64>, w_ex: &DVector<f64>) -> Result<DVector<f64>> {
        Ok(self.offset(w_id, w_ex)? + &self.mean)
    }

    /// `∂x/∂w_id` at fixed `w_ex`, a `3N × d_id` matrix.
    pub fn identity_basis(&self, w_ex: &DVector<f64>) -> Result<DMatrix<f64>> {
        if w_ex.len() != self.d_ex() {
            return Err(Error::Dimension(format!("w_ex has length {}, model rank {}", w_ex.len(), self.d_ex())));
        }
        let d = self.d_id();
        let mut m = DMatrix::zeros(self.vertex_dim(), d);
        for b in 0..self.d_ex() {
            m += self.core.columns(b * d, d) * w_ex[b];
        }
        Ok(m)
    }

    /// `∂x/∂w_ex` at fixed `w_id`, a `3N × d_ex` matrix.
    pub fn expression_basis(&self, w_id: &DVector<f64>) -> Result<DMatrix<f64>> {
        if w_id.len() != self.d_id() {
            return Err(Error::Dimension(format!("w_id has length {}, model rank {}", w_id.len(), self.d_id())));
        }
        let d = self.d_id();
        let mut m = DMatrix::zeros(self.vertex_dim(), self.d_ex());
        for b in 0..self.d_ex() {
            m.set_column(b, &(self.core.columns(b * d, d) * w_id));
        }
        Ok(m)
    }

    pub fn encode(&self, face: &DVector<f64>, mode: &EncodeMode) -> Result<Encoding> {
        if face.len() != self.vertex_dim() {
            return Err(Error::Dimension(format!("face has {} values, model {}", face.len(), self.vertex_dim())));
        }
        let rhs = face - &self.mean;
        let residual = |w_id: &DVector<f64>, w_ex: &DVector<f64>| -> Result<f64> {
            Ok((self.offset(w_id, w_ex)? - &rhs).norm_squared())
        };
        match mode {
            EncodeMode::FixExpression(w_ex) => {
                let w_id = least_squares(&self.identity_basis(w_ex)?, &rhs, "expression")?;
                let r = residual(&w_id, w_ex)?;
                Ok(Encoding {
                    w_id,
                    w_ex: w_ex.clone(),
                    residuals: vec![r],
                })
            }
            EncodeMode::FixIdentity(w_id) => {
                let w_ex = least_squares(&self.expression_basis(w_id)?, &rhs, "identity")?;
                let r = residual(w_id, &w_ex)?;
                Ok(Encoding {
                    w_id: w_id.clone(),
                    w_ex,
                    residuals: vec![r],
                })
            }
            EncodeMode::Alternate { w_ex, tol, max_iter } => {
                let mut w_ex = w_ex.clone();
                let mut w_id = least_squares(&self.identity_basis(&w_ex)?, &rhs, "expression")?;
                let mut residuals = vec![residual(&w_id, &w_ex)?];
                for _ in 0..*max_iter {
                    let prev = *residuals.last().unwrap();
                    w_ex = least_squares(&self.expression_basis(&w_id)?, &rhs, "identity")?;
                    residuals.push(residual(&w_id, &w_ex)?);
                    w_id = least_squares(&self.identity_basis(&w_ex)?, &rhs, "expression")?;
                    let r = residual(&w_id, &w_ex)?;
                    residuals.push(r);
                    if prev - r <= tol * prev.max(f64::MIN_POSITIVE) {
                        break;
                    }
                }
                Ok(Encoding { w_id, w_ex, residuals })
            }
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut w = Writer::new(MAGIC, VERSION);
        let meta = serde_json::to_vec(&self.meta).map_err(|e| Error::Format(e.to_string()))?;
        w.bytes(&meta);
        for n in [self.vertex_dim(), self.u_id.nrows(), self.u_ex.nrows(), self.d_id(), self.d_ex()] {
            w.usize(n);
        }
        w.f64s(self.mean.as_slice());
        w.f64s(self.core.as_slice());
        w.f64s(self.u_id.as_slice());
        w.f64s(self.u_ex.as_slice());
        w.f64s(self.lambda_id.as_slice());
        w.f64s(self.lambda_ex.as_slice());
        w.f64s(self.sv_id.as_slice());
        w.f64s(self.sv_ex.as_slice());
        Ok(w.finish())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes, MAGIC, VERSION, "bilinear model")?;
        let meta: ModelMeta = serde_json::from_slice(r.bytes()?).map_err(|e| Error::Format(format!("model metadata: {e}")))?;
        let nv = r.usize()?;
        let ni = r.usize()?;
        let ne = r.usize()?;
        let d_id = r.usize()?;
        let d_ex = r.usize()?;
        if d_id == 0 || d_id > ni || d_ex == 0 || d_ex > ne {
            return Err(Error::Format("model ranks are inconsistent".into()));
        }
        let mean = DVector::from_vec(r.f64s_exact(nv, "mean")?);
        let core = DMatrix::from_vec(nv, d_id * d_ex, r.f64s_exact(nv * d_id * d_ex, "core")?);
        let u_id = DMatrix::from_vec(ni, d_id, r.f64s_exact(ni * d_id, "u_id")?);
        let u_ex = DMatrix::from_vec(ne, d_ex, r.f64s_exact(ne * d_ex, "u_ex")?);
        let lambda_id = DVector::from_vec(r.f64s_exact(d_id, "lambda_id")?);
        let lambda_ex = DVector::from_vec(r.f64s_exact(d_ex, "lambda_ex")?);
        let sv_id = DVector::from_vec(r.f64s_exact(ni, "sv_id")?);
        let sv_ex = DVector::from_vec(r.f64s_exact(ne, "sv_ex")?);
        r.finish()?;
        Ok(Self {
            mean,
            core,
            u_id,
            u_ex,
            lambda_id,
            lambda_ex,
            sv_id,
            sv_ex,
            meta,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

/// Minimum-norm least squares; fails only when the system matrix vanishes.
fn least_squares(a: &DMatrix<f64>, b: &DVector<f64>, fixed: &str) -> Result<DVector<f64>> {
    let svd = a.clone().svd(true, true);
    let smax = svd.singular_values.max();
    if !(smax > 0.0) || smax <= 1e-300 {
        return Err(Error::Degenerate(format!("singular system: the fixed {fixed} factor is zero")));
    }
    let eps = smax * 1e-12 * a.nrows().max(a.ncols()) as f64;
    svd.solve(b, eps).map_err(|e| Error::Degenerate(e.to_string()))
}
