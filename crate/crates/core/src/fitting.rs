//! 3D-3D fitting of identity and expression latents to a target mesh.
//!
//! The energy is `γ1·E_verts + γ2·E_prior` with
//! `E_verts = ‖C ×₂ w_id ×₃ w_ex − (x − μ)‖²`, `w = f⁻¹(z)` per space, and
//! `E_prior = Σ z_id,i²/λ_id,i + Σ z_ex,j²/λ_ex,j`. Blocks are minimized in
//! turn. Each block step takes a Levenberg-Marquardt direction, falls back
//! to steepest descent when no damping level works, and is accepted only
//! under an Armijo backtracking test. Each sweep ends with one coupled
//! step over both blocks, which removes the slow zigzag of pure
//! alternation on the bilinear coupling, and a line search along the
//! rescaling `(c·w_id, w_ex/c)` that leaves `E_verts` unchanged and moves
//! along the flat valley of the product. No accepted move raises the
//! energy.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::bilinear::BilinearModel;
use crate::flow::Flow;
use crate::geometry::{procrustes_points, Mesh, RigidTransform, Vec3};
use crate::latent::{Coords, LatentCode, Space};
use crate::{Error, Result};

const ARMIJO_C: f64 = 1e-4;
const MAX_HALVINGS: usize = 40;
const DAMPED_HALVINGS: usize = 4;
const DAMPING_TRIES: usize = 12;
const MIN_DAMPING: f64 = 1e-12;
const GAUGE_RANGE: f64 = 3.0;
const GAUGE_STEPS: usize = 40;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitConfig {
    pub gamma1: f64,
    pub gamma2: f64,
    pub max_iterations: usize,
    pub inner_iterations: usize,
    /// Relative energy decrease per outer iteration below which the fit stops.
    pub tolerance: f64,
    /// Training expression whose code initializes `z_ex`.
    pub neutral_expression: usize,
    /// Rigidly align the target to the model mean before fitting.
    pub align: bool,
    /// Keep `z_ex` at its initial value (identity-only fit).
    pub freeze_expression: bool,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            gamma1: 0.98,
            gamma2: 0.02,
            max_iterations: 200,
            inner_iterations: 3,
            tolerance: 1e-12,
            neutral_expression: 0,
            align: true,
            freeze_expression: false,
        }
    }
}

impl FitConfig {
    /// Reports every problem at once.
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if !(self.gamma1 >= 0.0 && self.gamma2 >= 0.0) {
            problems.push(format!("weights must be nonnegative, got ({}, {})", self.gamma1, self.gamma2));
        }
        if (self.gamma1 + self.gamma2 - 1.0).abs() > 1e-12 {
            problems.push(format!("gamma1 + gamma2 must equal 1, got {}", self.gamma1 + self.gamma2));
        }
        if self.max_iterations == 0 {
            problems.push("max_iterations must be positive".into());
        }
        if self.inner_iterations == 0 {
            problems.push("inner_iterations must be positive".into());
        }
        if !(self.tolerance >= 0.0) {
            problems.push(format!("tolerance must be nonnegative, got {}", self.tolerance));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidArgument(problems.join("; ")))
        }
    }

    /// Weights `(γ1, γ2)` with the sum forced to one, for exact-recovery runs.
    pub fn with_prior_weight(mut self, gamma2: f64) -> Self {
        self.gamma2 = gamma2;
        self.gamma1 = 1.0 - gamma2;
        self
    }
}

/// Flows for the two spaces; `None` is the identity map (`z = w`).
#[derive(Debug, Clone, Copy, Default)]
pub struct Flows<'a> {
    pub identity: Option<&'a Flow>,
    pub expression: Option<&'a Flow>,
}

impl<'a> Flows<'a> {
    pub fn new(identity: &'a Flow, expression: &'a Flow) -> Self {
        Self {
            identity: Some(identity),
            expression: Some(expression),
        }
    }

    pub fn none() -> Self {
        Self::default()
    }
}

fn check_flow(flow: Option<&Flow>, dim: usize, what: &str) -> Result<()> {
    match flow {
        Some(f) if f.dim() != dim => Err(Error::Dimension(format!("{what} flow has dimension {}, model rank {dim}", f.dim()))),
        _ => Ok(()),
    }
}

pub fn decode(flow: Option<&Flow>, z: &DVector<f64>) -> Result<DVector<f64>> {
    match flow {
        Some(f) => f.inverse(z),
        None => Ok(z.clone()),
    }
}

pub fn encode(flow: Option<&Flow>, w: &DVector<f64>) -> Result<DVector<f64>> {
    match flow {
        Some(f) => Ok(f.forward(w)?.0),
        None => Ok(w.clone()),
    }
}

/// `w = f⁻¹(z)` and `∂w/∂z`, the inverse of the forward Jacobian at `w`.
fn decode_jacobian(flow: Option<&Flow>, z: &DVector<f64>) -> Result<(DVector<f64>, DMatrix<f64>)> {
    match flow {
        Some(f) => {
            let w = f.inverse(z)?;
            let j = f
                .jacobian(&w)?
                .try_inverse()
                .ok_or_else(|| Error::Degenerate("flow Jacobian is singular".into()))?;
            Ok((w, j))
        }
        None => Ok((z.clone(), DMatrix::identity(z.len(), z.len()))),
    }
}

/// `1/λ` with entries below `1e-10·max λ` floored.
fn inverse_variances(lambda: &DVector<f64>) -> DVector<f64> {
    let floor = (1e-10 * lambda.max()).max(f64::MIN_POSITIVE);
    lambda.map(|l| 1.0 / l.max(floor))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EnergyParts {
    pub total: f64,
    pub verts: f64,
    pub prior: f64,
}

struct Problem<'a> {
    model: &'a BilinearModel,
    flows: Flows<'a>,
    /// `x − μ`.
    rhs: DVector<f64>,
    inv_id: DVector<f64>,
    inv_ex: DVector<f64>,
    gamma1: f64,
    gamma2: f64,
}

impl<'a> Problem<'a> {
    fn new(model: &'a BilinearModel, flows: Flows<'a>, target: &DVector<f64>, config: &FitConfig) -> Result<Self> {
        config.validate()?;
        if target.len() != model.vertex_dim() {
            return Err(Error::Dimension(format!(
                "target has {} values, model {}",
                target.len(),
                model.vertex_dim()
            )));
        }
        check_flow(flows.identity, model.d_id(), "identity")?;
        check_flow(flows.expression, model.d_ex(), "expression")?;
        Ok(Self {
            model,
            flows,
            rhs: target - model.mean(),
            inv_id: inverse_variances(model.lambda_id()),
            inv_ex: inverse_variances(model.lambda_ex()),
            gamma1: config.gamma1,
            gamma2: config.gamma2,
        })
    }

    fn energy(&self, z_id: &DVector<f64>, z_ex: &DVector<f64>) -> Result<EnergyParts> {
        let w_id = decode(self.flows.identity, z_id)?;
        let w_ex = decode(self.flows.expression, z_ex)?;
        let verts = (self.model.offset(&w_id, &w_ex)? - &self.rhs).norm_squared();
        let prior = weighted_square(z_id, &self.inv_id) + weighted_square(z_ex, &self.inv_ex);
        let total = self.gamma1 * verts + self.gamma2 * prior;
        if !total.is_finite() {
            return Err(Error::NonFinite("fitting energy".into()));
        }
        Ok(EnergyParts { total, verts, prior })
    }

    /// Residual Jacobian `G = ∂(offset)/∂z_block` and the energy gradient.
    fn linearize(&self, z_id: &DVector<f64>, z_ex: &DVector<f64>, block: Block) -> Result<Linearization> {
        let (w_id, j_id) = decode_jacobian(self.flows.identity, z_id)?;
        let (w_ex, j_ex) = decode_jacobian(self.flows.expression, z_ex)?;
        let r = self.model.offset(&w_id, &w_ex)? - &self.rhs;
        let g_id = || -> Result<DMatrix<f64>> { Ok(self.model.identity_basis(&w_ex)? * &j_id) };
        let g_ex = || -> Result<DMatrix<f64>> { Ok(self.model.expression_basis(&w_id)? * &j_ex) };
        let g_mat = match block {
            Block::Identity => g_id()?,
            Block::Expression => g_ex()?,
            Block::Joint => {
                let (a, b) = (g_id()?, g_ex()?);
                let mut g = DMatrix::zeros(a.nrows(), a.ncols() + b.ncols());
                g.columns_mut(0, a.ncols()).copy_from(&a);
                g.columns_mut(a.ncols(), b.ncols()).copy_from(&b);
                g
            }
        };
        let z = self.block_values(z_id, z_ex, block);
        let inv = self.block_values(&self.inv_id, &self.inv_ex, block);
        let grad = (g_mat.tr_mul(&r) * self.gamma1 + z.component_mul(&inv) * self.gamma2) * 2.0;
        Ok(Linearization { g_mat, grad, z, inv })
    }

    fn gradient(&self, z_id: &DVector<f64>, z_ex: &DVector<f64>) -> Result<(DVector<f64>, DVector<f64>)> {
        let g = self.linearize(z_id, z_ex, Block::Joint)?.grad;
        let d = z_id.len();
        Ok((g.rows(0, d).into_owned(), g.rows(d, g.len() - d).into_owned()))
    }

    fn block_values(&self, id: &DVector<f64>, ex: &DVector<f64>, block: Block) -> DVector<f64> {
        match block {
            Block::Identity => id.clone(),
            Block::Expression => ex.clone(),
            Block::Joint => DVector::from_iterator(id.len() + ex.len(), id.iter().chain(ex.iter()).copied()),
        }
    }

    fn with_block(&self, z_id: &DVector<f64>, z_ex: &DVector<f64>, block: Block, z: DVector<f64>) -> (DVector<f64>, DVector<f64>) {
        match block {
            Block::Identity => (z, z_ex.clone()),
            Block::Expression => (z_id.clone(), z),
            Block::Joint => (z.rows(0, z_id.len()).into_owned(), z.rows(z_id.len(), z_ex.len()).into_owned()),
        }
    }

    /// One accepted descent step on `block`, or `None` when no decrease is
    /// found. `damping` is the Levenberg-Marquardt factor on `diag(H)`,
    /// adapted in place: shrunk after a full step, grown after a rejection.
    fn step(
        &self,
        z_id: &DVector<f64>,
        z_ex: &DVector<f64>,
        e0: f64,
        block: Block,
        damping: &mut f64,
    ) -> Result<Option<(DVector<f64>, DVector<f64>, f64)>> {
        let lin = self.linearize(z_id, z_ex, block)?;
        if lin.grad.iter().all(|&g| g == 0.0) {
            return Ok(None);
        }
        let mut h = lin.g_mat.tr_mul(&lin.g_mat) * (2.0 * self.gamma1);
        for i in 0..h.nrows() {
            h[(i, i)] += 2.0 * self.gamma2 * lin.inv[i];
        }
        let ridge = 1e-12 * (h.trace() / h.nrows() as f64).max(f64::MIN_POSITIVE);
        for i in 0..h.nrows() {
            h[(i, i)] += ridge;
        }
        let try_direction = |d: &DVector<f64>, halvings: usize| -> Option<(DVector<f64>, DVector<f64>, f64, usize)> {
            let slope = lin.grad.dot(d);
            if !(slope < 0.0) || d.iter().any(|v| !v.is_finite()) {
                return None;
            }
            let mut t = 1.0;
            for k in 0..halvings {
                let (a, b) = self.with_block(z_id, z_ex, block, &lin.z + d * t);
                // a non-finite inverse flow counts as a failed trial
                if let Ok(e) = self.energy(&a, &b) {
                    if e.total <= e0 + ARMIJO_C * t * slope && e.total < e0 {
                        return Some((a, b, e.total, k));
                    }
                }
                t *= 0.5;
            }
            None
        };

        for _ in 0..DAMPING_TRIES {
            let mut hd = h.clone();
            for i in 0..hd.nrows() {
                hd[(i, i)] *= 1.0 + *damping;
            }
            if let Some(d) = hd.cholesky().map(|c| c.solve(&-&lin.grad)) {
                if let Some((a, b, e, k)) = try_direction(&d, DAMPED_HALVINGS) {
                    if k == 0 {
                        *damping = (*damping / 3.0).max(MIN_DAMPING);
                    }
                    return Ok(Some((a, b, e)));
                }
            }
            *damping = (*damping * 10.0).max(MIN_DAMPING);
        }
        // steepest descent scaled by the curvature along the gradient
        let curv = lin.grad.dot(&(&h * &lin.grad));
        let sd = if curv > 0.0 {
            -&lin.grad * (lin.grad.norm_squared() / curv)
        } else {
            -&lin.grad
        };
        Ok(try_direction(&sd, MAX_HALVINGS).map(|(a, b, e, _)| (a, b, e)))
    }
}

impl Problem<'_> {
    /// Moves along the bilinear gauge `(c·w_id, w_ex/c)`, which leaves the
    /// reconstruction unchanged, to the scale that minimizes the total
    /// energy. Golden-section search over `ln c`.
    fn rebalance(&self, z_id: &DVector<f64>, z_ex: &DVector<f64>, e0: f64) -> Option<(DVector<f64>, DVector<f64>, f64)> {
        let w_id = decode(self.flows.identity, z_id).ok()?;
        let w_ex = decode(self.flows.expression, z_ex).ok()?;
        let at = |s: f64| -> Option<(DVector<f64>, DVector<f64>, f64)> {
            let c = s.exp();
            let a = encode(self.flows.identity, &(&w_id * c)).ok()?;
            let b = encode(self.flows.expression, &(&w_ex / c)).ok()?;
            let e = self.energy(&a, &b).ok()?.total;
            Some((a, b, e))
        };
        let cost = |s: f64| at(s).map_or(f64::INFINITY, |x| x.2);
        let g = (5f64.sqrt() - 1.0) / 2.0;
        let (mut lo, mut hi) = (-GAUGE_RANGE, GAUGE_RANGE);
        let mut x1 = hi - g * (hi - lo);
        let mut x2 = lo + g * (hi - lo);
        let (mut f1, mut f2) = (cost(x1), cost(x2));
        for _ in 0..GAUGE_STEPS {
            if f1 <= f2 {
                hi = x2;
                x2 = x1;
                f2 = f1;
                x1 = hi - g * (hi - lo);
                f1 = cost(x1);
            } else {
                lo = x1;
                x1 = x2;
                f1 = f2;
                x2 = lo + g * (hi - lo);
                f2 = cost(x2);
            }
        }
        let best = at(if f1 <= f2 { x1 } else { x2 })?;
        (best.2 < e0).then_some(best)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Block {
    Identity,
    Expression,
    Joint,
}

struct Linearization {
    g_mat: DMatrix<f64>,
    grad: DVector<f64>,
    z: DVector<f64>,
    inv: DVector<f64>,
}

fn weighted_square(z: &DVector<f64>, w: &DVector<f64>) -> f64 {
    z.iter().zip(w.iter()).map(|(a, b)| a * a * b).sum()
}

/// Energy terms at `(z_id, z_ex)` for a flattened `3N` target.
pub fn energy(
    model: &BilinearModel,
    flows: Flows,
    z_id: &DVector<f64>,
    z_ex: &DVector<f64>,
    target: &DVector<f64>,
    config: &FitConfig,
) -> Result<EnergyParts> {
    let p = Problem::new(model, flows, target, config)?;
    check_codes(model, z_id, z_ex)?;
    p.energy(z_id, z_ex)
}

/// Gradient of the total energy with respect to `(z_id, z_ex)`.
pub fn energy_gradient(
    model: &BilinearModel,
    flows: Flows,
    z_id: &DVector<f64>,
    z_ex: &DVector<f64>,
    target: &DVector<f64>,
    config: &FitConfig,
) -> Result<(DVector<f64>, DVector<f64>)> {
    let p = Problem::new(model, flows, target, config)?;
    check_codes(model, z_id, z_ex)?;
    p.gradient(z_id, z_ex)
}

fn check_codes(model: &BilinearModel, z_id: &DVector<f64>, z_ex: &DVector<f64>) -> Result<()> {
    if z_id.len() != model.d_id() || z_ex.len() != model.d_ex() {
        return Err(Error::Dimension(format!(
            "codes ({}, {}) do not match model ranks ({}, {})",
            z_id.len(),
            z_ex.len(),
            model.d_id(),
            model.d_ex()
        )));
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct FitResult {
    pub z_id: LatentCode,
    pub z_ex: LatentCode,
    pub w_id: DVector<f64>,
    pub w_ex: DVector<f64>,
    /// Target after rigid alignment to the model mean.
    pub aligned_target: Mesh,
    pub alignment: RigidTransform,
    pub reconstruction: Mesh,
    pub per_vertex_error: Vec<f64>,
    /// Energy at the start and after every outer iteration.
    pub energy_trace: Vec<f64>,
    pub energy: EnergyParts,
    pub converged: bool,
}

fn points(flat: &[f64]) -> Vec<Vec3> {
    flat.chunks_exact(3).map(|c| Vec3::new(c[0], c[1], c[2])).collect()
}

/// Starting codes: `z_id = 0` and `z_ex` the encoded neutral expression.
pub fn initial_codes(model: &BilinearModel, flows: Flows, config: &FitConfig) -> Result<(DVector<f64>, DVector<f64>)> {
    if config.neutral_expression >= model.u_ex().nrows() {
        return Err(Error::InvalidArgument(format!(
            "neutral expression {} outside the {} training expressions",
            config.neutral_expression,
            model.u_ex().nrows()
        )));
    }
    let z_ex = encode(flows.expression, &model.expression_code(config.neutral_expression))?;
    Ok((DVector::zeros(model.d_id()), z_ex))
}

pub fn fit(model: &BilinearModel, flows: Flows, target: &Mesh, config: &FitConfig) -> Result<FitResult> {
    if target.vertex_count() != model.vertex_count() {
        return Err(Error::Dimension(format!(
            "target has {} vertices, model {}",
            target.vertex_count(),
            model.vertex_count()
        )));
    }
    let (aligned_target, alignment) = if config.align {
        let mean = points(model.mean().as_slice());
        let xf = procrustes_points(target.vertices(), &mean, false)?;
        let moved = target.vertices().iter().map(|p| xf.apply(p)).collect();
        (target.with_vertices(moved)?, xf)
    } else {
        (target.clone(), RigidTransform::identity())
    };
    let flat = DVector::from_vec(aligned_target.to_flat());
    let problem = Problem::new(model, flows, &flat, config)?;
    let (mut z_id, mut z_ex) = initial_codes(model, flows, config)?;

    let mut e = problem.energy(&z_id, &z_ex)?.total;
    let mut trace = vec![e];
    let mut converged = false;
    let mut blocks = vec![Block::Identity];
    if !config.freeze_expression {
        blocks.push(Block::Expression);
    }
    let mut damping = [MIN_DAMPING; 3];
    for _ in 0..config.max_iterations {
        let prev = e;
        for &block in &blocks {
            for _ in 0..config.inner_iterations {
                match problem.step(&z_id, &z_ex, e, block, &mut damping[block as usize])? {
                    Some((a, b, next)) => {
                        z_id = a;
                        z_ex = b;
                        e = next;
                    }
                    None => break,
                }
            }
        }
        if !config.freeze_expression {
            if let Some((a, b, next)) = problem.step(&z_id, &z_ex, e, Block::Joint, &mut damping[2])? {
                z_id = a;
                z_ex = b;
                e = next;
            }
            if let Some((a, b, next)) = problem.rebalance(&z_id, &z_ex, e) {
                z_id = a;
                z_ex = b;
                e = next;
            }
        }
        trace.push(e);
        if prev - e <= config.tolerance * prev {
            converged = true;
            break;
        }
    }

    let parts = problem.energy(&z_id, &z_ex)?;
    let w_id = decode(flows.identity, &z_id)?;
    let w_ex = decode(flows.expression, &z_ex)?;
    let recon = model.reconstruct(&w_id, &w_ex)?;
    let reconstruction = target.with_flat(recon.as_slice())?;
    let per_vertex_error = per_vertex_error(&reconstruction, &aligned_target)?;
    let coords = |f: Option<&Flow>| if f.is_some() { Coords::PostFlow } else { Coords::PreFlow };
    Ok(FitResult {
        z_id: LatentCode::new(z_id, Space::Identity, coords(flows.identity)),
        z_ex: LatentCode::new(z_ex, Space::Expression, coords(flows.expression)),
        w_id,
        w_ex,
        aligned_target,
        alignment,
        reconstruction,
        per_vertex_error,
        energy_trace: trace,
        energy: parts,
        converged,
    })
}

/// Euclidean distance between corresponding vertices.
pub fn per_vertex_error(reconstruction: &Mesh, target: &Mesh) -> Result<Vec<f64>> {
    if reconstruction.vertex_count() != target.vertex_count() {
        return Err(Error::Dimension(format!(
            "vertex count mismatch: {} vs {}",
            reconstruction.vertex_count(),
            target.vertex_count()
        )));
    }
    Ok(reconstruction
        .vertices()
        .iter()
        .zip(target.vertices())
        .map(|(a, b)| (a - b).norm())
        .collect())
}

/// Mean, population standard deviation, maximum and root mean square.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ErrorSummary {
    pub mean: f64,
    pub std: f64,
    pub max: f64,
    pub rms: f64,
}

impl ErrorSummary {
    pub fn of(errors: &[f64]) -> Result<Self> {
        if errors.is_empty() {
            return Err(Error::InvalidArgument("no errors to summarize".into()));
        }
        let n = errors.len() as f64;
        let mean = errors.iter().sum::<f64>() / n;
        let var = errors.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / n;
        let max = errors.iter().copied().fold(0.0, f64::max);
        let rms = (errors.iter().map(|e| e * e).sum::<f64>() / n).sqrt();
        Ok(Self {
            mean,
            std: var.sqrt(),
            max,
            rms,
        })
    }
}
