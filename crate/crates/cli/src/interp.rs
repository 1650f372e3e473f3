//! Decoded interpolation paths and their step-size check.

use anyhow::{bail, Result};
use morphflow_core::bilinear::BilinearModel;
use morphflow_core::fitting::{decode, encode};
use morphflow_core::flow::Flow;
use morphflow_core::latent::{interpolate, Coords, LatentCode, Space};
use nalgebra::DVector;

/// `ν = 0, h, 2h, ..., 1`, with the endpoints exact.
pub fn nu_grid(step: f64) -> Result<Vec<f64>> {
    let n = (1.0 / step).round();
    if !(step > 0.0 && step <= 1.0) || (n * step - 1.0).abs() > 1e-9 {
        bail!("interpolation step {step} does not divide 1 evenly");
    }
    let n = n as usize;
    Ok((0..=n).map(|k| if k == n { 1.0 } else { k as f64 / n as f64 }).collect())
}

/// Latent codes along the straight line from `a` to `b`.
pub fn latent_path(a: &LatentCode, b: &LatentCode, step: f64) -> Result<Vec<(f64, LatentCode)>> {
    nu_grid(step)?
        .into_iter()
        .map(|nu| Ok((nu, interpolate(a, b, nu)?)))
        .collect()
}

/// Faces along an expression path: the endpoint coefficients are encoded,
/// interpolated in latent space, decoded and reconstructed on `w_id`.
pub fn expression_path(
    model: &BilinearModel,
    flow: Option<&Flow>,
    w_id: &DVector<f64>,
    w_a: &DVector<f64>,
    w_b: &DVector<f64>,
    step: f64,
) -> Result<Vec<(f64, DVector<f64>)>> {
    let coords = if flow.is_some() { Coords::PostFlow } else { Coords::PreFlow };
    let a = LatentCode::new(encode(flow, w_a)?, Space::Expression, coords);
    let b = LatentCode::new(encode(flow, w_b)?, Space::Expression, coords);
    latent_path(&a, &b, step)?
        .into_iter()
        .map(|(nu, z)| {
            let w = decode(flow, &z.values)?;
            Ok((nu, model.reconstruct(w_id, &w)?))
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Smoothness {
    /// Largest per-vertex move between endpoints, divided by the step count.
    pub average_step: f64,
    /// Largest per-vertex move between consecutive faces.
    pub max_step: f64,
}

impl Smoothness {
    pub fn ratio(&self) -> f64 {
        if self.max_step == 0.0 {
            1.0
        } else {
            self.max_step / self.average_step
        }
    }

    pub fn is_smooth(&self, factor: f64) -> bool {
        self.ratio() < factor
    }
}

fn max_vertex_move(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    a.as_slice()
        .chunks_exact(3)
        .zip(b.as_slice().chunks_exact(3))
        .map(|(p, q)| ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2)).sqrt())
        .fold(0.0, f64::max)
}

/// Per-step moves of a face sequence (flat `xyz` vectors).
pub fn step_sizes(path: &[DVector<f64>]) -> Vec<f64> {
    path.windows(2).map(|w| max_vertex_move(&w[0], &w[1])).collect()
}

pub fn smoothness(path: &[DVector<f64>]) -> Result<Smoothness> {
    if path.len() < 2 {
        bail!("a path needs at least two faces, got {}", path.len());
    }
    let steps = step_sizes(path);
    Ok(Smoothness {
        average_step: max_vertex_move(&path[0], &path[path.len() - 1]) / steps.len() as f64,
        max_step: steps.iter().copied().fold(0.0, f64::max),
    })
}
