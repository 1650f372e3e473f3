use std::collections::VecDeque;

use nalgebra::{DMatrix, DVector};

use crate::geometry::{Mesh, Vec3};
use crate::linalg::symmetric_eigen;
use crate::{Error, Result};

/// Vertices within `rings` edge hops of `landmark`, in breadth-first order
/// (landmark first, neighbours in ascending index order).
pub fn patch_vertices(mesh: &Mesh, landmark: usize, rings: usize) -> Result<Vec<usize>> {
    patch_from_adjacency(&mesh.adjacency(), landmark, rings)
}

fn patch_from_adjacency(adj: &[Vec<usize>], landmark: usize, rings: usize) -> Result<Vec<usize>> {
    if landmark >= adj.len() {
        return Err(Error::InvalidArgument(format!(
            "landmark {landmark} out of range for {} vertices",
            adj.len()
        )));
    }
    if adj[landmark].is_empty() {
        return Err(Error::Degenerate(format!("isolated landmark {landmark}")));
    }
    let mut depth = vec![usize::MAX; adj.len()];
    let mut order = vec![landmark];
    let mut queue = VecDeque::from([landmark]);
    depth[landmark] = 0;
    while let Some(v) = queue.pop_front() {
        if depth[v] == rings {
            continue;
        }
        for &w in &adj[v] {
            if depth[w] == usize::MAX {
                depth[w] = depth[v] + 1;
                order.push(w);
                queue.push_back(w);
            }
        }
    }
    Ok(order)
}

/// Graph Laplacian of the patch induced by `rings` hops around `landmark`:
/// `-1` on patch edges, the in-patch valence on the diagonal.
pub fn patch_laplacian(mesh: &Mesh, landmark: usize, rings: usize) -> Result<(Vec<usize>, DMatrix<f64>)> {
    let adj = mesh.adjacency();
    let verts = patch_from_adjacency(&adj, landmark, rings)?;
    if verts.len() < 3 {
        return Err(Error::Degenerate(format!(
            "patch around landmark {landmark} has only {} vertices",
            verts.len()
        )));
    }
    Ok((verts.clone(), induced_laplacian(&adj, &verts)))
}

fn induced_laplacian(adj: &[Vec<usize>], verts: &[usize]) -> DMatrix<f64> {
    let n = verts.len();
    let mut local = std::collections::HashMap::with_capacity(n);
    for (k, &v) in verts.iter().enumerate() {
        local.insert(v, k);
    }
    let mut l = DMatrix::<f64>::zeros(n, n);
    for (i, &v) in verts.iter().enumerate() {
        for w in &adj[v] {
            if let Some(&j) = local.get(w) {
                l[(i, j)] = -1.0;
                l[(i, i)] += 1.0;
            }
        }
    }
    l
}

/// Grow rings around `landmark` until the patch holds at least `min_size`
/// vertices. Returns `(vertices, rings)`.
pub fn grow_patch(mesh: &Mesh, landmark: usize, min_size: usize) -> Result<(Vec<usize>, usize)> {
    let adj = mesh.adjacency();
    let mut prev = 0;
    for rings in 1.. {
        let verts = patch_from_adjacency(&adj, landmark, rings)?;
        if verts.len() >= min_size {
            return Ok((verts, rings));
        }
        if verts.len() == prev {
            return Err(Error::Degenerate(format!(
                "component around landmark {landmark} has only {} vertices, need {min_size}",
                verts.len()
            )));
        }
        prev = verts.len();
    }
    unreachable!()
}

/// The `tau` lowest eigenpairs of a patch Laplacian.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralBasis {
    /// `n x tau`, orthonormal columns.
    pub basis: DMatrix<f64>,
    /// Ascending.
    pub eigenvalues: DVector<f64>,
}

pub fn spectral_embedding(laplacian: &DMatrix<f64>, tau: usize) -> Result<SpectralBasis> {
    let n = laplacian.nrows();
    if tau == 0 || tau > n {
        return Err(Error::InvalidArgument(format!(
            "tau = {tau} must lie in 1..={n}"
        )));
    }
    let eig = symmetric_eigen(laplacian)?;
    Ok(SpectralBasis {
        basis: eig.vectors.columns(0, tau).into_owned(),
        eigenvalues: eig.values.rows(0, tau).into_owned(),
    })
}

/// Spectral basis of one landmark patch on a fixed topology.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchSpectrum {
    pub landmark: usize,
    pub rings: usize,
    pub vertices: Vec<usize>,
    pub spectrum: SpectralBasis,
}

impl PatchSpectrum {
    /// Build the patch for `landmark`, grown to at least `tau + 5` vertices.
    pub fn build(mesh: &Mesh, landmark: usize, tau: usize) -> Result<Self> {
        let (vertices, rings) = grow_patch(mesh, landmark, tau + 5)?;
        let adj = mesh.adjacency();
        let l = induced_laplacian(&adj, &vertices);
        Ok(Self {
            landmark,
            rings,
            vertices,
            spectrum: spectral_embedding(&l, tau)?,
        })
    }

    pub fn tau(&self) -> usize {
        self.spectrum.basis.ncols()
    }

    /// Patch coordinates gathered from a full mesh geometry.
    pub fn gather(&self, vertices: &[Vec3]) -> Vec<Vec3> {
        self.vertices.iter().map(|&i| vertices[i]).collect()
    }
}

/// `Phi^T v` for each coordinate channel, concatenated as x, y, z.
pub fn project_patch(spectrum: &PatchSpectrum, patch_coords: &[Vec3]) -> Result<Vec<f64>> {
    let phi = &spectrum.spectrum.basis;
    if patch_coords.len() != phi.nrows() {
        return Err(Error::Dimension(format!(
            "patch has {} vertices, got {} coordinates",
            phi.nrows(),
            patch_coords.len()
        )));
    }
    let tau = phi.ncols();
    let mut out = vec![0.0; 3 * tau];
    for ch in 0..3 {
        for j in 0..tau {
            let col = phi.column(j);
            out[ch * tau + j] = patch_coords.iter().zip(col.iter()).map(|(p, c)| p[ch] * c).sum();
        }
    }
    Ok(out)
}
