use nalgebra::Vector3;

use crate::{Error, Result};

pub type Vec3 = Vector3<f64>;

/// Shared-topology triangle mesh. Coordinates are in millimetres.
///
/// A `Mesh` is validated on construction and immutable afterwards; geometry
/// variants of the same topology are produced with [`Mesh::with_vertices`].
#[derive(Debug, Clone, PartialEq)]
pub struct Mesh {
    vertices: Vec<Vec3>,
    faces: Vec<[usize; 3]>,
    landmarks: Vec<usize>,
}

impl Mesh {
    pub fn new(vertices: Vec<Vec3>, faces: Vec<[usize; 3]>, landmarks: Vec<usize>) -> Result<Self> {
        let n = vertices.len();
        for (k, f) in faces.iter().enumerate() {
            if f.iter().any(|&i| i >= n) {
                return Err(Error::InvalidMesh(format!(
                    "face {k} references vertex out of range (vertex count {n})"
                )));
            }
            if f[0] == f[1] || f[1] == f[2] || f[0] == f[2] {
                return Err(Error::InvalidMesh(format!("face {k} is degenerate: {f:?}")));
            }
        }
        if let Some(&bad) = landmarks.iter().find(|&&l| l >= n) {
            return Err(Error::InvalidMesh(format!(
                "landmark index {bad} out of range (vertex count {n})"
            )));
        }
        if vertices.iter().any(|v| !v.iter().all(|c| c.is_finite())) {
            return Err(Error::InvalidMesh("non-finite vertex coordinate".into()));
        }
        Ok(Self {
            vertices,
            faces,
            landmarks,
        })
    }

    /// Same topology and landmarks, new vertex positions.
    pub fn with_vertices(&self, vertices: Vec<Vec3>) -> Result<Self> {
        if vertices.len() != self.vertices.len() {
            return Err(Error::Dimension(format!(
                "expected {} vertices, got {}",
                self.vertices.len(),
                vertices.len()
            )));
        }
        Mesh::new(vertices, self.faces.clone(), self.landmarks.clone())
    }

    /// Same topology, geometry given as a flat `(x1, y1, z1, x2, ...)` vector.
    pub fn with_flat(&self, flat: &[f64]) -> Result<Self> {
        self.with_vertices(unflatten(flat)?)
    }

    pub fn with_landmarks(mut self, landmarks: Vec<usize>) -> Result<Self> {
        let n = self.vertices.len();
        if let Some(&bad) = landmarks.iter().find(|&&l| l >= n) {
            return Err(Error::InvalidMesh(format!(
                "landmark index {bad} out of range (vertex count {n})"
            )));
        }
        self.landmarks = landmarks;
        Ok(self)
    }

    pub fn vertices(&self) -> &[Vec3] {
        &self.vertices
    }

    pub fn faces(&self) -> &[[usize; 3]] {
        &self.faces
    }

    pub fn landmarks(&self) -> &[usize] {
        &self.landmarks
    }

    pub fn vertex_count(&self) -> usize {
        self.vertices.len()
    }

    pub fn face_count(&self) -> usize {
        self.faces.len()
    }

    pub fn to_flat(&self) -> Vec<f64> {
        flatten(&self.vertices)
    }

    /// Axis-aligned bounding box `(min, max)`.
    pub fn bounding_box(&self) -> (Vec3, Vec3) {
        bounding_box(&self.vertices)
    }

    pub fn bbox_diagonal(&self) -> f64 {
        let (lo, hi) = self.bounding_box();
        (hi - lo).norm()
    }

    pub fn same_topology(&self, other: &Mesh) -> bool {
        self.vertices.len() == other.vertices.len() && self.faces == other.faces
    }

    /// Undirected vertex adjacency lists, sorted and deduplicated.
    pub fn adjacency(&self) -> Vec<Vec<usize>> {
        let mut adj = vec![Vec::new(); self.vertices.len()];
        for f in &self.faces {
            for (a, b) in [(f[0], f[1]), (f[1], f[2]), (f[2], f[0])] {
                adj[a].push(b);
                adj[b].push(a);
            }
        }
        for list in &mut adj {
            list.sort_unstable();
            list.dedup();
        }
        adj
    }

    /// Unit face normals (zero for zero-area faces).
    pub fn face_normals(&self) -> Vec<Vec3> {
        self.faces
            .iter()
            .map(|f| {
                let a = self.vertices[f[0]];
                let n = (self.vertices[f[1]] - a).cross(&(self.vertices[f[2]] - a));
                let len = n.norm();
                if len > 0.0 {
                    n / len
                } else {
                    Vec3::zeros()
                }
            })
            .collect()
    }

    /// Area-weighted unit vertex normals.
    pub fn vertex_normals(&self) -> Vec<Vec3> {
        let mut acc = vec![Vec3::zeros(); self.vertices.len()];
        for f in &self.faces {
            let a = self.vertices[f[0]];
            let n = (self.vertices[f[1]] - a).cross(&(self.vertices[f[2]] - a));
            for &i in f {
                acc[i] += n;
            }
        }
        acc.into_iter()
            .map(|n| {
                let len = n.norm();
                if len > 0.0 {
                    n / len
                } else {
                    n
                }
            })
            .collect()
    }
}

pub(crate) fn flatten(points: &[Vec3]) -> Vec<f64> {
    points.iter().flat_map(|p| [p.x, p.y, p.z]).collect()
}

pub(crate) fn unflatten(flat: &[f64]) -> Result<Vec<Vec3>> {
    if flat.len() % 3 != 0 {
        return Err(Error::Dimension(format!(
            "flat geometry length {} is not a multiple of 3",
            flat.len()
        )));
    }
    Ok(flat
        .chunks_exact(3)
        .map(|c| Vec3::new(c[0], c[1], c[2]))
        .collect())
}

pub(crate) fn bounding_box(points: &[Vec3]) -> (Vec3, Vec3) {
    let mut lo = Vec3::repeat(f64::INFINITY);
    let mut hi = Vec3::repeat(f64::NEG_INFINITY);
    for p in points {
        lo = lo.inf(p);
        hi = hi.sup(p);
    }
    (lo, hi)
}
