//! Uniform spatial grid over triangles for exact closest-triangle queries.

use super::closest::{closest_point_on_triangle, ClosestPoint};
use crate::geometry::{Mesh, Vec3};

/// Bucket grid over triangle bounding boxes.
///
/// Queries expand cubic shells of cells around the query cell and stop once
/// every unvisited cell is strictly farther than the best hit, so the answer
/// equals an exhaustive scan (including the lowest-index tie rule).
#[derive(Debug, Clone)]
pub struct TriangleGrid<'a> {
    mesh: &'a Mesh,
    origin: Vec3,
    cell: f64,
    dims: [usize; 3],
    cells: Vec<Vec<u32>>,
}

impl<'a> TriangleGrid<'a> {
    pub fn new(mesh: &'a Mesh) -> Self {
        let (lo, hi) = mesh.bounding_box();
        let extent = (hi - lo).map(|e| e.max(1e-12));
        let f = mesh.face_count().max(1) as f64;
        let volume = extent.x * extent.y * extent.z;
        // aim for roughly one triangle per cell, bounded on each axis
        let mut cell = (volume / f).cbrt();
        let longest = extent.max();
        cell = cell.max(longest / 128.0).max(1e-12);
        let dims = [
            ((extent.x / cell).ceil() as usize).clamp(1, 256),
            ((extent.y / cell).ceil() as usize).clamp(1, 256),
            ((extent.z / cell).ceil() as usize).clamp(1, 256),
        ];
        let cell = (0..3)
            .map(|a| extent[a] / dims[a] as f64)
            .fold(0.0f64, f64::max)
            .max(1e-12);
        let mut cells = vec![Vec::new(); dims[0] * dims[1] * dims[2]];
        let v = mesh.vertices();
        let mut grid = Self {
            mesh,
            origin: lo,
            cell,
            dims,
            cells: Vec::new(),
        };
        for (fi, f) in mesh.faces().iter().enumerate() {
            let tlo = v[f[0]].inf(&v[f[1]]).inf(&v[f[2]]);
            let thi = v[f[0]].sup(&v[f[1]]).sup(&v[f[2]]);
            let a = grid.cell_of(&tlo);
            let b = grid.cell_of(&thi);
            for x in a[0]..=b[0] {
                for y in a[1]..=b[1] {
                    for z in a[2]..=b[2] {
                        cells[grid.index([x, y, z])].push(fi as u32);
                    }
                }
            }
        }
        grid.cells = cells;
        grid
    }

    fn cell_of(&self, p: &Vec3) -> [usize; 3] {
        let mut out = [0usize; 3];
        for a in 0..3 {
            let t = ((p[a] - self.origin[a]) / self.cell).floor();
            out[a] = if t < 0.0 { 0 } else { (t as usize).min(self.dims[a] - 1) };
        }
        out
    }

    fn index(&self, c: [usize; 3]) -> usize {
        (c[2] * self.dims[1] + c[1]) * self.dims[0] + c[0]
    }

    /// Closest triangle to `p`: `(face index, closest point)`. Equidistant
    /// triangles resolve to the lowest face index.
    pub fn closest(&self, p: &Vec3) -> Option<(usize, ClosestPoint)> {
        if self.mesh.face_count() == 0 {
            return None;
        }
        let v = self.mesh.vertices();
        let faces = self.mesh.faces();
        let home = self.cell_of(p);
        let mut seen = vec![false; faces.len()];
        let mut best: Option<(usize, ClosestPoint)> = None;
        let max_r = *self.dims.iter().max().unwrap();
        for r in 0..=max_r {
            let lo: [usize; 3] = std::array::from_fn(|a| home[a].saturating_sub(r));
            let hi: [usize; 3] = std::array::from_fn(|a| (home[a] + r).min(self.dims[a] - 1));
            for x in lo[0]..=hi[0] {
                for y in lo[1]..=hi[1] {
                    for z in lo[2]..=hi[2] {
                        let shell = [x, y, z]
                            .iter()
                            .zip(home.iter())
                            .map(|(&c, &h)| c.abs_diff(h))
                            .max()
                            .unwrap();
                        if shell != r {
                            continue;
                        }
                        for &fi in &self.cells[self.index([x, y, z])] {
                            let fi = fi as usize;
                            if seen[fi] {
                                continue;
                            }
                            seen[fi] = true;
                            let f = faces[fi];
                            let cp = closest_point_on_triangle(p, &v[f[0]], &v[f[1]], &v[f[2]]);
                            let better = match &best {
                                None => true,
                                Some((bi, b)) => cp.dist2 < b.dist2 || (cp.dist2 == b.dist2 && fi < *bi),
                            };
                            if better {
                                best = Some((fi, cp));
                            }
                        }
                    }
                }
            }
            // lower bound on the distance to any cell outside the visited block
            let mut bound = f64::INFINITY;
            for a in 0..3 {
                if lo[a] > 0 {
                    let face = self.origin[a] + lo[a] as f64 * self.cell;
                    bound = bound.min((p[a] - face).max(0.0));
                }
                if hi[a] + 1 < self.dims[a] {
                    let face = self.origin[a] + (hi[a] + 1) as f64 * self.cell;
                    bound = bound.min((face - p[a]).max(0.0));
                }
            }
            if bound.is_infinite() {
                break;
            }
            if let Some((_, b)) = &best {
                if bound * bound > b.dist2 {
                    break;
                }
            }
        }
        best
    }
}
