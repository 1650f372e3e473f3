//! Bilateral symmetry maps and the mirror / symmetrize augmentations.
//!
//! Sidecar format: one line per pair `i j` (listed once, either order) and
//! `i i` for midline vertices. An optional line `plane nx ny nz offset`
//! sets the reflection plane `n . p = offset`; the default is `x = 0`.

use std::fmt::Write as _;
use std::path::Path;

use super::mesh::{Mesh, Vec3};
use crate::fsutil::write_atomic;
use crate::{Error, Result};

/// Reflection plane `normal . p = offset` with unit `normal`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Plane {
    pub normal: Vec3,
    pub offset: f64,
}

impl Plane {
    pub fn new(normal: Vec3, offset: f64) -> Result<Self> {
        let len = normal.norm();
        if !(len > 0.0) {
            return Err(Error::InvalidArgument("plane normal must be non-zero".into()));
        }
        Ok(Self {
            normal: normal / len,
            offset: offset / len,
        })
    }

    pub fn yz() -> Self {
        Self {
            normal: Vec3::x(),
            offset: 0.0,
        }
    }

    pub fn reflect(&self, p: &Vec3) -> Vec3 {
        p - self.normal * (2.0 * (self.normal.dot(p) - self.offset))
    }
}

/// Involutive vertex pairing across a reflection plane.
#[derive(Debug, Clone, PartialEq)]
pub struct SymmetryMap {
    partner: Vec<usize>,
    plane: Plane,
}

impl SymmetryMap {
    /// Build from explicit pairs; `(i, i)` marks a midline vertex. Every
    /// vertex in `0..n` must appear exactly once.
    pub fn from_pairs(n: usize, pairs: &[(usize, usize)], plane: Plane) -> Result<Self> {
        let mut partner = vec![usize::MAX; n];
        for &(a, b) in pairs {
            if a >= n || b >= n {
                return Err(Error::InvalidArgument(format!(
                    "symmetry pair ({a}, {b}) out of range for {n} vertices"
                )));
            }
            if partner[a] != usize::MAX || (a != b && partner[b] != usize::MAX) {
                return Err(Error::InvalidArgument(format!(
                    "vertex in pair ({a}, {b}) already paired"
                )));
            }
            partner[a] = b;
            partner[b] = a;
        }
        let missing: Vec<usize> = (0..n).filter(|&i| partner[i] == usize::MAX).collect();
        if !missing.is_empty() {
            return Err(Error::InvalidArgument(format!(
                "incomplete symmetry map: {} vertices unpaired (first: {:?})",
                missing.len(),
                &missing[..missing.len().min(8)]
            )));
        }
        Ok(Self { partner, plane })
    }

    pub fn partner(&self, i: usize) -> usize {
        self.partner[i]
    }

    pub fn len(&self) -> usize {
        self.partner.len()
    }

    pub fn is_empty(&self) -> bool {
        self.partner.is_empty()
    }

    pub fn plane(&self) -> Plane {
        self.plane
    }

    pub fn pairs(&self) -> Vec<(usize, usize)> {
        (0..self.partner.len())
            .filter(|&i| i <= self.partner[i])
            .map(|i| (i, self.partner[i]))
            .collect()
    }

    pub fn load(path: &Path, n: usize) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut pairs = Vec::new();
        let mut plane = Plane::yz();
        for (k, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let bad = || Error::Parse {
                path: path.to_path_buf(),
                line: k + 1,
                msg: format!("bad symmetry line '{line}'"),
            };
            let toks: Vec<&str> = line.split_whitespace().collect();
            if toks[0] == "plane" {
                let v: Vec<f64> = toks[1..]
                    .iter()
                    .map(|t| t.parse::<f64>())
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|_| bad())?;
                if v.len() != 4 {
                    return Err(bad());
                }
                plane = Plane::new(Vec3::new(v[0], v[1], v[2]), v[3])?;
                continue;
            }
            if toks.len() != 2 {
                return Err(bad());
            }
            let a = toks[0].parse::<usize>().map_err(|_| bad())?;
            let b = toks[1].parse::<usize>().map_err(|_| bad())?;
            pairs.push((a, b));
        }
        Self::from_pairs(n, &pairs, plane)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut s = String::from("# vertex symmetry pairs; 'i i' marks a midline vertex\n");
        let p = self.plane;
        writeln!(s, "plane {:?} {:?} {:?} {:?}", p.normal.x, p.normal.y, p.normal.z, p.offset).unwrap();
        for (a, b) in self.pairs() {
            writeln!(s, "{a} {b}").unwrap();
        }
        write_atomic(path, s.as_bytes())
    }

    fn check(&self, mesh: &Mesh) -> Result<()> {
        if self.partner.len() != mesh.vertex_count() {
            return Err(Error::InvalidArgument(format!(
                "incomplete symmetry map: covers {} of {} vertices",
                self.partner.len(),
                mesh.vertex_count()
            )));
        }
        Ok(())
    }
}

/// Vertex `i` of the output is the reflection of vertex `sym(i)` of the input.
pub fn mirror(mesh: &Mesh, sym: &SymmetryMap) -> Result<Mesh> {
    sym.check(mesh)?;
    let v = mesh.vertices();
    let out = (0..v.len())
        .map(|i| sym.plane.reflect(&v[sym.partner(i)]))
        .collect();
    mesh.with_vertices(out)
}

/// Per-vertex average of the mesh and its mirror; exactly plane-symmetric.
pub fn symmetrize(mesh: &Mesh, sym: &SymmetryMap) -> Result<Mesh> {
    sym.check(mesh)?;
    let v = mesh.vertices();
    let mut out = vec![Vec3::zeros(); v.len()];
    for i in 0..v.len() {
        let j = sym.partner(i);
        if j < i {
            continue;
        }
        let a = (v[i] + sym.plane.reflect(&v[j])) * 0.5;
        out[i] = a;
        out[j] = sym.plane.reflect(&a);
    }
    mesh.with_vertices(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pair_mesh(a: Vec3, b: Vec3) -> (Mesh, SymmetryMap) {
        let m = Mesh::new(vec![a, b, Vec3::new(0.0, 5.0, 1.0)], vec![[0, 1, 2]], vec![]).unwrap();
        let sym = SymmetryMap::from_pairs(3, &[(0, 1), (2, 2)], Plane::yz()).unwrap();
        (m, sym)
    }

    #[test]
    fn mirror_swaps_partners() {
        let (m, sym) = pair_mesh(Vec3::new(1.0, 2.0, 3.0), Vec3::new(-1.0, 2.0, 4.0));
        let out = mirror(&m, &sym).unwrap();
        assert_eq!(out.vertices()[0], Vec3::new(1.0, 2.0, 4.0));
        assert_eq!(out.vertices()[1], Vec3::new(-1.0, 2.0, 3.0));
        assert_eq!(out.faces(), m.faces());
    }

    #[test]
    fn mirror_fixes_symmetric_mesh() {
        let (m, sym) = pair_mesh(Vec3::new(1.0, 2.0, 3.0), Vec3::new(-1.0, 2.0, 3.0));
        let out = mirror(&m, &sym).unwrap();
        for (a, b) in out.vertices().iter().zip(m.vertices()) {
            assert!((a - b).amax() < 1e-9);
        }
    }

    #[test]
    fn symmetrize_averages_reflections() {
        let (m, sym) = pair_mesh(Vec3::new(1.0, 0.0, 0.0), Vec3::new(-3.0, 0.0, 0.0));
        let out = symmetrize(&m, &sym).unwrap();
        assert_eq!(out.vertices()[0], Vec3::new(2.0, 0.0, 0.0));
        assert_eq!(out.vertices()[1], Vec3::new(-2.0, 0.0, 0.0));
    }

    #[test]
    fn incomplete_map_is_rejected() {
        let err = SymmetryMap::from_pairs(3, &[(0, 1)], Plane::yz()).unwrap_err();
        assert!(err.to_string().contains("incomplete symmetry map"));
        let (m, _) = pair_mesh(Vec3::x(), -Vec3::x());
        let short = SymmetryMap::from_pairs(2, &[(0, 1)], Plane::yz()).unwrap();
        assert!(mirror(&m, &short).is_err());
    }

    #[test]
    fn sidecar_round_trip() {
        let sym = SymmetryMap::from_pairs(
            4,
            &[(0, 3), (1, 1), (2, 2)],
            Plane::new(Vec3::new(0.0, 2.0, 0.0), 1.0).unwrap(),
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.sym");
        sym.save(&p).unwrap();
        assert_eq!(SymmetryMap::load(&p, 4).unwrap(), sym);
    }

    #[test]
    fn off_axis_plane_reflection() {
        let plane = Plane::new(Vec3::new(1.0, 1.0, 0.0), 0.0).unwrap();
        let p = Vec3::new(1.0, 0.0, 0.0);
        let r = plane.reflect(&p);
        assert!((r - Vec3::new(0.0, -1.0, 0.0)).norm() < 1e-12);
    }
}
