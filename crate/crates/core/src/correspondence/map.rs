use std::fmt::Write as _;
use std::path::Path;

use super::closest::closest_point_on_triangle;
use super::grid::TriangleGrid;
use crate::fsutil::write_atomic;
use crate::geometry::{Mesh, Vec3};
use crate::{Error, Result};

/// Three source vertices and their barycentric weights for one target vertex.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MapEntry {
    pub face: usize,
    pub indices: [usize; 3],
    pub weights: [f64; 3],
}

/// Sparse column-stochastic map from an `M`-vertex source topology to an
/// `N`-vertex target topology.
#[derive(Debug, Clone, PartialEq)]
pub struct BarycentricMap {
    source_count: usize,
    entries: Vec<MapEntry>,
}

#[derive(Debug, Clone, Copy)]
pub struct MapOptions {
    /// Reject target vertices farther than this from the source surface.
    /// `None` means 5% of the source bounding-box diagonal.
    pub max_distance: Option<f64>,
}

impl Default for MapOptions {
    fn default() -> Self {
        Self { max_distance: None }
    }
}

impl BarycentricMap {
    pub fn new(source_count: usize, entries: Vec<MapEntry>) -> Result<Self> {
        for (i, e) in entries.iter().enumerate() {
            if e.indices.iter().any(|&j| j >= source_count) {
                return Err(Error::InvalidArgument(format!(
                    "map row {i} references source vertex out of range"
                )));
            }
            let sum: f64 = e.weights.iter().sum();
            if (sum - 1.0).abs() > 1e-12 || e.weights.iter().any(|w| !(0.0..=1.0).contains(w)) {
                return Err(Error::InvalidArgument(format!(
                    "map row {i} weights {:?} are not a convex combination",
                    e.weights
                )));
            }
        }
        Ok(Self {
            source_count,
            entries,
        })
    }

    pub fn source_count(&self) -> usize {
        self.source_count
    }

    pub fn target_count(&self) -> usize {
        self.entries.len()
    }

    pub fn entries(&self) -> &[MapEntry] {
        &self.entries
    }

    /// Text table: header `M N`, then rows `i q r l aq ar al`.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        writeln!(s, "{} {}", self.source_count, self.entries.len()).unwrap();
        for (i, e) in self.entries.iter().enumerate() {
            writeln!(
                s,
                "{i} {} {} {} {:?} {:?} {:?}",
                e.indices[0], e.indices[1], e.indices[2], e.weights[0], e.weights[1], e.weights[2]
            )
            .unwrap();
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = lines.next().ok_or_else(|| Error::Format("empty map file".into()))?;
        let hv: Vec<usize> = header
            .split_whitespace()
            .map(|t| t.parse())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::Format("bad map header".into()))?;
        if hv.len() != 2 {
            return Err(Error::Format("map header must be 'M N'".into()));
        }
        let mut entries = Vec::with_capacity(hv[1]);
        for (k, line) in lines.enumerate() {
            let t: Vec<&str> = line.split_whitespace().collect();
            if t.len() != 7 {
                return Err(Error::Format(format!("map row {k} has {} fields", t.len())));
            }
            let bad = || Error::Format(format!("bad map row {k}"));
            let i: usize = t[0].parse().map_err(|_| bad())?;
            if i != k {
                return Err(Error::Format(format!("map row {k} labelled {i}")));
            }
            let idx: Vec<usize> = t[1..4].iter().map(|x| x.parse()).collect::<std::result::Result<_, _>>().map_err(|_| bad())?;
            let w: Vec<f64> = t[4..7].iter().map(|x| x.parse()).collect::<std::result::Result<_, _>>().map_err(|_| bad())?;
            entries.push(MapEntry {
                face: usize::MAX,
                indices: [idx[0], idx[1], idx[2]],
                weights: [w[0], w[1], w[2]],
            });
        }
        if entries.len() != hv[1] {
            return Err(Error::Format(format!(
                "map header declares {} rows, found {}",
                hv[1],
                entries.len()
            )));
        }
        Self::new(hv[0], entries)
    }

    const MAGIC: &'static [u8; 8] = b"MFBMAP01";

    /// Little-endian binary table; reloads bit-exactly.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(24 + self.entries.len() * 56);
        out.extend_from_slice(Self::MAGIC);
        out.extend_from_slice(&(self.source_count as u64).to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u64).to_le_bytes());
        for e in &self.entries {
            out.extend_from_slice(&(e.face as u64).to_le_bytes());
            for &i in &e.indices {
                out.extend_from_slice(&(i as u64).to_le_bytes());
            }
            for &w in &e.weights {
                out.extend_from_slice(&w.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 24 || &bytes[..8] != Self::MAGIC {
            return Err(Error::Format("not a binary barycentric map".into()));
        }
        let u = |o: usize| u64::from_le_bytes(bytes[o..o + 8].try_into().unwrap());
        let m = u(8) as usize;
        let n = u(16) as usize;
        if bytes.len() != 24 + n * 56 {
            return Err(Error::Format("binary map length does not match header".into()));
        }
        let entries = (0..n)
            .map(|k| {
                let o = 24 + k * 56;
                let f = |j: usize| f64::from_le_bytes(bytes[o + 32 + 8 * j..o + 40 + 8 * j].try_into().unwrap());
                let face = u(o);
                MapEntry {
                    face: if face == u64::MAX { usize::MAX } else { face as usize },
                    indices: [u(o + 8) as usize, u(o + 16) as usize, u(o + 24) as usize],
                    weights: [f(0), f(1), f(2)],
                }
            })
            .collect();
        Self::new(m, entries)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let binary = path.extension().is_some_and(|e| e == "bin");
        if binary {
            write_atomic(path, &self.to_bytes())
        } else {
            write_atomic(path, self.to_text().as_bytes())
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        if bytes.starts_with(Self::MAGIC) {
            Self::from_bytes(&bytes)
        } else {
            Self::from_text(&String::from_utf8_lossy(&bytes))
        }
    }
}

fn entry_from(mesh: &Mesh, face: usize, weights: [f64; 3]) -> MapEntry {
    MapEntry {
        face,
        indices: mesh.faces()[face],
        weights,
    }
}

fn check_distances(source: &Mesh, hits: &[(usize, f64)], options: MapOptions) -> Result<()> {
    let limit = options
        .max_distance
        .unwrap_or_else(|| 0.05 * source.bbox_diagonal());
    let bad: Vec<usize> = hits
        .iter()
        .enumerate()
        .filter(|(_, (_, d2))| d2.sqrt() > limit)
        .map(|(i, _)| i)
        .collect();
    if bad.is_empty() {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!(
            "{} target vertices lie farther than {limit:.4} from the source surface: {:?}",
            bad.len(),
            &bad[..bad.len().min(32)]
        )))
    }
}

/// Map each vertex of `fitted_target` to the closest point on `source`.
pub fn build_map(source: &Mesh, fitted_target: &Mesh, options: MapOptions) -> Result<BarycentricMap> {
    if source.face_count() == 0 {
        return Err(Error::InvalidArgument("source mesh has no faces".into()));
    }
    let grid = TriangleGrid::new(source);
    let mut entries = Vec::with_capacity(fitted_target.vertex_count());
    let mut hits = Vec::with_capacity(fitted_target.vertex_count());
    for p in fitted_target.vertices() {
        let (face, cp) = grid.closest(p).expect("source has faces");
        hits.push((face, cp.dist2));
        entries.push(entry_from(source, face, cp.weights));
    }
    check_distances(source, &hits, options)?;
    BarycentricMap::new(source.vertex_count(), entries)
}

/// Same contract as [`build_map`] using an O(N·F) scan over all triangles.
pub fn build_map_exhaustive(source: &Mesh, fitted_target: &Mesh, options: MapOptions) -> Result<BarycentricMap> {
    if source.face_count() == 0 {
        return Err(Error::InvalidArgument("source mesh has no faces".into()));
    }
    let v = source.vertices();
    let mut entries = Vec::new();
    let mut hits = Vec::new();
    for p in fitted_target.vertices() {
        let mut best: Option<(usize, [f64; 3], f64)> = None;
        for (fi, f) in source.faces().iter().enumerate() {
            let cp = closest_point_on_triangle(p, &v[f[0]], &v[f[1]], &v[f[2]]);
            if best.as_ref().is_none_or(|b| cp.dist2 < b.2) {
                best = Some((fi, cp.weights, cp.dist2));
            }
        }
        let (fi, w, d2) = best.unwrap();
        hits.push((fi, d2));
        entries.push(entry_from(source, fi, w));
    }
    check_distances(source, &hits, options)?;
    BarycentricMap::new(source.vertex_count(), entries)
}

/// `out_i = sum_j alpha^i_j v_j` over the three stored source vertices.
pub fn apply_map(map: &BarycentricMap, source_geometry: &[Vec3]) -> Result<Vec<Vec3>> {
    if source_geometry.len() != map.source_count {
        return Err(Error::Dimension(format!(
            "map expects {} source vertices, got {}",
            map.source_count,
            source_geometry.len()
        )));
    }
    Ok(map
        .entries
        .iter()
        .map(|e| {
            source_geometry[e.indices[0]] * e.weights[0]
                + source_geometry[e.indices[1]] * e.weights[1]
                + source_geometry[e.indices[2]] * e.weights[2]
        })
        .collect())
}
