use std::path::Path;

use nalgebra::DMatrix;

use crate::binio::{Reader, Writer};
use crate::fsutil::write_atomic;
use crate::geometry::{generalized_procrustes, mirror, symmetrize, Mesh, SymmetryMap, Vec3};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IdentityKind {
    Original,
    Mirrored,
    Symmetrized,
}

impl IdentityKind {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Original => "original",
            Self::Mirrored => "mirrored",
            Self::Symmetrized => "symmetrized",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "original" => Some(Self::Original),
            "mirrored" => Some(Self::Mirrored),
            "symmetrized" => Some(Self::Symmetrized),
            _ => None,
        }
    }
}

const MAGIC: &[u8; 4] = b"MFST";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IdentityLabel {
    pub name: String,
    pub kind: IdentityKind,
}

/// Meshes indexed by (identity, expression); every cell must be filled before assembly.
#[derive(Debug, Clone)]
pub struct MeshGrid {
    identities: Vec<String>,
    expressions: Vec<String>,
    cells: Vec<Option<Mesh>>,
}

impl MeshGrid {
    pub fn new(identities: Vec<String>, expressions: Vec<String>) -> Self {
        let cells = vec![None; identities.len() * expressions.len()];
        Self {
            identities,
            expressions,
            cells,
        }
    }

    pub fn identities(&self) -> &[String] {
        &self.identities
    }

    pub fn expressions(&self) -> &[String] {
        &self.expressions
    }

    pub fn insert(&mut self, identity: usize, expression: usize, mesh: Mesh) -> Result<()> {
        if identity >= self.identities.len() || expression >= self.expressions.len() {
            return Err(Error::InvalidArgument(format!("cell ({identity}, {expression}) is outside the grid")));
        }
        self.cells[identity + self.identities.len() * expression] = Some(mesh);
        Ok(())
    }

    pub fn get(&self, identity: usize, expression: usize) -> Option<&Mesh> {
        self.cells.get(identity + self.identities.len() * expression)?.as_ref()
    }

    pub fn missing(&self) -> Vec<(String, String)> {
        let mut out = Vec::new();
        for (e, en) in self.expressions.iter().enumerate() {
            for (i, id) in self.identities.iter().enumerate() {
                if self.get(i, e).is_none() {
                    out.push((id.clone(), en.clone()));
                }
            }
        }
        out
    }
}

/// Three-mode data tensor, see the module docs for the layout.
#[derive(Debug, Clone, PartialEq)]
pub struct ShapeTensor {
    data: Vec<f64>,
    dims: (usize, usize, usize),
    identities: Vec<IdentityLabel>,
    expressions: Vec<String>,
}

impl ShapeTensor {
    pub fn from_data(
        data: Vec<f64>,
        dims: (usize, usize, usize),
        identities: Vec<IdentityLabel>,
        expressions: Vec<String>,
    ) -> Result<Self> {
        if data.len() != dims.0 * dims.1 * dims.2 {
            return Err(Error::Dimension(format!("{} entries for dims {:?}", data.len(), dims)));
        }
        if identities.len() != dims.1 || expressions.len() != dims.2 {
            return Err(Error::Dimension("label counts do not match tensor dims".into()));
        }
        if dims.0 == 0 || dims.1 == 0 || dims.2 == 0 {
            return Err(Error::Dimension(format!("empty tensor dims {:?}", dims)));
        }
        if data.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("tensor entries".into()));
        }
        Ok(Self {
            data,
            dims,
            identities,
            expressions,
        })
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        self.dims
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn identities(&self) -> &[IdentityLabel] {
        &self.identities
    }

    pub fn expressions(&self) -> &[String] {
        &self.expressions
    }

    pub fn get(&self, v: usize, i: usize, e: usize) -> f64 {
        self.data[self.offset(i, e) + v]
    }

    fn offset(&self, i: usize, e: usize) -> usize {
        self.dims.0 * (i + self.dims.1 * e)
    }

    /// Flattened face `(i, e)`.
    pub fn slice(&self, i: usize, e: usize) -> &[f64] {
        let o = self.offset(i, e);
        &self.data[o..o + self.dims.0]
    }

    /// Mode-`mode` unfolding (1, 2 or 3) with column-major column order.
    pub fn unfold(&self, mode: usize) -> Result<DMatrix<f64>> {
        let (nv, ni, ne) = self.dims;
        Ok(match mode {
            1 => DMatrix::from_column_slice(nv, ni * ne, &self.data),
            2 => DMatrix::from_fn(ni, nv * ne, |i, c| self.get(c % nv, i, c / nv)),
            3 => DMatrix::from_fn(ne, nv * ni, |e, c| self.get(c % nv, c / nv, e)),
            _ => return Err(Error::InvalidArgument(format!("tensor has modes 1..=3, got {mode}"))),
        })
    }

    /// Rigidly co-registers every face by generalized Procrustes analysis.
    pub fn procrustes_aligned(&self, tol: f64, max_iter: usize) -> Result<Self> {
        let (nv, ni, ne) = self.dims;
        if nv % 3 != 0 {
            return Err(Error::Dimension(format!("vertex mode size {nv} is not a multiple of 3")));
        }
        let shapes: Vec<Vec<Vec3>> = (0..ne)
            .flat_map(|e| (0..ni).map(move |i| (i, e)))
            .map(|(i, e)| self.slice(i, e).chunks(3).map(|c| Vec3::new(c[0], c[1], c[2])).collect())
            .collect();
        let (aligned, _) = generalized_procrustes(&shapes, tol, max_iter)?;
        let data = aligned.iter().flat_map(|s| s.iter().flat_map(|p| [p.x, p.y, p.z])).collect();
        Self::from_data(data, self.dims, self.identities.clone(), self.expressions.clone())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let ids: Vec<(&str, &str)> = self.identities.iter().map(|l| (l.name.as_str(), l.kind.as_str())).collect();
        let labels = serde_json::to_vec(&(ids, &self.expressions)).map_err(|e| Error::Format(e.to_string()))?;
        let mut w = Writer::new(MAGIC, VERSION);
        w.bytes(&labels);
        for n in [self.dims.0, self.dims.1, self.dims.2] {
            w.usize(n);
        }
        w.f64s(&self.data);
        Ok(w.finish())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes, MAGIC, VERSION, "shape tensor")?;
        let (ids, expressions): (Vec<(String, String)>, Vec<String>) =
            serde_json::from_slice(r.bytes()?).map_err(|e| Error::Format(format!("tensor labels: {e}")))?;
        let identities = ids
            .into_iter()
            .map(|(name, kind)| {
                let kind = IdentityKind::parse(&kind).ok_or_else(|| Error::Format(format!("unknown identity kind '{kind}'")))?;
                Ok(IdentityLabel { name, kind })
            })
            .collect::<Result<Vec<_>>>()?;
        let dims = (r.usize()?, r.usize()?, r.usize()?);
        let data = r.f64s_exact(dims.0 * dims.1 * dims.2, "tensor data")?;
        r.finish()?;
        Self::from_data(data, dims, identities, expressions)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

/// Stacks a complete mesh grid into a tensor.
///
/// With `augment`, every identity is followed by a mirrored and a symmetrized
/// copy in two further blocks, so the identity mode holds
/// `[originals..., mirrored..., symmetrized...]`.
pub fn assemble_tensor(grid: &MeshGrid, sym: Option<&SymmetryMap>, augment: bool) -> Result<ShapeTensor> {
    let missing = grid.missing();
    if !missing.is_empty() {
        let list: Vec<String> = missing.iter().map(|(i, e)| format!("({i}, {e})")).collect();
        return Err(Error::InvalidArgument(format!("incomplete mesh grid, missing cells: {}", list.join(", "))));
    }
    let ni = grid.identities.len();
    let ne = grid.expressions.len();
    if ni == 0 || ne == 0 {
        return Err(Error::InvalidArgument("empty mesh grid".into()));
    }
    let first = grid.get(0, 0).expect("grid is complete");
    for e in 0..ne {
        for i in 0..ni {
            if !grid.get(i, e).expect("grid is complete").same_topology(first) {
                return Err(Error::InvalidMesh(format!(
                    "mesh ({}, {}) does not share the grid topology",
                    grid.identities[i], grid.expressions[e]
                )));
            }
        }
    }
    let sym = match (augment, sym) {
        (true, None) => return Err(Error::InvalidArgument("augmentation needs a symmetry map".into())),
        (true, Some(s)) if s.len() != first.vertex_count() => {
            return Err(Error::Dimension(format!(
                "symmetry map covers {} vertices, meshes have {}",
                s.len(),
                first.vertex_count()
            )))
        }
        (_, s) => s,
    };
    let kinds: &[IdentityKind] = if augment {
        &[IdentityKind::Original, IdentityKind::Mirrored, IdentityKind::Symmetrized]
    } else {
        &[IdentityKind::Original]
    };
    let nv = 3 * first.vertex_count();
    let total = ni * kinds.len();
    let mut data = Vec::with_capacity(nv * total * ne);
    for e in 0..ne {
        for &kind in kinds {
            for i in 0..ni {
                let m = grid.get(i, e).expect("grid is complete");
                let flat = match kind {
                    IdentityKind::Original => m.to_flat(),
                    IdentityKind::Mirrored => mirror(m, sym.expect("checked above"))?.to_flat(),
                    IdentityKind::Symmetrized => symmetrize(m, sym.expect("checked above"))?.to_flat(),
                };
                data.extend(flat);
            }
        }
    }
    let identities = kinds
        .iter()
        .flat_map(|&kind| {
            grid.identities.iter().map(move |n| IdentityLabel {
                name: n.clone(),
                kind,
            })
        })
        .collect();
    ShapeTensor::from_data(data, (nv, total, ne), identities, grid.expressions.clone())
}
