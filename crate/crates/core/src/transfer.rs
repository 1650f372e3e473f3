//! Expression synthesis from a blendshape bank and transfer across topologies.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::correspondence::{apply_map, BarycentricMap};
use crate::fsutil::write_atomic;
use crate::geometry::{load_mesh, save_mesh, Mesh, MeshFormat, Vec3};
use crate::{Error, Result};

pub const AU_TABLE_FILE: &str = "au_table.txt";
const NEUTRAL: &str = "neutral";

/// Per-subject neutral and per-AU blendshape geometry sharing one topology.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpressionBank {
    faces: Vec<[usize; 3]>,
    subjects: Vec<String>,
    aus: Vec<String>,
    neutral: Vec<Vec<Vec3>>,
    blendshapes: Vec<Vec<Vec<Vec3>>>,
    expressions: Vec<(String, Vec<usize>)>,
}

impl ExpressionBank {
    /// `blendshapes[s][a]` is subject `s` posed with AU `a` alone.
    pub fn new(
        faces: Vec<[usize; 3]>,
        subjects: Vec<String>,
        aus: Vec<String>,
        neutral: Vec<Vec<Vec3>>,
        blendshapes: Vec<Vec<Vec<Vec3>>>,
    ) -> Result<Self> {
        if subjects.is_empty() {
            return Err(Error::InvalidArgument("empty expression bank".into()));
        }
        if neutral.len() != subjects.len() || blendshapes.len() != subjects.len() {
            return Err(Error::Dimension("every subject needs a neutral and a blendshape set".into()));
        }
        let m = neutral[0].len();
        for (s, name) in subjects.iter().enumerate() {
            if neutral[s].len() != m {
                return Err(Error::Dimension(format!("subject '{name}' has {} vertices, expected {m}", neutral[s].len())));
            }
            if blendshapes[s].len() != aus.len() {
                return Err(Error::Dimension(format!(
                    "subject '{name}' has {} blendshapes for {} AUs",
                    blendshapes[s].len(),
                    aus.len()
                )));
            }
            if let Some(a) = blendshapes[s].iter().position(|b| b.len() != m) {
                return Err(Error::Dimension(format!("blendshape '{}' of '{name}' has the wrong vertex count", aus[a])));
            }
        }
        Ok(Self {
            faces,
            subjects,
            aus,
            neutral,
            blendshapes,
            expressions: Vec::new(),
        })
    }

    /// Attach the named AU combinations that make up the expression set.
    pub fn with_expressions(mut self, expressions: Vec<(String, Vec<usize>)>) -> Result<Self> {
        for (name, idx) in &expressions {
            if let Some(&a) = idx.iter().find(|&&a| a >= self.aus.len()) {
                return Err(Error::InvalidArgument(format!("expression '{name}' uses unknown AU index {a}")));
            }
        }
        self.expressions = expressions;
        Ok(self)
    }

    pub fn subjects(&self) -> &[String] {
        &self.subjects
    }

    pub fn aus(&self) -> &[String] {
        &self.aus
    }

    pub fn expressions(&self) -> &[(String, Vec<usize>)] {
        &self.expressions
    }

    pub fn faces(&self) -> &[[usize; 3]] {
        &self.faces
    }

    pub fn vertex_count(&self) -> usize {
        self.neutral[0].len()
    }

    pub fn subject_index(&self, id: &str) -> Result<usize> {
        self.subjects
            .iter()
            .position(|s| s == id)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown subject '{id}'")))
    }

    /// Binary AU vector of a named expression.
    pub fn expression_vector(&self, name: &str) -> Result<Vec<u8>> {
        let (_, idx) = self
            .expressions
            .iter()
            .find(|(n, _)| n == name)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown expression '{name}'")))?;
        let mut v = vec![0u8; self.aus.len()];
        for &a in idx {
            v[a] = 1;
        }
        Ok(v)
    }

    fn check_aus(&self, au: &[u8]) -> Result<()> {
        if au.len() != self.aus.len() {
            return Err(Error::Dimension(format!("AU vector has length {}, bank has {} AUs", au.len(), self.aus.len())));
        }
        if au.iter().any(|&a| a > 1) {
            return Err(Error::InvalidArgument("AU vector entries must be 0 or 1".into()));
        }
        Ok(())
    }

    /// Neutral plus the offsets of every active AU.
    pub fn synthesize_by_index(&self, subject: usize, au: &[u8]) -> Result<Vec<Vec3>> {
        self.check_aus(au)?;
        let neutral = self
            .neutral
            .get(subject)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown subject index {subject}")))?;
        let mut out = neutral.clone();
        for (a, _) in au.iter().enumerate().filter(|(_, &on)| on == 1) {
            for ((o, b), n) in out.iter_mut().zip(&self.blendshapes[subject][a]).zip(neutral) {
                *o += b - n;
            }
        }
        Ok(out)
    }

    pub fn synthesize_expression(&self, subject: &str, au: &[u8]) -> Result<Vec<Vec3>> {
        self.synthesize_by_index(self.subject_index(subject)?, au)
    }

    /// Per-vertex `Y_e - Y_s` for one subject.
    pub fn deformation_by_index(&self, subject: usize, source: &[u8], target: &[u8]) -> Result<Vec<Vec3>> {
        let ys = self.synthesize_by_index(subject, source)?;
        let ye = self.synthesize_by_index(subject, target)?;
        Ok(ye.iter().zip(&ys).map(|(e, s)| e - s).collect())
    }

    pub fn deformation(&self, subject: &str, source: &[u8], target: &[u8]) -> Result<Vec<Vec3>> {
        self.deformation_by_index(self.subject_index(subject)?, source, target)
    }

    pub fn subject_mesh(&self, subject: usize, au: &[u8]) -> Result<Mesh> {
        Mesh::new(self.synthesize_by_index(subject, au)?, self.faces.clone(), Vec::new())
    }

    /// Writes `<subject>_neutral.obj`, `<subject>_<au>.obj` and the AU table.
    pub fn save_dir(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (s, name) in self.subjects.iter().enumerate() {
            let n = Mesh::new(self.neutral[s].clone(), self.faces.clone(), Vec::new())?;
            save_mesh(&n, &dir.join(format!("{name}_{NEUTRAL}.obj")), MeshFormat::Obj)?;
            for (a, au) in self.aus.iter().enumerate() {
                let m = n.with_vertices(self.blendshapes[s][a].clone())?;
                save_mesh(&m, &dir.join(format!("{name}_{au}.obj")), MeshFormat::Obj)?;
            }
        }
        let path = dir.join(AU_TABLE_FILE);
        write_atomic(&path, au_table_text(&self.aus, &self.expressions).as_bytes())
    }

    pub fn load_dir(dir: &Path) -> Result<Self> {
        let table = dir.join(AU_TABLE_FILE);
        let text = std::fs::read_to_string(&table).map_err(|e| Error::io(&table, e))?;
        let (aus, expressions) = parse_au_table(&text, &table)?;
        let mut subjects = Vec::new();
        let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
        for entry in entries {
            let entry = entry.map_err(|e| Error::io(dir, e))?;
            let file = entry.file_name().to_string_lossy().into_owned();
            if let Some(s) = file.strip_suffix(&format!("_{NEUTRAL}.obj")) {
                subjects.push(s.to_string());
            }
        }
        if subjects.is_empty() {
            return Err(Error::InvalidArgument(format!("empty expression bank in {}", dir.display())));
        }
        subjects.sort();
        let mut faces = None;
        let mut neutral = Vec::new();
        let mut blendshapes = Vec::new();
        for s in &subjects {
            let n = load_mesh(&dir.join(format!("{s}_{NEUTRAL}.obj")), MeshFormat::Obj)?;
            let mut shapes = Vec::new();
            for au in &aus {
                let m = load_mesh(&dir.join(format!("{s}_{au}.obj")), MeshFormat::Obj)?;
                if !m.same_topology(&n) {
                    return Err(Error::InvalidMesh(format!("{s}_{au}.obj does not share the bank topology")));
                }
                shapes.push(m.vertices().to_vec());
            }
            match &faces {
                None => faces = Some(n.faces().to_vec()),
                Some(f) if f.as_slice() != n.faces() => {
                    return Err(Error::InvalidMesh(format!("subject '{s}' does not share the bank topology")))
                }
                _ => {}
            }
            neutral.push(n.vertices().to_vec());
            blendshapes.push(shapes);
        }
        Self::new(faces.unwrap_or_default(), subjects, aus, neutral, blendshapes)?.with_expressions(expressions)
    }
}

fn au_table_text(aus: &[String], expressions: &[(String, Vec<usize>)]) -> String {
    let mut s = String::from("# au <index> <name> | expr <name> <au index...>\n");
    for (i, a) in aus.iter().enumerate() {
        writeln!(s, "au {i} {a}").unwrap();
    }
    for (name, idx) in expressions {
        write!(s, "expr {name}").unwrap();
        for a in idx {
            write!(s, " {a}").unwrap();
        }
        s.push('\n');
    }
    s
}

type AuTable = (Vec<String>, Vec<(String, Vec<usize>)>);

fn parse_au_table(text: &str, path: &Path) -> Result<AuTable> {
    let mut aus = BTreeMap::new();
    let mut expressions = Vec::new();
    for (no, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let err = |msg: &str| Error::Parse {
            path: path.to_path_buf(),
            line: no + 1,
            msg: msg.to_string(),
        };
        let mut t = line.split_whitespace();
        match t.next() {
            Some("au") => {
                let i: usize = t.next().and_then(|v| v.parse().ok()).ok_or_else(|| err("bad AU index"))?;
                let name = t.next().ok_or_else(|| err("missing AU name"))?;
                aus.insert(i, name.to_string());
            }
            Some("expr") => {
                let name = t.next().ok_or_else(|| err("missing expression name"))?;
                let idx = t
                    .map(|v| v.parse::<usize>())
                    .collect::<std::result::Result<Vec<_>, _>>()
                    .map_err(|_| err("bad AU index"))?;
                expressions.push((name.to_string(), idx));
            }
            _ => return Err(err("expected 'au' or 'expr'")),
        }
    }
    if aus.keys().enumerate().any(|(i, &k)| i != k) {
        return Err(Error::Format(format!("{}: AU indices must be 0..n without gaps", path.display())));
    }
    Ok((aus.into_values().collect(), expressions))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TransferParams {
    /// Expression intensity.
    pub delta: f64,
    /// Ensemble size.
    pub kappa: usize,
    pub seed: u64,
}

impl Default for TransferParams {
    fn default() -> Self {
        Self {
            delta: 1.0,
            kappa: 40,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Transfer {
    pub mesh: Mesh,
    /// Bank subjects averaged, ascending.
    pub subjects: Vec<usize>,
    /// Faces whose orientation flipped or collapsed.
    pub flipped: Vec<usize>,
}

impl Transfer {
    pub fn accepted(&self) -> bool {
        self.flipped.is_empty()
    }
}

/// Seeded choice of `kappa` distinct subjects, returned in ascending order.
pub fn sample_subjects(count: usize, kappa: usize, seed: u64) -> Result<Vec<usize>> {
    if count == 0 {
        return Err(Error::InvalidArgument("empty expression bank".into()));
    }
    if kappa == 0 || kappa > count {
        return Err(Error::InvalidArgument(format!("ensemble size {kappa} must lie in 1..={count}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = rand::seq::index::sample(&mut rng, count, kappa).into_vec();
    idx.sort_unstable();
    Ok(idx)
}

/// `X_e = X_s + delta * mean_k map(Y_e,k - Y_s,k)` over a seeded subject ensemble.
pub fn transfer_expression(
    infant: &Mesh,
    detected: &[u8],
    target: &[u8],
    bank: &ExpressionBank,
    map: &BarycentricMap,
    params: TransferParams,
) -> Result<Transfer> {
    let subjects = sample_subjects(bank.subjects.len(), params.kappa, params.seed)?;
    transfer_with_subjects(infant, detected, target, bank, map, params.delta, &subjects)
}

pub fn transfer_with_subjects(
    infant: &Mesh,
    detected: &[u8],
    target: &[u8],
    bank: &ExpressionBank,
    map: &BarycentricMap,
    delta: f64,
    subjects: &[usize],
) -> Result<Transfer> {
    if !(delta >= 0.0 && delta.is_finite()) {
        return Err(Error::InvalidArgument(format!("intensity must be finite and >= 0, got {delta}")));
    }
    if subjects.is_empty() {
        return Err(Error::InvalidArgument("empty subject ensemble".into()));
    }
    if map.target_count() != infant.vertex_count() {
        return Err(Error::Dimension(format!(
            "map targets {} vertices, mesh has {}",
            map.target_count(),
            infant.vertex_count()
        )));
    }
    if map.source_count() != bank.vertex_count() {
        return Err(Error::Dimension(format!(
            "map reads {} source vertices, bank has {}",
            map.source_count(),
            bank.vertex_count()
        )));
    }
    let mut acc = vec![Vec3::zeros(); infant.vertex_count()];
    for &s in subjects {
        let d = bank.deformation_by_index(s, detected, target)?;
        for (a, m) in acc.iter_mut().zip(apply_map(map, &d)?) {
            *a += m;
        }
    }
    let scale = delta / subjects.len() as f64;
    let out: Vec<Vec3> = infant.vertices().iter().zip(&acc).map(|(x, a)| x + a * scale).collect();
    let mesh = infant.with_vertices(out)?;
    let flipped = flipped_faces(infant, &mesh);
    Ok(Transfer {
        mesh,
        subjects: subjects.to_vec(),
        flipped,
    })
}

/// Faces whose normal reverses, or whose area collapses, between two poses.
pub fn flipped_faces(before: &Mesh, after: &Mesh) -> Vec<usize> {
    let cross = |m: &Mesh, f: &[usize; 3]| {
        let v = m.vertices();
        (v[f[1]] - v[f[0]]).cross(&(v[f[2]] - v[f[0]]))
    };
    before
        .faces()
        .iter()
        .enumerate()
        .filter(|(_, f)| {
            let a = cross(before, f);
            let b = cross(after, f);
            a.dot(&b) <= 1e-12 * a.norm_squared()
        })
        .map(|(i, _)| i)
        .collect()
}
