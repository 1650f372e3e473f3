//! Deterministic synthetic face family.
//!
//! Every mesh is a warped ellipsoidal head. Two tessellations of the same
//! ellipsoid play the template role (identity/expression grid, fitting
//! targets) and the bank role (blendshape subjects, AU training scans,
//! expression exemplars). Identities are smooth radial warps; action units
//! are Gaussian bumps centred on landmark positions and displaced along a
//! fixed vector. Expression `0` is neutral and every other expression is a
//! fixed AU combination.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::bilinear::MeshGrid;
use crate::fsutil::write_atomic;
use crate::geometry::{save_mesh, Mesh, MeshFormat, Plane, SymmetryMap, Vec3};
use crate::transfer::ExpressionBank;
use crate::{Error, Result};

/// Ellipsoid semi-axes in millimetres: half-width, half-height, half-depth.
pub const HEAD_AXES: [f64; 3] = [75.0, 95.0, 85.0];

pub const LANDMARK_NAMES: [&str; 9] = [
    "nose_tip",
    "mouth_center",
    "mouth_corner_right",
    "mouth_corner_left",
    "eye_right",
    "eye_left",
    "brow_right",
    "brow_left",
    "chin",
];

/// Landmark directions as (polar angle from the crown, azimuth from the
/// face front towards +x).
const LANDMARK_ANGLES: [(f64, f64); 9] = [
    (0.52, 0.0),
    (0.68, 0.0),
    (0.68, -0.22),
    (0.68, 0.22),
    (0.42, -0.30),
    (0.42, 0.30),
    (0.35, -0.30),
    (0.35, 0.30),
    (0.80, 0.0),
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticFamilySpec {
    pub n_id: usize,
    pub n_ex: usize,
    /// Minimum template vertex count; the grid rounds up.
    pub vertices: usize,
    /// Radial warp amplitude as a fraction of the head radius.
    pub identity_amplitude: f64,
    /// Multiplier on the nominal AU displacements.
    pub expression_amplitude: f64,
    /// Per-coordinate Gaussian noise in millimetres.
    pub noise: f64,
    /// Expressions displace every identity identically when set; otherwise
    /// displacements scale with the local identity warp.
    pub additive: bool,
    pub bank_subjects: usize,
    pub bank_vertices: usize,
    pub targets: usize,
    pub au_train: usize,
    pub au_test: usize,
    pub seed: u64,
}

impl Default for SyntheticFamilySpec {
    fn default() -> Self {
        Self {
            n_id: 5,
            n_ex: 6,
            vertices: 500,
            identity_amplitude: 0.08,
            expression_amplitude: 1.0,
            noise: 0.0,
            additive: false,
            bank_subjects: 12,
            bank_vertices: 800,
            targets: 20,
            au_train: 40,
            au_test: 20,
            seed: 0,
        }
    }
}

impl SyntheticFamilySpec {
    /// Reports every problem at once.
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        for (name, v) in [
            ("n_id", self.n_id),
            ("n_ex", self.n_ex),
            ("bank_subjects", self.bank_subjects),
            ("au_train", self.au_train),
            ("au_test", self.au_test),
        ] {
            if v == 0 {
                problems.push(format!("{name} must be positive"));
            }
        }
        if self.au_train < 2 {
            problems.push("au_train needs at least 2 meshes so both classes appear".into());
        }
        if self.vertices < 50 {
            problems.push(format!("vertices must be at least 50, got {}", self.vertices));
        }
        if self.bank_vertices < 50 {
            problems.push(format!("bank_vertices must be at least 50, got {}", self.bank_vertices));
        }
        for (name, v) in [
            ("identity_amplitude", self.identity_amplitude),
            ("expression_amplitude", self.expression_amplitude),
            ("noise", self.noise),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                problems.push(format!("{name} must be finite and nonnegative, got {v}"));
            }
        }
        if self.identity_amplitude >= 0.3 {
            problems.push(format!("identity_amplitude {} would fold the surface", self.identity_amplitude));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidArgument(problems.join("; ")))
        }
    }
}

/// Ellipsoid tessellation with its undeformed points and mirror pairing.
#[derive(Debug, Clone)]
pub struct Template {
    pub mesh: Mesh,
    pub symmetry: SymmetryMap,
    pub rings: usize,
    pub segments: usize,
}

fn head_point(theta: f64, phi: f64) -> Vec3 {
    let [a, b, c] = HEAD_AXES;
    Vec3::new(a * theta.sin() * phi.sin(), b * theta.cos(), c * theta.sin() * phi.cos())
}

/// Latitude/longitude ellipsoid with at least `min_vertices` vertices,
/// landmarks attached and a topology that is symmetric across `x = 0`.
pub fn ellipsoid_template(min_vertices: usize) -> Result<Template> {
    if min_vertices < 50 {
        return Err(Error::InvalidArgument(format!("templates need at least 50 vertices, got {min_vertices}")));
    }
    let mut segments = (2.0 * min_vertices as f64).sqrt().round() as usize;
    segments += segments % 2;
    let rings = (min_vertices - 2).div_ceil(segments);
    let idx = |r: usize, k: usize| 1 + r * segments + k % segments;
    let bottom = 1 + rings * segments;

    let mut vertices = vec![head_point(0.0, 0.0)];
    for r in 0..rings {
        let theta = PI * (r + 1) as f64 / (rings + 1) as f64;
        for k in 0..segments {
            vertices.push(head_point(theta, 2.0 * PI * k as f64 / segments as f64));
        }
    }
    vertices.push(head_point(PI, 0.0));

    let mut faces = Vec::new();
    for k in 0..segments {
        faces.push([0, idx(0, k), idx(0, k + 1)]);
        faces.push([bottom, idx(rings - 1, k + 1), idx(rings - 1, k)]);
    }
    for r in 0..rings - 1 {
        for k in 0..segments {
            let (a, b, c, d) = (idx(r, k), idx(r, k + 1), idx(r + 1, k + 1), idx(r + 1, k));
            // diagonals mirror across the midline so the topology is symmetric
            if k < segments / 2 {
                faces.push([a, b, c]);
                faces.push([a, c, d]);
            } else {
                faces.push([a, b, d]);
                faces.push([b, c, d]);
            }
        }
    }
    for f in faces.iter_mut() {
        let [p, q, s] = f.map(|i| vertices[i]);
        if (q - p).cross(&(s - p)).dot(&(p + q + s)) < 0.0 {
            f.swap(1, 2);
        }
    }

    let landmarks = LANDMARK_ANGLES
        .iter()
        .map(|&(t, p)| {
            let target = head_point(t * PI, p);
            (0..vertices.len())
                .min_by(|&i, &j| (vertices[i] - target).norm().total_cmp(&(vertices[j] - target).norm()))
                .unwrap()
        })
        .collect();

    let mut pairs = vec![(0, 0), (bottom, bottom)];
    for r in 0..rings {
        for k in 0..=segments / 2 {
            pairs.push((idx(r, k), idx(r, segments - k)));
        }
    }
    let symmetry = SymmetryMap::from_pairs(vertices.len(), &pairs, Plane::yz())?;
    let mesh = Mesh::new(vertices, faces, landmarks)?;
    Ok(Template {
        mesh,
        symmetry,
        rings,
        segments,
    })
}

/// A Gaussian bump displacement around one or more centres.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuDefinition {
    pub name: String,
    pub centers: Vec<[f64; 3]>,
    /// Displacement at each centre, in millimetres.
    pub displacements: Vec<[f64; 3]>,
    pub sigma: f64,
}

impl AuDefinition {
    /// Displacement field evaluated at undeformed template points.
    pub fn field(&self, points: &[Vec3]) -> Vec<Vec3> {
        points
            .iter()
            .map(|p| {
                self.centers
                    .iter()
                    .zip(&self.displacements)
                    .map(|(c, d)| Vec3::from(*d) * self.weight(p, c))
                    .sum()
            })
            .collect()
    }

    fn weight(&self, p: &Vec3, c: &[f64; 3]) -> f64 {
        (-(p - Vec3::from(*c)).norm_squared() / (2.0 * self.sigma * self.sigma)).exp()
    }

    /// Largest bump weight at `p` over all centres.
    pub fn support(&self, p: &Vec3) -> f64 {
        self.centers.iter().map(|c| self.weight(p, c)).fold(0.0, f64::max)
    }
}

fn landmark_point(i: usize) -> [f64; 3] {
    let (t, p) = LANDMARK_ANGLES[i];
    head_point(t * PI, p).into()
}

fn mirrored(d: [f64; 3]) -> [f64; 3] {
    [-d[0], d[1], d[2]]
}

/// The eight synthetic action units.
pub fn au_catalog(amplitude: f64) -> Vec<AuDefinition> {
    let s = |v: [f64; 3]| v.map(|x| x * amplitude);
    let pair = |name: &str, right: usize, left: usize, d: [f64; 3], sigma: f64| AuDefinition {
        name: name.into(),
        centers: vec![landmark_point(right), landmark_point(left)],
        displacements: vec![s(d), s(mirrored(d))],
        sigma,
    };
    let single = |name: &str, center: [f64; 3], d: [f64; 3], sigma: f64| AuDefinition {
        name: name.into(),
        centers: vec![center],
        displacements: vec![s(d)],
        sigma,
    };
    let cheek = |p: f64| head_point(0.6 * PI, p).into();
    vec![
        pair("brow_raise", 6, 7, [0.0, 6.0, 1.0], 16.0),
        single("brow_lower", head_point(0.37 * PI, 0.0).into(), [0.0, -5.0, -2.0], 16.0),
        pair("eye_close", 4, 5, [0.0, -4.0, -2.0], 12.0),
        single("nose_wrinkle", landmark_point(0), [0.0, 4.0, -3.0], 14.0),
        pair("smile", 2, 3, [-4.0, 5.0, -1.0], 14.0),
        single("lip_pucker", landmark_point(1), [0.0, 0.0, 7.0], 14.0),
        single("jaw_drop", landmark_point(8), [0.0, -9.0, -2.0], 22.0),
        AuDefinition {
            name: "cheek_puff".into(),
            centers: vec![cheek(-0.45), cheek(0.45)],
            displacements: vec![s([-3.0, 0.0, 5.0]), s([3.0, 0.0, 5.0])],
            sigma: 16.0,
        },
    ]
}

/// Named AU combinations; expression `0` is neutral.
pub fn expression_table(n_ex: usize, seed: u64) -> Vec<(String, Vec<usize>)> {
    let fixed: [(&str, &[usize]); 8] = [
        ("neutral", &[]),
        ("smile", &[4]),
        ("surprise", &[0, 6]),
        ("frown", &[1, 2]),
        ("pucker", &[5]),
        ("disgust", &[1, 3]),
        ("puff", &[7]),
        ("laugh", &[2, 4, 6]),
    ];
    let mut out: Vec<(String, Vec<usize>)> = fixed
        .iter()
        .take(n_ex)
        .map(|(n, a)| (n.to_string(), a.to_vec()))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(stream(seed, 11));
    while out.len() < n_ex {
        let mut aus = rand::seq::index::sample(&mut rng, 8, 2).into_vec();
        aus.sort_unstable();
        if out.iter().all(|(_, a)| *a != aus) {
            out.push((format!("combo_{}", out.len()), aus));
        }
    }
    out
}

const WARP_TERMS: usize = 9;

/// Radial warp factor `1 + Σ c_k m_k(p̂)` over degree-1 and degree-2 monomials.
fn warp_factor(coeffs: &[f64], p: &Vec3) -> f64 {
    let u = p.component_div(&Vec3::from(HEAD_AXES));
    let n = u.norm();
    let u = if n > 0.0 { u / n } else { u };
    let m = [u.x, u.y, u.z, u.x * u.x, u.y * u.y, u.z * u.z, u.x * u.y, u.y * u.z, u.x * u.z];
    1.0 + coeffs.iter().zip(m).map(|(c, m)| c * m).sum::<f64>()
}

fn draw_identity(rng: &mut ChaCha8Rng, amplitude: f64) -> Vec<f64> {
    (0..WARP_TERMS)
        .map(|_| {
            let g: f64 = StandardNormal.sample(rng);
            g * amplitude / 3.0
        })
        .collect()
}

fn stream(seed: u64, k: u64) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(k.wrapping_mul(0xD1B5_4A32_D192_ED03))
}

/// Geometry generator bound to one template.
#[derive(Debug, Clone)]
pub struct Poser<'a> {
    pub template: &'a Template,
    pub aus: &'a [AuDefinition],
    pub additive: bool,
    fields: Vec<Vec<Vec3>>,
}

impl<'a> Poser<'a> {
    pub fn new(template: &'a Template, aus: &'a [AuDefinition], additive: bool) -> Self {
        let fields = aus.iter().map(|a| a.field(template.mesh.vertices())).collect();
        Self {
            template,
            aus,
            additive,
            fields,
        }
    }

    /// Identity warp plus the listed AU displacements.
    pub fn pose(&self, identity: &[f64], active: &[usize]) -> Vec<Vec3> {
        self.template
            .mesh
            .vertices()
            .iter()
            .enumerate()
            .map(|(v, p)| {
                let f = warp_factor(identity, p);
                let d: Vec3 = active.iter().map(|&a| self.fields[a][v]).sum();
                p * f + if self.additive { d } else { d * f }
            })
            .collect()
    }

    pub fn pose_bits(&self, identity: &[f64], bits: &[u8]) -> Vec<Vec3> {
        let active: Vec<usize> = (0..bits.len()).filter(|&a| bits[a] != 0).collect();
        self.pose(identity, &active)
    }

    pub fn mesh(&self, points: Vec<Vec3>) -> Result<Mesh> {
        self.template.mesh.with_vertices(points)
    }
}

fn add_noise(points: &mut [Vec3], sigma: f64, rng: &mut ChaCha8Rng) -> Result<()> {
    if sigma == 0.0 {
        return Ok(());
    }
    let n = Normal::new(0.0, sigma).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    for p in points.iter_mut() {
        *p += Vec3::new(n.sample(rng), n.sample(rng), n.sample(rng));
    }
    Ok(())
}

/// A labelled mesh for AU classifier training or testing.
#[derive(Debug, Clone)]
pub struct AuSample {
    pub mesh: Mesh,
    pub labels: Vec<u8>,
}

/// `count` meshes on the bank template with fresh identities; every AU is
/// active in `⌊count/2⌋` of them.
pub fn au_samples(
    template: &Template,
    aus: &[AuDefinition],
    count: usize,
    identity_amplitude: f64,
    noise: f64,
    additive: bool,
    seed: u64,
) -> Result<Vec<AuSample>> {
    let poser = Poser::new(template, aus, additive);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut labels = vec![vec![0u8; aus.len()]; count];
    for a in 0..aus.len() {
        for i in rand::seq::index::sample(&mut rng, count, count / 2) {
            labels[i][a] = 1;
        }
    }
    labels
        .into_iter()
        .map(|bits| {
            let id = draw_identity(&mut rng, identity_amplitude);
            let mut pts = poser.pose_bits(&id, &bits);
            add_noise(&mut pts, noise, &mut rng)?;
            Ok(AuSample {
                mesh: poser.mesh(pts)?,
                labels: bits,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetTruth {
    pub file: String,
    pub expression: usize,
    pub identity: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FamilyManifest {
    pub spec: SyntheticFamilySpec,
    pub template_vertices: usize,
    pub bank_vertices: usize,
    pub landmarks: Vec<String>,
    pub aus: Vec<AuDefinition>,
    pub expressions: Vec<(String, Vec<usize>)>,
    pub identities: Vec<Vec<f64>>,
    pub bank_identities: Vec<Vec<f64>>,
    pub exemplar_identity: Vec<f64>,
    pub targets: Vec<TargetTruth>,
}

#[derive(Debug, Clone)]
pub struct SyntheticFamily {
    pub spec: SyntheticFamilySpec,
    pub template: Template,
    pub bank_template: Template,
    pub aus: Vec<AuDefinition>,
    pub expressions: Vec<(String, Vec<usize>)>,
    pub identities: Vec<Vec<f64>>,
    /// `grid[i][e]`: identity `i` posed with expression `e`.
    pub grid: Vec<Vec<Mesh>>,
    pub bank: ExpressionBank,
    pub bank_identities: Vec<Vec<f64>>,
    pub exemplar_identity: Vec<f64>,
    /// One bank-topology scan per expression, from a subject outside the bank.
    pub exemplars: Vec<Mesh>,
    pub au_train: Vec<AuSample>,
    pub au_test: Vec<AuSample>,
    pub targets: Vec<(Mesh, TargetTruth)>,
}

pub fn identity_name(i: usize) -> String {
    format!("id{i:02}")
}

pub fn grid_file(i: usize, e: usize) -> String {
    format!("id{i:02}_ex{e:02}.obj")
}

pub fn generate(spec: &SyntheticFamilySpec) -> Result<SyntheticFamily> {
    spec.validate()?;
    let template = ellipsoid_template(spec.vertices)?;
    let bank_template = ellipsoid_template(spec.bank_vertices)?;
    let aus = au_catalog(spec.expression_amplitude);
    let expressions = expression_table(spec.n_ex, spec.seed);

    let mut rng = ChaCha8Rng::seed_from_u64(stream(spec.seed, 1));
    let identities: Vec<Vec<f64>> = (0..spec.n_id).map(|_| draw_identity(&mut rng, spec.identity_amplitude)).collect();
    let poser = Poser::new(&template, &aus, spec.additive);
    let mut noise_rng = ChaCha8Rng::seed_from_u64(stream(spec.seed, 2));
    let mut grid = Vec::with_capacity(spec.n_id);
    for id in &identities {
        let mut row = Vec::with_capacity(spec.n_ex);
        for (_, active) in &expressions {
            let mut pts = poser.pose(id, active);
            add_noise(&mut pts, spec.noise, &mut noise_rng)?;
            row.push(poser.mesh(pts)?);
        }
        grid.push(row);
    }

    let bank_poser = Poser::new(&bank_template, &aus, spec.additive);
    let mut rng = ChaCha8Rng::seed_from_u64(stream(spec.seed, 3));
    let bank_identities: Vec<Vec<f64>> = (0..spec.bank_subjects)
        .map(|_| draw_identity(&mut rng, spec.identity_amplitude))
        .collect();
    let neutral = bank_identities.iter().map(|id| bank_poser.pose(id, &[])).collect();
    let blendshapes = bank_identities
        .iter()
        .map(|id| (0..aus.len()).map(|a| bank_poser.pose(id, &[a])).collect())
        .collect();
    let bank = ExpressionBank::new(
        bank_template.mesh.faces().to_vec(),
        (0..spec.bank_subjects).map(|s| format!("subject{s:02}")).collect(),
        aus.iter().map(|a| a.name.clone()).collect(),
        neutral,
        blendshapes,
    )?
    .with_expressions(expressions.clone())?;

    let mut rng = ChaCha8Rng::seed_from_u64(stream(spec.seed, 4));
    let exemplar_identity = draw_identity(&mut rng, spec.identity_amplitude);
    let exemplars = expressions
        .iter()
        .map(|(_, active)| {
            let mut pts = bank_poser.pose(&exemplar_identity, active);
            add_noise(&mut pts, spec.noise, &mut rng)?;
            bank_poser.mesh(pts)
        })
        .collect::<Result<Vec<_>>>()?;

    let au_train = au_samples(
        &bank_template,
        &aus,
        spec.au_train,
        spec.identity_amplitude,
        spec.noise,
        spec.additive,
        stream(spec.seed, 5),
    )?;
    let au_test = au_samples(
        &bank_template,
        &aus,
        spec.au_test,
        spec.identity_amplitude,
        spec.noise,
        spec.additive,
        stream(spec.seed, 6),
    )?;

    let mut rng = ChaCha8Rng::seed_from_u64(stream(spec.seed, 7));
    let targets = (0..spec.targets)
        .map(|t| {
            let identity = draw_identity(&mut rng, spec.identity_amplitude);
            let expression = rng.random_range(0..spec.n_ex);
            let mut pts = poser.pose(&identity, &expressions[expression].1);
            add_noise(&mut pts, spec.noise, &mut rng)?;
            Ok((
                poser.mesh(pts)?,
                TargetTruth {
                    file: format!("target{t:02}.obj"),
                    expression,
                    identity,
                },
            ))
        })
        .collect::<Result<Vec<_>>>()?;

    Ok(SyntheticFamily {
        spec: spec.clone(),
        template,
        bank_template,
        aus,
        expressions,
        identities,
        grid,
        bank,
        bank_identities,
        exemplar_identity,
        exemplars,
        au_train,
        au_test,
        targets,
    })
}

/// Largest AU bump weight at each template vertex over the AUs that some
/// expression uses.
pub fn expression_support(template: &Template, aus: &[AuDefinition], expressions: &[(String, Vec<usize>)]) -> Vec<f64> {
    let used: Vec<usize> = (0..aus.len())
        .filter(|a| expressions.iter().any(|(_, e)| e.contains(a)))
        .collect();
    template
        .mesh
        .vertices()
        .iter()
        .map(|p| used.iter().map(|&a| aus[a].support(p)).fold(0.0, f64::max))
        .collect()
}

pub const MANIFEST_FILE: &str = "manifest.json";
pub const AU_LABELS_FILE: &str = "labels.txt";

fn write_au_set(dir: &Path, samples: &[AuSample], aus: &[AuDefinition]) -> Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    let mut labels = format!("# file {}\n", aus.iter().map(|a| a.name.as_str()).collect::<Vec<_>>().join(" "));
    for (k, s) in samples.iter().enumerate() {
        let name = format!("scan{k:03}.obj");
        let path = dir.join(&name);
        save_mesh(&s.mesh, &path, MeshFormat::Obj)?;
        files.push(path);
        let bits: Vec<String> = s.labels.iter().map(|b| b.to_string()).collect();
        labels.push_str(&format!("{name} {}\n", bits.join(" ")));
    }
    let path = dir.join(AU_LABELS_FILE);
    write_atomic(&path, labels.as_bytes())?;
    files.push(path);
    Ok(files)
}

/// Reads `labels.txt` from an AU scan directory.
pub fn read_au_labels(dir: &Path) -> Result<Vec<(String, Vec<u8>)>> {
    let path = dir.join(AU_LABELS_FILE);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let mut out = Vec::new();
    for (k, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut t = line.split_whitespace();
        let name = t.next().unwrap().to_string();
        let bits = t
            .map(|b| match b {
                "0" => Ok(0),
                "1" => Ok(1),
                _ => Err(Error::Parse {
                    path: path.clone(),
                    line: k + 1,
                    msg: format!("bad AU label '{b}'"),
                }),
            })
            .collect::<Result<Vec<u8>>>()?;
        out.push((name, bits));
    }
    Ok(out)
}

impl SyntheticFamily {
    /// The identity/expression grid keyed by `idII` and expression names.
    pub fn mesh_grid(&self) -> Result<MeshGrid> {
        let mut grid = MeshGrid::new(
            (0..self.grid.len()).map(identity_name).collect(),
            self.expressions.iter().map(|(n, _)| n.clone()).collect(),
        );
        for (i, row) in self.grid.iter().enumerate() {
            for (e, m) in row.iter().enumerate() {
                grid.insert(i, e, m.clone())?;
            }
        }
        Ok(grid)
    }

    pub fn manifest(&self) -> FamilyManifest {
        FamilyManifest {
            spec: self.spec.clone(),
            template_vertices: self.template.mesh.vertex_count(),
            bank_vertices: self.bank_template.mesh.vertex_count(),
            landmarks: LANDMARK_NAMES.iter().map(|s| s.to_string()).collect(),
            aus: self.aus.clone(),
            expressions: self.expressions.clone(),
            identities: self.identities.clone(),
            bank_identities: self.bank_identities.clone(),
            exemplar_identity: self.exemplar_identity.clone(),
            targets: self.targets.iter().map(|(_, t)| t.clone()).collect(),
        }
    }

    /// Writes the dataset below `dir` and returns every file written.
    ///
    /// Layout: `template.{obj,lmk,sym}`, `family/idII_exEE.obj`,
    /// `bank/` (blendshape bank) with `bank/template.{obj,lmk}`,
    /// `exemplars/exEE.obj`, `au_train/` and `au_test/` scans with
    /// `labels.txt`, `targets/targetTT.obj`, and `manifest.json`.
    pub fn write(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        let mut files = Vec::new();
        let mut save = |mesh: &Mesh, path: PathBuf| -> Result<()> {
            save_mesh(mesh, &path, MeshFormat::Obj)?;
            if !mesh.landmarks().is_empty() {
                files.push(path.with_extension("lmk"));
            }
            files.push(path);
            Ok(())
        };
        save(&self.template.mesh, dir.join("template.obj"))?;
        for (i, row) in self.grid.iter().enumerate() {
            for (e, m) in row.iter().enumerate() {
                save(m, dir.join("family").join(grid_file(i, e)))?;
            }
        }
        save(&self.bank_template.mesh, dir.join("bank").join("template.obj"))?;
        for (e, m) in self.exemplars.iter().enumerate() {
            save(m, dir.join("exemplars").join(format!("ex{e:02}.obj")))?;
        }
        for (m, t) in &self.targets {
            save(m, dir.join("targets").join(&t.file))?;
        }
        let sym = dir.join("template.sym");
        self.template.symmetry.save(&sym)?;
        files.push(sym);
        self.bank.save_dir(&dir.join("bank"))?;
        files.extend(write_au_set(&dir.join("au_train"), &self.au_train, &self.aus)?);
        files.extend(write_au_set(&dir.join("au_test"), &self.au_test, &self.aus)?);
        let manifest = serde_json::to_string_pretty(&self.manifest()).map_err(|e| Error::Format(e.to_string()))?;
        let path = dir.join(MANIFEST_FILE);
        write_atomic(&path, manifest.as_bytes())?;
        files.push(path);
        files.sort();
        Ok(files)
    }
}
