//! The pipeline stages. Each reads upstream artifacts, writes its own
//! directory through a [`StageWriter`] and records a manifest.

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context as _, Result};
use morphflow_core::bilinear::{
    assemble_tensor, hosvd, parallel_analysis, variance_truncation, BilinearModel, MeshGrid, ShapeTensor,
};
use morphflow_core::correspondence::{apply_map, build_map, BarycentricMap, MapOptions};
use morphflow_core::fitting::{decode, fit, FitResult, Flows};
use morphflow_core::flow::{train, write_loss_csv, Flow};
use morphflow_core::fsutil::write_atomic;
use morphflow_core::geometry::{load_mesh, save_mesh, MeshFormat, SymmetryMap};
use morphflow_core::latent::{
    chi2_critical, fit_prior, load_codes, nearest_neighbor, project_to_hyperellipsoid, save_codes, Coords,
    GaussianPrior, LatentCode, ShellPreset, Space,
};
use morphflow_core::spectral::{
    detect_aus, mesh_features, train_au_svm, AuClassifier, ClassifierBank, PatchSpectrum, SvmOptions,
};
use morphflow_core::synth::{generate, read_au_labels};
use morphflow_core::transfer::{transfer_expression, ExpressionBank, TransferParams};
use morphflow_core::Mesh;
use nalgebra::{DMatrix, DVector};

use crate::config::{PipelineConfig, RankRule, ShellRule};
use crate::interp::{expression_path, smoothness, step_sizes};
use crate::manifest::{key, list_files, Manifest, StageWriter};
use crate::report::{format_errors, read_errors, summarize, summary_csv};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, clap::ValueEnum)]
pub enum Stage {
    Synth,
    BuildMap,
    DetectAus,
    Transfer,
    Assemble,
    Hosvd,
    TrainFlows,
    Sample,
    Project,
    Interpolate,
    Fit,
    Report,
}

impl Stage {
    pub const ALL: [Stage; 12] = [
        Stage::Synth,
        Stage::BuildMap,
        Stage::DetectAus,
        Stage::Transfer,
        Stage::Assemble,
        Stage::Hosvd,
        Stage::TrainFlows,
        Stage::Sample,
        Stage::Project,
        Stage::Interpolate,
        Stage::Fit,
        Stage::Report,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Synth => "synth",
            Stage::BuildMap => "build-map",
            Stage::DetectAus => "detect-aus",
            Stage::Transfer => "transfer",
            Stage::Assemble => "assemble",
            Stage::Hosvd => "hosvd",
            Stage::TrainFlows => "train-flows",
            Stage::Sample => "sample",
            Stage::Project => "project",
            Stage::Interpolate => "interpolate",
            Stage::Fit => "fit",
            Stage::Report => "report",
        }
    }

    /// What the stage produces, for missing-artifact messages.
    fn artifact_kind(self) -> &'static str {
        match self {
            Stage::Synth => "dataset",
            Stage::BuildMap => "correspondence map",
            Stage::DetectAus => "action-unit",
            Stage::Transfer => "transferred-expression",
            Stage::Assemble => "tensor",
            Stage::Hosvd => "model",
            Stage::TrainFlows => "flow",
            Stage::Sample => "sample",
            Stage::Project => "projection",
            Stage::Interpolate => "interpolation",
            Stage::Fit => "fit result",
            Stage::Report => "report",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Stable per-label seed: FNV-1a of the label mixed into the root seed.
pub fn derive_seed(seed: u64, label: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in label.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01B3);
    }
    splitmix64(seed ^ h)
}

const SPACES: [Space; 2] = [Space::Identity, Space::Expression];

fn flow_file(space: Space) -> String {
    format!("flow_{space}.bin")
}

fn mesh_name(prefix: &str, k: usize) -> String {
    format!("{prefix}_{k:02}.obj")
}

fn obj_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = std::fs::read_dir(dir)
        .with_context(|| format!("listing {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "obj"))
        .collect();
    out.sort();
    Ok(out)
}

fn stem(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

fn load_obj(path: &Path) -> Result<Mesh> {
    Ok(load_mesh(path, MeshFormat::Obj)?)
}

fn save_obj(mesh: &Mesh, path: &Path) -> Result<()> {
    Ok(save_mesh(mesh, path, MeshFormat::Obj)?)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    Ok(write_atomic(path, text.as_bytes())?)
}

fn rows_of(m: &DMatrix<f64>) -> Vec<DVector<f64>> {
    m.row_iter().map(|r| r.transpose()).collect()
}

fn mean_row(m: &DMatrix<f64>) -> DVector<f64> {
    m.row_mean().transpose()
}

/// A configured pipeline rooted at one stage directory.
pub struct Pipeline {
    config: PipelineConfig,
    stage_dir: PathBuf,
    data_dir: PathBuf,
    data_from_synth: bool,
}

impl Pipeline {
    pub fn new(config: PipelineConfig) -> Result<Self> {
        config.validate()?;
        let stage_dir = config.paths.stage_dir.clone();
        let (data_dir, data_from_synth) = match &config.paths.data {
            Some(d) => (d.clone(), false),
            None => (stage_dir.join(Stage::Synth.name()), true),
        };
        Ok(Self {
            config,
            stage_dir,
            data_dir,
            data_from_synth,
        })
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.config
    }

    pub fn stage_dir(&self) -> &Path {
        &self.stage_dir
    }

    pub fn stage_seed(&self, stage: Stage) -> u64 {
        derive_seed(self.config.seed, stage.name())
    }

    pub fn run(&self, stage: Stage) -> Result<Manifest> {
        std::fs::create_dir_all(&self.stage_dir)
            .with_context(|| format!("creating stage directory {}", self.stage_dir.display()))?;
        let mut w = StageWriter::begin(&self.stage_dir, stage.name())?;
        let seed = self.stage_seed(stage);
        match stage {
            Stage::Synth => self.synth(&mut w, seed),
            Stage::BuildMap => self.build_map(&mut w),
            Stage::DetectAus => self.detect_aus(&mut w, seed),
            Stage::Transfer => self.transfer(&mut w, seed),
            Stage::Assemble => self.assemble(&mut w),
            Stage::Hosvd => self.hosvd(&mut w, seed),
            Stage::TrainFlows => self.train_flows(&mut w, seed),
            Stage::Sample => self.sample(&mut w, seed),
            Stage::Project => self.project(&mut w),
            Stage::Interpolate => self.interpolate(&mut w),
            Stage::Fit => self.fit(&mut w),
            Stage::Report => self.report(&mut w),
        }
        .with_context(|| format!("stage {stage} failed"))?;
        w.finish(self.config.seed, seed, self.config_echo())
    }

    /// Runs every stage in order.
    pub fn run_all(&self) -> Result<Vec<Manifest>> {
        Stage::ALL
            .iter()
            .filter(|&&s| s != Stage::Synth || self.data_from_synth)
            .map(|&s| self.run(s))
            .collect()
    }

    /// The effective config with paths relative to the stage directory, so
    /// that runs in different directories produce identical manifests.
    fn config_echo(&self) -> serde_json::Value {
        let mut c = self.config.clone();
        c.paths.stage_dir = PathBuf::from(".");
        c.paths.data = Some(PathBuf::from(key(&self.stage_dir, &self.data_dir)));
        c.synth.seed = self.stage_seed(Stage::Synth);
        serde_json::to_value(&c).expect("config serializes")
    }

    fn artifact(&self, stage: Stage, rel: &str) -> Result<PathBuf> {
        let p = self.stage_dir.join(stage.name()).join(rel);
        if !p.exists() {
            bail!(
                "missing {} artifact {}; run `morphflow {stage}` first",
                stage.artifact_kind(),
                p.display()
            );
        }
        Ok(p)
    }

    fn data(&self, rel: &str) -> Result<PathBuf> {
        let p = self.data_dir.join(rel);
        if !p.exists() {
            if self.data_from_synth {
                bail!("missing dataset artifact {}; run `morphflow synth` first", p.display());
            }
            bail!("missing dataset file {} under paths.data", p.display());
        }
        Ok(p)
    }

    fn input_mesh(&self, w: &mut StageWriter, path: &Path) -> Result<Mesh> {
        w.input(path)?;
        let lmk = path.with_extension("lmk");
        if lmk.exists() {
            w.input(&lmk)?;
        }
        load_obj(path)
    }

    fn template(&self, w: &mut StageWriter) -> Result<Mesh> {
        let p = self.data("template.obj")?;
        self.input_mesh(w, &p)
    }

    fn model(&self, w: &mut StageWriter) -> Result<BilinearModel> {
        let p = self.artifact(Stage::Hosvd, "model.bin")?;
        w.input(&p)?;
        Ok(BilinearModel::load(&p)?)
    }

    /// Trained flows when enabled, checked against the model ranks.
    fn flows(&self, w: &mut StageWriter, model: &BilinearModel) -> Result<Option<(Flow, Flow)>> {
        if !self.config.flow.enabled {
            return Ok(None);
        }
        let mut load = |space: Space, dim: usize| -> Result<Flow> {
            let p = self.artifact(Stage::TrainFlows, &flow_file(space))?;
            w.input(&p)?;
            let f = Flow::load(&p)?;
            ensure!(
                f.dim() == dim,
                "{space} flow has dimension {} but the model rank is {dim}; rerun `morphflow train-flows`",
                f.dim()
            );
            Ok(f)
        };
        let id = load(Space::Identity, model.d_id())?;
        let ex = load(Space::Expression, model.d_ex())?;
        Ok(Some((id, ex)))
    }

    fn neutral_code(&self, model: &BilinearModel) -> Result<DVector<f64>> {
        let e = self.config.fit.neutral_expression;
        ensure!(e < model.u_ex().nrows(), "neutral expression {e} outside the training expressions");
        Ok(model.expression_code(e))
    }

    fn synth(&self, w: &mut StageWriter, seed: u64) -> Result<()> {
        let mut spec = self.config.synth.clone();
        spec.seed = seed;
        generate(&spec)?.write(w.dir())?;
        Ok(())
    }

    fn build_map(&self, w: &mut StageWriter) -> Result<()> {
        let source = self.input_mesh(w, &self.data("bank/template.obj")?)?;
        let target = self.template(w)?;
        let options = MapOptions {
            max_distance: Some(self.config.map.max_distance_fraction * target.bbox_diagonal()),
        };
        let map = build_map(&source, &target, options)?;
        map.save(&w.path("map.bin"))?;
        let mapped = apply_map(&map, source.vertices())?;
        let mut csv = String::from("target_vertex,face,distance\n");
        for (v, (e, p)) in map.entries().iter().zip(&mapped).enumerate() {
            writeln!(csv, "{v},{},{}", e.face, (p - target.vertices()[v]).norm())?;
        }
        write_text(&w.path("distances.csv"), &csv)
    }

    fn detect_aus(&self, w: &mut StageWriter, seed: u64) -> Result<()> {
        let cfg = &self.config.aus;
        let tpl = self.input_mesh(w, &self.data("bank/template.obj")?)?;
        ensure!(
            !tpl.landmarks().is_empty(),
            "bank template has no landmark sidecar (bank/template.lmk)"
        );
        let bank_dir = self.data("bank")?;
        w.input(&bank_dir)?;
        let names = ExpressionBank::load_dir(&bank_dir)?.aus().to_vec();
        let spectra = tpl
            .landmarks()
            .iter()
            .map(|&l| PatchSpectrum::build(&tpl, l, cfg.tau))
            .collect::<morphflow_core::Result<Vec<_>>>()?;

        let labelled = |w: &mut StageWriter, set: &str| -> Result<Vec<(Vec<f64>, Vec<u8>)>> {
            let dir = self.data(set)?;
            w.input(&dir)?;
            read_au_labels(&dir)?
                .into_iter()
                .map(|(file, bits)| {
                    ensure!(
                        bits.len() == names.len(),
                        "{set}/{file} has {} labels, the bank has {} AUs",
                        bits.len(),
                        names.len()
                    );
                    let mesh = load_obj(&dir.join(&file))?;
                    Ok((mesh_features(&mesh, &spectra)?, bits))
                })
                .collect()
        };
        let train_set = labelled(w, "au_train")?;
        let test_set = labelled(w, "au_test")?;
        let features: Vec<Vec<f64>> = train_set.iter().map(|(f, _)| f.clone()).collect();

        let mut classifiers = Vec::new();
        let mut accuracy = String::from("au,correct,total,accuracy\n");
        for (a, name) in names.iter().enumerate() {
            let labels: Vec<f64> = train_set.iter().map(|(_, b)| if b[a] == 1 { 1.0 } else { -1.0 }).collect();
            ensure!(
                labels.iter().any(|&y| y > 0.0) && labels.iter().any(|&y| y < 0.0),
                "AU {name} has a single class in au_train"
            );
            let options = SvmOptions {
                max_epochs: cfg.max_epochs,
                tolerance: cfg.tolerance,
                seed: derive_seed(seed, name),
            };
            let clf = AuClassifier::from_svm(name, &train_au_svm(&features, &labels, cfg.c, options)?);
            let correct = test_set.iter().filter(|(f, b)| clf.decide(f) == b[a]).count();
            let total = test_set.len();
            let acc = if total == 0 { f64::NAN } else { correct as f64 / total as f64 };
            writeln!(accuracy, "{name},{correct},{total},{acc}")?;
            classifiers.push(clf);
        }
        write_text(&w.path("accuracy.csv"), &accuracy)?;

        let mut detected = format!("# exemplar {}\n", names.join(" "));
        let ex_dir = self.data("exemplars")?;
        let exemplars = obj_files(&ex_dir)?;
        ensure!(!exemplars.is_empty(), "no exemplar scans in {}", ex_dir.display());
        for p in &exemplars {
            let mesh = self.input_mesh(w, p)?;
            let bits = detect_aus(&mesh, &spectra, &classifiers)?;
            let bits: Vec<String> = bits.iter().map(u8::to_string).collect();
            writeln!(detected, "{} {}", p.file_name().unwrap().to_string_lossy(), bits.join(" "))?;
        }
        write_text(&w.path("labels.txt"), &detected)?;
        ClassifierBank {
            tau: cfg.tau,
            landmarks: tpl.landmarks().to_vec(),
            classifiers,
        }
        .save(&w.path("classifiers.txt"))?;
        Ok(())
    }

    fn transfer(&self, w: &mut StageWriter, seed: u64) -> Result<()> {
        let cfg = &self.config.transfer;
        let bank_dir = self.data("bank")?;
        w.input(&bank_dir)?;
        let bank = ExpressionBank::load_dir(&bank_dir)?;
        ensure!(
            cfg.kappa <= bank.subjects().len(),
            "transfer.kappa = {} exceeds the {} bank subjects",
            cfg.kappa,
            bank.subjects().len()
        );
        let map_path = self.artifact(Stage::BuildMap, "map.bin")?;
        w.input(&map_path)?;
        let map = BarycentricMap::load(&map_path)?;
        let labels = self.artifact(Stage::DetectAus, "labels.txt")?;
        w.input(&labels)?;
        let detected = read_au_labels(labels.parent().unwrap())?;
        ensure!(!detected.is_empty(), "no detected expressions in {}", labels.display());

        let family = self.data("family")?;
        let neutrals: Vec<PathBuf> = obj_files(&family)?
            .into_iter()
            .filter(|p| stem(p).ends_with("_ex00"))
            .collect();
        ensure!(!neutrals.is_empty(), "no neutral scans (*_ex00.obj) in {}", family.display());

        let mut csv = String::from("identity,expression,subjects,flipped_faces,written\n");
        for path in &neutrals {
            let scan = self.input_mesh(w, path)?;
            let name = stem(path);
            let identity = name.trim_end_matches("_ex00");
            for (file, bits) in &detected {
                let expression = file.trim_end_matches(".obj");
                let params = TransferParams {
                    delta: cfg.delta,
                    kappa: cfg.kappa,
                    seed: derive_seed(seed, &format!("{identity}/{expression}")),
                };
                let neutral = vec![0u8; bits.len()];
                let t = transfer_expression(&scan, &neutral, bits, &bank, &map, params)?;
                let written = t.accepted() || !cfg.reject_flipped;
                if written {
                    save_obj(&t.mesh, &w.path(&format!("{identity}_{expression}.obj")))?;
                }
                let subjects: Vec<String> = t.subjects.iter().map(usize::to_string).collect();
                writeln!(
                    csv,
                    "{identity},{expression},{},{},{written}",
                    subjects.join(" "),
                    t.flipped.len()
                )?;
            }
        }
        write_text(&w.path("transfers.csv"), &csv)
    }

    fn assemble(&self, w: &mut StageWriter) -> Result<()> {
        let cfg = &self.config.assemble;
        let table = self.artifact(Stage::Transfer, "transfers.csv")?;
        w.input(&table)?;
        let text = std::fs::read_to_string(&table)?;
        let mut identities: Vec<String> = Vec::new();
        let mut expressions: Vec<String> = Vec::new();
        let mut written: BTreeMap<(String, String), bool> = BTreeMap::new();
        for line in text.lines().skip(1) {
            let f: Vec<&str> = line.split(',').collect();
            ensure!(f.len() == 5, "bad line in {}: '{line}'", table.display());
            if !identities.iter().any(|i| i == f[0]) {
                identities.push(f[0].to_string());
            }
            if !expressions.iter().any(|e| e == f[1]) {
                expressions.push(f[1].to_string());
            }
            written.insert((f[0].into(), f[1].into()), f[4] == "true");
        }
        let (kept, dropped): (Vec<String>, Vec<String>) = identities
            .into_iter()
            .partition(|i| expressions.iter().all(|e| written.get(&(i.clone(), e.clone())) == Some(&true)));
        ensure!(
            !kept.is_empty(),
            "every identity lost at least one expression to flipped triangles; nothing to assemble"
        );

        let mut grid = MeshGrid::new(kept.clone(), expressions.clone());
        for (i, id) in kept.iter().enumerate() {
            for (e, ex) in expressions.iter().enumerate() {
                let p = self.artifact(Stage::Transfer, &format!("{id}_{ex}.obj"))?;
                grid.insert(i, e, self.input_mesh(w, &p)?)?;
            }
        }
        let sym = if cfg.augment {
            let n = grid.get(0, 0).expect("grid is complete").vertex_count();
            let p = self.data("template.sym")?;
            w.input(&p)?;
            Some(SymmetryMap::load(&p, n)?)
        } else {
            None
        };
        let mut tensor = assemble_tensor(&grid, sym.as_ref(), cfg.augment)?;
        if cfg.align {
            tensor = tensor.procrustes_aligned(cfg.align_tolerance, cfg.align_max_iterations)?;
        }
        tensor.save(&w.path("tensor.bin"))?;
        let mut listing = String::from("identity,status\n");
        for i in &kept {
            writeln!(listing, "{i},kept")?;
        }
        for i in &dropped {
            writeln!(listing, "{i},dropped")?;
        }
        write_text(&w.path("identities.csv"), &listing)
    }

    fn hosvd(&self, w: &mut StageWriter, seed: u64) -> Result<()> {
        let cfg = &self.config.hosvd;
        let p = self.artifact(Stage::Assemble, "tensor.bin")?;
        w.input(&p)?;
        let tensor = ShapeTensor::load(&p)?;
        let (_, ni, ne) = tensor.dims();
        let full = hosvd(&tensor, ni, ne)?;
        let sv_id = full.singular_values_id().as_slice().to_vec();
        let sv_ex = full.singular_values_ex().as_slice().to_vec();
        let (raw_id, raw_ex) = match cfg.rank_rule {
            RankRule::Variance => (
                variance_truncation(&sv_id, cfg.variance_fraction)?,
                variance_truncation(&sv_ex, cfg.variance_fraction)?,
            ),
            RankRule::Parallel => (
                parallel_analysis(&tensor.unfold(2)?, cfg.permutations, derive_seed(seed, "identity"))?,
                parallel_analysis(&tensor.unfold(3)?, cfg.permutations, derive_seed(seed, "expression"))?,
            ),
            RankRule::Fixed => (0, 0),
        };
        let pick = |given: Option<usize>, raw: usize, n: usize, what: &str| -> Result<usize> {
            let d = given.unwrap_or(raw).max(cfg.min_rank);
            ensure!(d <= n, "{what} rank {d} exceeds the {n} available {what} slices");
            Ok(d)
        };
        let d_id = pick(cfg.d_id, raw_id, ni, "identity")?;
        let d_ex = pick(cfg.d_ex, raw_ex, ne, "expression")?;
        hosvd(&tensor, d_id, d_ex)?.save(&w.path("model.bin"))?;

        let mut csv = String::from("mode,index,singular_value,cumulative_energy\n");
        for (mode, sv) in [("identity", &sv_id), ("expression", &sv_ex)] {
            let total: f64 = sv.iter().map(|s| s * s).sum();
            let mut acc = 0.0;
            for (k, s) in sv.iter().enumerate() {
                acc += s * s;
                writeln!(csv, "{mode},{k},{s},{}", acc / total)?;
            }
        }
        write_text(&w.path("spectrum.csv"), &csv)?;
        let ranks = serde_json::json!({
            "rule": cfg.rank_rule,
            "selected": { "identity": raw_id, "expression": raw_ex },
            "d_id": d_id,
            "d_ex": d_ex,
        });
        write_text(&w.path("ranks.json"), &(serde_json::to_string_pretty(&ranks)? + "\n"))
    }

    fn train_flows(&self, w: &mut StageWriter, seed: u64) -> Result<()> {
        let model = self.model(w)?;
        for (space, codes) in [(Space::Identity, model.u_id()), (Space::Expression, model.u_ex())] {
            let data = codes.transpose();
            let init = Flow::new(data.nrows(), &self.config.flow.shape(), derive_seed(seed, &format!("{space}/init")))?;
            let mut cfg = self.config.flow.train.clone();
            cfg.seed = derive_seed(seed, &format!("{space}/train"));
            let (flow, history) = train(&init, &data, &cfg).with_context(|| format!("training the {space} flow"))?;
            flow.save(&w.path(&flow_file(space)))?;
            write_loss_csv(&history, &w.path(&format!("loss_{space}.csv")))?;
        }
        Ok(())
    }

    /// Coefficients `w` to a face: identities use the neutral expression,
    /// expressions the mean training identity.
    fn face(&self, model: &BilinearModel, template: &Mesh, space: Space, w: &DVector<f64>) -> Result<Mesh> {
        let flat = match space {
            Space::Identity => model.reconstruct(w, &self.neutral_code(model)?)?,
            Space::Expression => model.reconstruct(&mean_row(model.u_id()), w)?,
        };
        Ok(template.with_flat(flat.as_slice())?)
    }

    fn sample(&self, w: &mut StageWriter, seed: u64) -> Result<()> {
        let model = self.model(w)?;
        let flows = self.flows(w, &model)?;
        let template = self.template(w)?;
        let n = self.config.latent.samples;
        for space in SPACES {
            let (codes, flow) = space_parts(&model, flows.as_ref(), space);
            let d = codes.ncols();
            if let Some(flow) = flow {
                let z = GaussianPrior::standard(d).sample(n, derive_seed(seed, &format!("{space}/flow")))?;
                let mut out = Vec::new();
                for (k, col) in z.column_iter().enumerate() {
                    let z = col.into_owned();
                    let mesh = self.face(&model, &template, space, &flow.inverse(&z)?)?;
                    save_obj(&mesh, &w.path(&mesh_name(&format!("{space}_flow"), k)))?;
                    out.push(LatentCode::new(z, space, Coords::PostFlow));
                }
                save_codes(&out, &w.path(&format!("{space}_flow.codes")))?;
            }
            let prior = fit_prior(&rows_of(codes))?;
            let samples = prior.sample(n, derive_seed(seed, &format!("{space}/plain")))?;
            let mut out = Vec::new();
            for (k, col) in samples.column_iter().enumerate() {
                let wv = col.into_owned();
                let mesh = self.face(&model, &template, space, &wv)?;
                save_obj(&mesh, &w.path(&mesh_name(&format!("{space}_plain"), k)))?;
                out.push(LatentCode::new(wv, space, Coords::PreFlow));
            }
            save_codes(&out, &w.path(&format!("{space}_plain.codes")))?;
        }
        Ok(())
    }

    fn shell_radius(&self, preset: &ShellPreset, dim: usize) -> Result<f64> {
        Ok(match self.config.latent.shell {
            ShellRule::Chi2 => chi2_critical(dim as f64, preset.rho)?,
            ShellRule::Preset => preset.beta,
        })
    }

    fn project(&self, w: &mut StageWriter) -> Result<()> {
        let model = self.model(w)?;
        let flows = self.flows(w, &model)?;
        let template = self.template(w)?;
        let presets = self.config.latent.presets;
        let mut shells = String::from("space,dim,rho,preset_zeta,preset_beta,chi2_beta,beta\n");
        let mut table = String::from("space,variant,sample,beta,mahalanobis,nearest_training,distance\n");
        for space in SPACES {
            let (codes, flow) = space_parts(&model, flows.as_ref(), space);
            let d = codes.ncols();
            let preset = match space {
                Space::Identity => presets.identity,
                Space::Expression => presets.expression,
            };
            let beta = self.shell_radius(&preset, d)?;
            writeln!(
                shells,
                "{space},{d},{},{},{},{},{beta}",
                preset.rho,
                preset.zeta,
                preset.beta,
                chi2_critical(d as f64, preset.rho)?
            )?;
            let pool: Vec<LatentCode> = rows_of(codes)
                .into_iter()
                .map(|c| LatentCode::new(c, space, Coords::PreFlow))
                .collect();
            let mut variants = vec![("plain", fit_prior(&rows_of(codes))?, None)];
            if let Some(f) = flow {
                variants.insert(0, ("flow", GaussianPrior::standard(d), Some(f)));
            }
            for (variant, prior, flow) in variants {
                let src = self.artifact(Stage::Sample, &format!("{space}_{variant}.codes"))?;
                w.input(&src)?;
                let mut out = Vec::new();
                for (k, code) in load_codes(&src)?.into_iter().enumerate() {
                    ensure!(code.dim() == d, "{} holds codes of length {}, model rank {d}", src.display(), code.dim());
                    let t = project_to_hyperellipsoid(&code.values, &prior, beta)?;
                    let wv = decode(flow, &t)?;
                    let mesh = self.face(&model, &template, space, &wv)?;
                    save_obj(&mesh, &w.path(&mesh_name(&format!("{space}_{variant}"), k)))?;
                    let query = LatentCode::new(wv, space, Coords::PreFlow);
                    let (nn, dist) = nearest_neighbor(&query, &pool)?;
                    writeln!(table, "{space},{variant},{k},{beta},{},{nn},{dist}", prior.mahalanobis(&t))?;
                    out.push(LatentCode::new(t, code.space, code.coords));
                }
                save_codes(&out, &w.path(&format!("{space}_{variant}.codes")))?;
            }
        }
        write_text(&w.path("shells.csv"), &shells)?;
        write_text(&w.path("neighbors.csv"), &table)
    }

    fn interpolate(&self, w: &mut StageWriter) -> Result<()> {
        let model = self.model(w)?;
        let flows = self.flows(w, &model)?;
        let template = self.template(w)?;
        let cfg = &self.config.latent;
        let flow = flows.as_ref().map(|(_, ex)| ex);
        let w_id = mean_row(model.u_id());
        let a = self.config.fit.neutral_expression;
        let mut steps = String::from("from,to,index,nu,step\n");
        let mut summary = String::from("from,to,average_step,max_step,ratio,smooth\n");
        for b in (0..model.u_ex().nrows()).filter(|&b| b != a) {
            let path = expression_path(
                &model,
                flow,
                &w_id,
                &model.expression_code(a),
                &model.expression_code(b),
                cfg.interpolation_step,
            )?;
            let faces: Vec<DVector<f64>> = path.iter().map(|(_, x)| x.clone()).collect();
            let sizes = step_sizes(&faces);
            for (k, (nu, x)) in path.iter().enumerate() {
                let mesh = template.with_flat(x.as_slice())?;
                save_obj(&mesh, &w.path(&format!("ex{a:02}_ex{b:02}_{k:02}.obj")))?;
                let step = if k == 0 { 0.0 } else { sizes[k - 1] };
                writeln!(steps, "{a},{b},{k},{nu},{step}")?;
            }
            let s = smoothness(&faces)?;
            writeln!(
                summary,
                "{a},{b},{},{},{},{}",
                s.average_step,
                s.max_step,
                s.ratio(),
                s.is_smooth(cfg.smoothness_factor)
            )?;
        }
        write_text(&w.path("steps.csv"), &steps)?;
        write_text(&w.path("smoothness.csv"), &summary)
    }

    fn fit(&self, w: &mut StageWriter) -> Result<()> {
        let model = self.model(w)?;
        let flows = self.flows(w, &model)?;
        let handles = match &flows {
            Some((id, ex)) => Flows::new(id, ex),
            None => Flows::none(),
        };
        let dir = self.data("targets")?;
        let paths = obj_files(&dir)?;
        ensure!(!paths.is_empty(), "no target scans in {}", dir.display());
        let mut targets = Vec::new();
        for p in &paths {
            targets.push((stem(p), self.input_mesh(w, p)?));
        }
        let results = fit_all(&model, handles, &targets, &self.config.fit)?;

        let mut table = String::from("target,vertices,mean,std,max,rms,energy,verts_energy,prior_energy,iterations,converged\n");
        let mut traces = String::from("target,iteration,energy\n");
        for ((name, _), r) in targets.iter().zip(&results) {
            let e = morphflow_core::fitting::ErrorSummary::of(&r.per_vertex_error)?;
            writeln!(
                table,
                "{name},{},{},{},{},{},{},{},{},{},{}",
                r.per_vertex_error.len(),
                e.mean,
                e.std,
                e.max,
                e.rms,
                r.energy.total,
                r.energy.verts,
                r.energy.prior,
                r.energy_trace.len() - 1,
                r.converged
            )?;
            for (k, v) in r.energy_trace.iter().enumerate() {
                writeln!(traces, "{name},{k},{v}")?;
            }
            write_text(&w.path(&format!("{name}.err")), &format_errors(&r.per_vertex_error))?;
            save_obj(&r.reconstruction, &w.path(&format!("{name}_fit.obj")))?;
            save_codes(&[r.z_id.clone(), r.z_ex.clone()], &w.path(&format!("{name}.codes")))?;
        }
        write_text(&w.path("results.csv"), &table)?;
        write_text(&w.path("traces.csv"), &traces)
    }

    fn report(&self, w: &mut StageWriter) -> Result<()> {
        let table = self.artifact(Stage::Fit, "results.csv")?;
        w.input(&table)?;
        let text = std::fs::read_to_string(&table)?;
        let mut targets = Vec::new();
        for line in text.lines().skip(1).filter(|l| !l.trim().is_empty()) {
            let name = line.split(',').next().unwrap().to_string();
            let p = self.artifact(Stage::Fit, &format!("{name}.err"))?;
            w.input(&p)?;
            targets.push((name, read_errors(&p)?));
        }
        let rows = summarize(&targets)?;
        write_text(&w.path("summary.csv"), &summary_csv(&rows))?;
        for (name, errors) in &targets {
            let mut csv = String::from("vertex,error\n");
            for (v, e) in errors.iter().enumerate() {
                writeln!(csv, "{v},{e:?}")?;
            }
            write_text(&w.path(&format!("errors/{name}.csv")), &csv)?;
        }
        for stage in [Stage::Sample, Stage::Project, Stage::Interpolate] {
            let dir = self.stage_dir.join(stage.name());
            if !dir.is_dir() {
                continue;
            }
            for f in list_files(&dir)?.into_iter().filter(|p| p.extension().is_some_and(|e| e == "obj")) {
                w.input(&f)?;
                let dest = w.path(&format!("meshes/{stage}/{}", f.file_name().unwrap().to_string_lossy()));
                write_atomic(&dest, &std::fs::read(&f)?)?;
            }
        }
        Ok(())
    }
}

fn space_parts<'a>(
    model: &'a BilinearModel,
    flows: Option<&'a (Flow, Flow)>,
    space: Space,
) -> (&'a DMatrix<f64>, Option<&'a Flow>) {
    match space {
        Space::Identity => (model.u_id(), flows.map(|f| &f.0)),
        Space::Expression => (model.u_ex(), flows.map(|f| &f.1)),
    }
}

/// Fits every target, spreading them over the available cores. Results
/// come back in target order whatever the thread count.
pub fn fit_all(
    model: &BilinearModel,
    flows: Flows,
    targets: &[(String, Mesh)],
    config: &morphflow_core::fitting::FitConfig,
) -> Result<Vec<FitResult>> {
    let threads = std::thread::available_parallelism().map_or(1, |n| n.get()).min(targets.len()).max(1);
    let chunk = targets.len().div_ceil(threads);
    std::thread::scope(|s| {
        let handles: Vec<_> = targets
            .chunks(chunk)
            .map(|part| {
                s.spawn(move || {
                    part.iter()
                        .map(|(name, mesh)| fit(model, flows, mesh, config).with_context(|| format!("fitting {name}")))
                        .collect::<Result<Vec<_>>>()
                })
            })
            .collect();
        let mut out = Vec::with_capacity(targets.len());
        for h in handles {
            out.extend(h.join().expect("fit worker panicked")?);
        }
        Ok(out)
    })
}
