//! Stage manifests: content hashes of every input and output.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context as _, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use morphflow_core::fsutil::write_atomic;

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub stage: String,
    pub tool: String,
    pub version: String,
    /// Root seed and the seed this stage derived from it.
    pub seed: u64,
    pub stage_seed: u64,
    pub config: serde_json::Value,
    /// Path (relative to the stage directory when inside it) to sha256.
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Every regular file below `root`, sorted.
pub fn list_files(root: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).with_context(|| format!("listing {}", dir.display()))? {
            let path = entry?.path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.push(path);
            }
        }
    }
    out.sort();
    Ok(out)
}

/// `path` relative to `root` with `/` separators, or the full path when
/// it lies outside.
pub fn key(root: &Path, path: &Path) -> String {
    match path.strip_prefix(root) {
        Ok(rel) => rel.components().map(|c| c.as_os_str().to_string_lossy()).collect::<Vec<_>>().join("/"),
        Err(_) => path.display().to_string(),
    }
}

/// Collects outputs in `<root>/.<stage>.partial/`, then replaces
/// `<root>/<stage>/` in one rename once the manifest is written.
pub struct StageWriter {
    root: PathBuf,
    stage: String,
    partial: PathBuf,
    inputs: BTreeMap<String, String>,
}

impl StageWriter {
    pub fn begin(root: &Path, stage: &str) -> Result<Self> {
        let partial = root.join(format!(".{stage}.partial"));
        if partial.exists() {
            fs::remove_dir_all(&partial).with_context(|| format!("clearing {}", partial.display()))?;
        }
        fs::create_dir_all(&partial).with_context(|| format!("creating {}", partial.display()))?;
        Ok(Self {
            root: root.to_path_buf(),
            stage: stage.to_string(),
            partial,
            inputs: BTreeMap::new(),
        })
    }

    /// Directory the stage writes into.
    pub fn dir(&self) -> &Path {
        &self.partial
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.partial.join(rel)
    }

    /// Records a file, or every file below a directory, as an input.
    pub fn input(&mut self, path: &Path) -> Result<()> {
        let files = if path.is_dir() { list_files(path)? } else { vec![path.to_path_buf()] };
        for f in files {
            self.inputs.insert(key(&self.root, &f), sha256_file(&f)?);
        }
        Ok(())
    }

    pub fn finish(mut self, seed: u64, stage_seed: u64, config: serde_json::Value) -> Result<Manifest> {
        let final_dir = self.root.join(&self.stage);
        let mut outputs = BTreeMap::new();
        for f in list_files(&self.partial)? {
            let rel = key(&self.partial, &f);
            if rel == MANIFEST_FILE {
                continue;
            }
            outputs.insert(format!("{}/{rel}", self.stage), sha256_file(&f)?);
        }
        let manifest = Manifest {
            stage: self.stage.clone(),
            tool: env!("CARGO_PKG_NAME").to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            seed,
            stage_seed,
            config,
            inputs: std::mem::take(&mut self.inputs),
            outputs,
        };
        let text = serde_json::to_string_pretty(&manifest)? + "\n";
        write_atomic(&self.partial.join(MANIFEST_FILE), text.as_bytes())?;
        if final_dir.exists() {
            fs::remove_dir_all(&final_dir).with_context(|| format!("replacing {}", final_dir.display()))?;
        }
        fs::rename(&self.partial, &final_dir)
            .with_context(|| format!("moving {} to {}", self.partial.display(), final_dir.display()))?;
        Ok(manifest)
    }
}

/// A stage that fails leaves no partial directory behind.
impl Drop for StageWriter {
    fn drop(&mut self) {
        let _ = fs::remove_dir_all(&self.partial);
    }
}

pub fn load_manifest(path: &Path) -> Result<Manifest> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn resolve(root: &Path, k: &str) -> PathBuf {
    let p = Path::new(k);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        root.join(p)
    }
}

/// Checks that every recorded hash, input or output, matches the file on
/// disk. Returns the number of manifests checked.
pub fn verify_stage_dir(root: &Path) -> Result<usize> {
    let mut problems = Vec::new();
    let mut count = 0;
    let mut dirs: Vec<PathBuf> = fs::read_dir(root)?.filter_map(|e| e.ok().map(|e| e.path())).collect();
    dirs.sort();
    for dir in dirs {
        let path = dir.join(MANIFEST_FILE);
        if !path.is_file() {
            continue;
        }
        count += 1;
        let m = load_manifest(&path)?;
        for (k, h) in m.inputs.iter().chain(&m.outputs) {
            let file = resolve(root, k);
            match sha256_file(&file) {
                Ok(actual) if &actual == h => {}
                Ok(_) => problems.push(format!("{}: {k} changed since it was recorded", m.stage)),
                Err(_) => problems.push(format!("{}: {k} is missing", m.stage)),
            }
        }
    }
    if !problems.is_empty() {
        bail!("stage manifests out of date:\n  {}", problems.join("\n  "));
    }
    Ok(count)
}
