use std::fmt::Write as _;
use std::path::Path;

use super::laplacian::{project_patch, PatchSpectrum};
use super::svm::{dot, LinearSvm};
use crate::fsutil::write_atomic;
use crate::geometry::Mesh;
use crate::{Error, Result};

pub const FEATURE_LAYOUT: &str = "landmark-major/xyz/tau-v1";

/// Binary linear classifier for one action unit.
#[derive(Debug, Clone, PartialEq)]
pub struct AuClassifier {
    pub au_id: String,
    pub weights: Vec<f64>,
    pub bias: f64,
    pub c: f64,
}

impl AuClassifier {
    pub fn from_svm(au_id: impl Into<String>, svm: &LinearSvm) -> Self {
        Self {
            au_id: au_id.into(),
            weights: svm.weights.clone(),
            bias: svm.bias,
            c: svm.c,
        }
    }

    pub fn decide(&self, features: &[f64]) -> u8 {
        u8::from(dot(&self.weights, features) + self.bias > 0.0)
    }
}

/// Stacked spectral feature vector of a mesh.
pub fn mesh_features(mesh: &Mesh, spectra: &[PatchSpectrum]) -> Result<Vec<f64>> {
    let mut out = Vec::new();
    for s in spectra {
        if s.vertices.iter().any(|&i| i >= mesh.vertex_count()) {
            return Err(Error::Dimension(format!(
                "patch of landmark {} does not fit a {}-vertex mesh",
                s.landmark,
                mesh.vertex_count()
            )));
        }
        out.extend(project_patch(s, &s.gather(mesh.vertices()))?);
    }
    Ok(out)
}

/// Binary AU vector: entry `a` is 1 when classifier `a` fires.
pub fn detect_aus(mesh: &Mesh, spectra: &[PatchSpectrum], classifiers: &[AuClassifier]) -> Result<Vec<u8>> {
    let expected: usize = spectra.iter().map(|s| 3 * s.tau()).sum();
    if let Some(bad) = classifiers.iter().find(|c| c.weights.len() != expected) {
        return Err(Error::Dimension(format!(
            "spectra/classifier landmark mismatch: classifier '{}' has {} weights, spectra give {expected} features",
            bad.au_id,
            bad.weights.len()
        )));
    }
    let features = mesh_features(mesh, spectra)?;
    Ok(classifiers.iter().map(|c| c.decide(&features)).collect())
}

/// A trained classifier bank and the patch layout it expects.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierBank {
    pub tau: usize,
    pub landmarks: Vec<usize>,
    pub classifiers: Vec<AuClassifier>,
}

impl ClassifierBank {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        writeln!(s, "# au classifier bank: au_id C bias weights...").unwrap();
        writeln!(s, "layout {FEATURE_LAYOUT}").unwrap();
        writeln!(s, "tau {}", self.tau).unwrap();
        let lm: Vec<String> = self.landmarks.iter().map(|l| l.to_string()).collect();
        writeln!(s, "landmarks {}", lm.join(" ")).unwrap();
        for c in &self.classifiers {
            write!(s, "au {} {:?} {:?}", c.au_id, c.c, c.bias).unwrap();
            for w in &c.weights {
                write!(s, " {w:?}").unwrap();
            }
            s.push('\n');
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut tau = None;
        let mut landmarks = None;
        let mut classifiers = Vec::new();
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let mut t = line.split_whitespace();
            let key = t.next().unwrap();
            let bad = || Error::Format(format!("bad classifier bank line '{line}'"));
            match key {
                "layout" => {
                    let v = t.next().unwrap_or("");
                    if v != FEATURE_LAYOUT {
                        return Err(Error::Format(format!(
                            "feature layout '{v}' does not match '{FEATURE_LAYOUT}'"
                        )));
                    }
                }
                "tau" => tau = Some(t.next().and_then(|v| v.parse().ok()).ok_or_else(bad)?),
                "landmarks" => {
                    landmarks = Some(
                        t.map(|v| v.parse::<usize>())
                            .collect::<std::result::Result<Vec<_>, _>>()
                            .map_err(|_| bad())?,
                    )
                }
                "au" => {
                    let id = t.next().ok_or_else(bad)?.to_string();
                    let nums: Vec<f64> = t
                        .map(|v| v.parse::<f64>())
                        .collect::<std::result::Result<_, _>>()
                        .map_err(|_| bad())?;
                    if nums.len() < 2 {
                        return Err(bad());
                    }
                    classifiers.push(AuClassifier {
                        au_id: id,
                        c: nums[0],
                        bias: nums[1],
                        weights: nums[2..].to_vec(),
                    });
                }
                _ => return Err(bad()),
            }
        }
        let tau = tau.ok_or_else(|| Error::Format("classifier bank lacks 'tau'".into()))?;
        let landmarks = landmarks.ok_or_else(|| Error::Format("classifier bank lacks 'landmarks'".into()))?;
        Ok(Self {
            tau,
            landmarks,
            classifiers,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_text().as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Vec3;

    fn fan() -> Mesh {
        let n = 12;
        let mut v = vec![Vec3::zeros()];
        for k in 0..n {
            let a = k as f64 / n as f64 * std::f64::consts::TAU;
            v.push(Vec3::new(a.cos(), a.sin(), 0.0));
        }
        let f = (0..n).map(|k| [0, 1 + k, 1 + (k + 1) % n]).collect();
        Mesh::new(v, f, vec![0]).unwrap()
    }

    #[test]
    fn zero_classifier_never_fires() {
        let m = fan();
        let spec = vec![PatchSpectrum::build(&m, 0, 4).unwrap()];
        let c = AuClassifier {
            au_id: "a".into(),
            weights: vec![0.0; 12],
            bias: -1.0,
            c: 1.0,
        };
        assert_eq!(detect_aus(&m, &spec, &[c.clone(), c]).unwrap(), vec![0, 0]);
    }

    #[test]
    fn mismatched_weights_rejected() {
        let m = fan();
        let spec = vec![PatchSpectrum::build(&m, 0, 4).unwrap()];
        let c = AuClassifier {
            au_id: "a".into(),
            weights: vec![0.0; 5],
            bias: 0.0,
            c: 1.0,
        };
        assert!(detect_aus(&m, &spec, &[c]).is_err());
    }

    #[test]
    fn bank_text_round_trip() {
        let bank = ClassifierBank {
            tau: 2,
            landmarks: vec![4, 9],
            classifiers: vec![AuClassifier {
                au_id: "au3".into(),
                weights: vec![0.1, -2.5e-7, 3.0],
                bias: -0.25,
                c: 1.0,
            }],
        };
        assert_eq!(ClassifierBank::from_text(&bank.to_text()).unwrap(), bank);
        let other = bank.to_text().replace(FEATURE_LAYOUT, "old-layout");
        assert!(ClassifierBank::from_text(&other).is_err());
    }
}
