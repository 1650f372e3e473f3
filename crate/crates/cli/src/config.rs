//! Pipeline configuration: one TOML file with a section per stage.

use std::path::{Path, PathBuf};

use anyhow::{Context as _, Result};
use morphflow_core::fitting::FitConfig;
use morphflow_core::flow::{FlowShape, TrainConfig};
use morphflow_core::latent::LatentPresets;
use morphflow_core::synth::SyntheticFamilySpec;
use serde::{Deserialize, Serialize};

use crate::UsageError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Root seed; every stochastic stage derives its own seed from it.
    pub seed: u64,
    pub paths: PathsConfig,
    pub synth: SyntheticFamilySpec,
    pub map: MapConfig,
    pub aus: AuConfig,
    pub transfer: TransferConfig,
    pub assemble: AssembleConfig,
    pub hosvd: HosvdConfig,
    pub flow: FlowConfig,
    pub latent: LatentConfig,
    pub fit: FitConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            paths: PathsConfig::default(),
            synth: SyntheticFamilySpec::default(),
            map: MapConfig::default(),
            aus: AuConfig::default(),
            transfer: TransferConfig::default(),
            assemble: AssembleConfig::default(),
            hosvd: HosvdConfig::default(),
            flow: FlowConfig::default(),
            latent: LatentConfig::default(),
            fit: FitConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    /// Every stage writes to `<stage_dir>/<stage>/`.
    pub stage_dir: PathBuf,
    /// Input dataset; defaults to the `synth` stage output.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub data: Option<PathBuf>,
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self {
            stage_dir: PathBuf::from("stages"),
            data: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MapConfig {
    /// Rejection distance as a fraction of the target bounding-box diagonal.
    pub max_distance_fraction: f64,
}

impl Default for MapConfig {
    fn default() -> Self {
        Self {
            max_distance_fraction: 0.05,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AuConfig {
    /// Laplacian eigenvectors kept per landmark patch.
    pub tau: usize,
    /// SVM regularization constant.
    pub c: f64,
    pub max_epochs: usize,
    pub tolerance: f64,
}

impl Default for AuConfig {
    fn default() -> Self {
        Self {
            tau: 12,
            c: 1.0,
            max_epochs: 5000,
            tolerance: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TransferConfig {
    /// Expression intensity.
    pub delta: f64,
    /// Bank subjects averaged per transfer.
    pub kappa: usize,
    /// Drop transferred meshes with flipped triangles.
    pub reject_flipped: bool,
}

impl Default for TransferConfig {
    fn default() -> Self {
        Self {
            delta: 1.0,
            kappa: 8,
            reject_flipped: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AssembleConfig {
    /// Add mirrored and symmetrized copies of every identity.
    pub augment: bool,
    /// Generalized Procrustes alignment of every tensor slice.
    pub align: bool,
    pub align_tolerance: f64,
    pub align_max_iterations: usize,
}

impl Default for AssembleConfig {
    fn default() -> Self {
        Self {
            augment: true,
            align: true,
            align_tolerance: 1e-12,
            align_max_iterations: 200,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RankRule {
    /// Smallest rank reaching `variance_fraction` of the mode energy.
    Variance,
    /// Permutation parallel analysis.
    Parallel,
    /// `d_id` and `d_ex` as given.
    Fixed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HosvdConfig {
    pub rank_rule: RankRule,
    pub variance_fraction: f64,
    pub permutations: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub d_id: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub d_ex: Option<usize>,
    /// Lower clamp on the selected ranks; flows need at least two dimensions.
    pub min_rank: usize,
}

impl Default for HosvdConfig {
    fn default() -> Self {
        Self {
            rank_rule: RankRule::Variance,
            variance_fraction: 0.95,
            permutations: 200,
            d_id: None,
            d_ex: None,
            min_rank: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FlowConfig {
    /// Affine coupling layers.
    pub layers: usize,
    /// Hidden widths of every scale and translation network.
    pub hidden: Vec<usize>,
    /// Sample, project, interpolate and fit through the flows; when off,
    /// those stages work directly on the bilinear coefficients.
    pub enabled: bool,
    pub train: TrainConfig,
}

impl Default for FlowConfig {
    fn default() -> Self {
        let shape = FlowShape::default();
        Self {
            layers: shape.layers,
            hidden: shape.hidden,
            enabled: true,
            train: TrainConfig::default(),
        }
    }
}

impl FlowConfig {
    pub fn shape(&self) -> FlowShape {
        FlowShape {
            layers: self.layers,
            hidden: self.hidden.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShellRule {
    /// `β = sqrt(χ²_d(ρ))` with `d` the latent dimension of the trained model.
    Chi2,
    /// The preset `β` verbatim.
    Preset,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LatentConfig {
    pub presets: LatentPresets,
    pub shell: ShellRule,
    /// Draws per space and variant in `sample`.
    pub samples: usize,
    /// Interpolation increment in `ν`.
    pub interpolation_step: f64,
    /// Largest allowed ratio of one interpolation step to the average step.
    pub smoothness_factor: f64,
}

impl Default for LatentConfig {
    fn default() -> Self {
        Self {
            presets: LatentPresets::published(),
            shell: ShellRule::Chi2,
            samples: 8,
            interpolation_step: 0.25,
            smoothness_factor: 4.0,
        }
    }
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| UsageError(format!("invalid config: {e}")).into())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| UsageError(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_toml(&text).with_context(|| format!("in {}", path.display()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Every problem in the config, across all sections.
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        let mut core = |section: &str, r: morphflow_core::Result<()>| {
            match r {
                Ok(()) => {}
                Err(morphflow_core::Error::InvalidArgument(msg)) => {
                    out.extend(msg.split("; ").map(|p| format!("[{section}] {p}")));
                }
                Err(e) => out.push(format!("[{section}] {e}")),
            }
        };
        core("synth", self.synth.validate());
        core("flow.train", self.flow.train.validate());
        core("fit", self.fit.validate());
        if self.synth.seed != 0 {
            out.push("[synth] seed is derived from the top-level seed; remove it".into());
        }
        if self.flow.train.seed != 0 {
            out.push("[flow.train] seed is derived from the top-level seed; remove it".into());
        }
        if !(self.map.max_distance_fraction > 0.0) {
            out.push(format!(
                "[map] max_distance_fraction must be positive, got {}",
                self.map.max_distance_fraction
            ));
        }
        if self.aus.tau == 0 {
            out.push("[aus] tau must be positive".into());
        }
        if !(self.aus.c > 0.0 && self.aus.c.is_finite()) {
            out.push(format!("[aus] c must be positive, got {}", self.aus.c));
        }
        if self.aus.max_epochs == 0 {
            out.push("[aus] max_epochs must be positive".into());
        }
        if !(self.transfer.delta.is_finite()) {
            out.push(format!("[transfer] delta must be finite, got {}", self.transfer.delta));
        }
        if self.transfer.kappa == 0 {
            out.push("[transfer] kappa must be positive".into());
        }
        let h = &self.hosvd;
        if !(h.variance_fraction > 0.0 && h.variance_fraction <= 1.0) {
            out.push(format!("[hosvd] variance_fraction must lie in (0, 1], got {}", h.variance_fraction));
        }
        if h.rank_rule == RankRule::Parallel && h.permutations == 0 {
            out.push("[hosvd] permutations must be positive for the parallel rule".into());
        }
        if h.rank_rule == RankRule::Fixed && (h.d_id.is_none() || h.d_ex.is_none()) {
            out.push("[hosvd] the fixed rule needs both d_id and d_ex".into());
        }
        if h.d_id == Some(0) || h.d_ex == Some(0) {
            out.push("[hosvd] ranks must be positive".into());
        }
        if h.min_rank == 0 {
            out.push("[hosvd] min_rank must be positive".into());
        }
        if self.flow.layers == 0 {
            out.push("[flow] layers must be positive".into());
        }
        if self.flow.hidden.iter().any(|&w| w == 0) {
            out.push("[flow] hidden widths must be positive".into());
        }
        for (name, p) in [
            ("identity", &self.latent.presets.identity),
            ("expression", &self.latent.presets.expression),
        ] {
            if !(p.rho > 0.0 && p.rho < 1.0) {
                out.push(format!("[latent.presets.{name}] rho must lie in (0, 1), got {}", p.rho));
            }
            if !(p.beta > 0.0) {
                out.push(format!("[latent.presets.{name}] beta must be positive, got {}", p.beta));
            }
        }
        if self.latent.samples == 0 {
            out.push("[latent] samples must be positive".into());
        }
        let step = self.latent.interpolation_step;
        if !(step > 0.0 && step <= 1.0) || ((1.0 / step).round() * step - 1.0).abs() > 1e-9 {
            out.push(format!("[latent] interpolation_step must divide 1 evenly, got {step}"));
        }
        if !(self.latent.smoothness_factor > 1.0) {
            out.push(format!(
                "[latent] smoothness_factor must exceed 1, got {}",
                self.latent.smoothness_factor
            ));
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let problems = self.problems();
        if problems.is_empty() {
            Ok(())
        } else {
            Err(UsageError(format!("invalid config:\n  {}", problems.join("\n  "))).into())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let c = PipelineConfig::default();
        let back = PipelineConfig::from_toml(&c.to_toml()).unwrap();
        assert_eq!(back, c);
        assert!(c.problems().is_empty(), "{:?}", c.problems());
    }

    #[test]
    fn partial_file_keeps_defaults() {
        let c = PipelineConfig::from_toml("seed = 9\n[transfer]\nkappa = 3\n").unwrap();
        assert_eq!(c.seed, 9);
        assert_eq!(c.transfer.kappa, 3);
        assert_eq!(c.transfer.delta, 1.0);
        assert_eq!(c.latent.presets, LatentPresets::published());
    }

    #[test]
    fn presets_are_read_verbatim() {
        let text = "[latent.presets.expression]\nrho = 0.99\nzeta = 7.0\nbeta = 4.07\n\
                    [latent.presets.identity]\nrho = 0.99\nzeta = 26.0\nbeta = 6.01\n";
        let c = PipelineConfig::from_toml(text).unwrap();
        assert_eq!(c.latent.presets.expression.beta, 4.07);
        assert_eq!(c.latent.presets.expression.zeta, 7.0);
        assert_eq!(c.latent.presets.identity.beta, 6.01);
        assert_eq!(c.latent.presets.identity.zeta, 26.0);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = PipelineConfig::from_toml("[transfer]\nkapa = 3\n").unwrap_err();
        assert!(err.downcast_ref::<UsageError>().is_some());
        assert!(err.to_string().contains("kapa"), "{err}");
    }

    #[test]
    fn every_problem_is_listed() {
        let mut c = PipelineConfig::default();
        c.synth.vertices = 10;
        c.transfer.kappa = 0;
        c.fit.gamma2 = 0.5;
        c.latent.interpolation_step = 0.3;
        c.hosvd.rank_rule = RankRule::Fixed;
        let msg = c.validate().unwrap_err().to_string();
        for needle in ["[synth] vertices", "[transfer] kappa", "[fit] gamma1 + gamma2", "interpolation_step", "fixed rule"] {
            assert!(msg.contains(needle), "missing '{needle}' in {msg}");
        }
    }
}
