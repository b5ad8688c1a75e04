//! Run manifests: a TOML document naming the inputs and every knob of a run.
//!
//! ```toml
//! seed = 7
//!
//! [subjects]
//! tokens = [1, 2, 3]
//! background = 0          # optional
//!
//! [grid]                  # optional; checked against input tensors
//! side = 16
//! tokens = 8
//!
//! [inputs]                # paths are relative to the manifest
//! attention = "attention.xamt"
//! latent = "latent.xamt"
//! masks = ["mask_0.xamt", "mask_1.xamt", "mask_2.xamt"]
//! ```
//!
//! `[weights]`, `[schedule]`, `[gamma]`, `[imputation]`, `[flags]`,
//! `[preprocess]`, `[toy]`, `[gradcheck]` and `[debug]` are optional and
//! default field by field.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::excite::LossWeights;
use crate::gradcheck::GradCheckSettings;
use crate::guidance::{AblationFlags, GuidanceConfig, PhaseSchedule};
use crate::layout::{GammaConfig, ImputationConfig, ImputationMode};
use crate::tensor::{Preprocess, SubjectSet, LATENT_CHANNELS};
use crate::toy::DEFAULT_KEY_SCALE;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SubjectsSection {
    pub tokens: Vec<usize>,
    #[serde(default)]
    pub background: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSection {
    pub side: usize,
    pub tokens: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InputsSection {
    pub attention: Option<PathBuf>,
    pub latent: Option<PathBuf>,
    pub masks: Option<Vec<PathBuf>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ImputationSection {
    pub mode: Option<ImputationMode>,
    pub k: usize,
}

impl Default for ImputationSection {
    fn default() -> Self {
        ImputationSection {
            mode: None,
            k: ImputationConfig::default().k,
        }
    }
}

/// Toy attention model and synthetic latent settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToySection {
    pub side: usize,
    pub tokens: usize,
    pub channels: usize,
    pub key_scale: f64,
}

impl Default for ToySection {
    fn default() -> Self {
        ToySection {
            side: 16,
            tokens: 8,
            channels: LATENT_CHANNELS,
            key_scale: DEFAULT_KEY_SCALE,
        }
    }
}

/// Size of a `gradcheck` run; instance shapes come from `[toy]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradCheckSection {
    pub instances: usize,
    /// Latent coordinates probed per composite instance; omit to probe all.
    pub composite_coords: Option<usize>,
}

impl Default for GradCheckSection {
    fn default() -> Self {
        GradCheckSection {
            instances: 5,
            composite_coords: Some(64),
        }
    }
}

/// Hooks for exercising failure paths.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DebugSection {
    /// Perturb analytic gradients inside `gradcheck` so it must fail.
    pub corrupt_gradient: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    #[serde(default)]
    pub seed: u64,
    pub subjects: SubjectsSection,
    #[serde(default)]
    pub grid: Option<GridSection>,
    #[serde(default)]
    pub inputs: InputsSection,
    #[serde(default)]
    pub weights: LossWeights,
    #[serde(default)]
    pub schedule: PhaseSchedule,
    #[serde(default)]
    pub gamma: GammaConfig,
    #[serde(default)]
    pub imputation: ImputationSection,
    #[serde(default)]
    pub flags: AblationFlags,
    #[serde(default)]
    pub preprocess: Preprocess,
    #[serde(default)]
    pub toy: ToySection,
    #[serde(default)]
    pub gradcheck: GradCheckSection,
    #[serde(default)]
    pub debug: DebugSection,
    /// Directory that relative input paths resolve against.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl RunManifest {
    /// Parses and validates manifest text. Input paths are not touched.
    pub fn parse(text: &str, base_dir: &Path) -> Result<Self> {
        let mut m: RunManifest =
            toml::from_str(text).map_err(|e| Error::Manifest(e.to_string()))?;
        m.base_dir = base_dir.to_path_buf();
        m.validate()?;
        Ok(m)
    }

    /// Gradient-check settings for this manifest.
    pub fn gradcheck_settings(&self) -> GradCheckSettings {
        GradCheckSettings {
            side: self.toy.side,
            tokens: self.toy.tokens,
            channels: self.toy.channels,
            key_scale: self.toy.key_scale,
            instances: self.gradcheck.instances,
            composite_coords: self.gradcheck.composite_coords,
            seed: self.seed,
            corrupt_gradient: self.debug.corrupt_gradient,
        }
    }

    /// Reads, parses and validates a manifest, checking that every input exists.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Manifest(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        let m = Self::parse(&text, base)?;
        m.check_inputs_exist()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        let wrap = |e: Error| Error::Manifest(e.to_string());
        let subjects = self.subject_set()?;
        if subjects.is_empty() {
            return Err(Error::Manifest("subjects.tokens is empty".into()));
        }
        if let Some(g) = &self.grid {
            if g.side < 2 || g.tokens == 0 {
                return Err(Error::Manifest(format!(
                    "grid side {} / tokens {} invalid",
                    g.side, g.tokens
                )));
            }
            subjects.check_tokens(g.tokens).map_err(wrap)?;
        }
        if self.toy.side < 2 || self.toy.tokens == 0 || self.toy.channels == 0 {
            return Err(Error::Manifest("toy side must be >= 2 with tokens and channels > 0".into()));
        }
        if !(self.toy.key_scale > 0.0 && self.toy.key_scale.is_finite()) {
            return Err(Error::Manifest("toy.key_scale must be > 0".into()));
        }
        if self.gradcheck.instances == 0 {
            return Err(Error::Manifest("gradcheck.instances must be >= 1".into()));
        }
        self.weights.validate().map_err(wrap)?;
        self.schedule.validate().map_err(wrap)?;
        self.gamma.validate().map_err(wrap)?;
        self.imputation_config().resolve(&subjects).map_err(wrap)?;
        if let Some(masks) = &self.inputs.masks {
            if masks.len() != subjects.len() {
                return Err(Error::Manifest(format!(
                    "{} mask paths for {} subjects",
                    masks.len(),
                    subjects.len()
                )));
            }
        }
        Ok(())
    }

    pub fn check_inputs_exist(&self) -> Result<()> {
        let mut paths: Vec<&PathBuf> = Vec::new();
        paths.extend(self.inputs.attention.iter());
        paths.extend(self.inputs.latent.iter());
        if let Some(m) = &self.inputs.masks {
            paths.extend(m.iter());
        }
        for p in paths {
            let full = self.resolve(p);
            if !full.is_file() {
                return Err(Error::Manifest(format!(
                    "input file {} does not exist",
                    full.display()
                )));
            }
        }
        Ok(())
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn subject_set(&self) -> Result<SubjectSet> {
        SubjectSet::new(self.subjects.tokens.clone(), self.subjects.background)
            .map_err(|e| Error::Manifest(e.to_string()))
    }

    pub fn imputation_config(&self) -> ImputationConfig {
        ImputationConfig {
            mode: self.imputation.mode,
            k: self.imputation.k,
            seed: self.seed,
        }
    }

    pub fn guidance_config(&self) -> GuidanceConfig {
        GuidanceConfig {
            schedule: self.schedule.clone(),
            flags: self.flags.clone(),
            weights: self.weights.clone(),
            gamma: self.gamma.clone(),
            imputation: self.imputation_config(),
        }
    }

    /// Required input path, resolved; a manifest error when absent.
    pub fn input(&self, which: &str) -> Result<PathBuf> {
        let p = match which {
            "attention" => self.inputs.attention.as_ref(),
            "latent" => self.inputs.latent.as_ref(),
            _ => None,
        };
        p.map(|p| self.resolve(p))
            .ok_or_else(|| Error::Manifest(format!("inputs.{which} is required")))
    }

    /// Checks tensor-derived dimensions against `[grid]` when present.
    pub fn check_grid(&self, side: usize, tokens: usize) -> Result<()> {
        if let Some(g) = &self.grid {
            if g.side != side || g.tokens != tokens {
                return Err(Error::Dimension(format!(
                    "manifest grid {}x{}x{} but tensor is {side}x{side}x{tokens}",
                    g.side, g.side, g.tokens
                )));
            }
        }
        self.subject_set()?.check_tokens(tokens).map_err(|e| Error::Dimension(e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_manifest_defaults() {
        let m = RunManifest::parse("[subjects]\ntokens = [1, 2]\n", Path::new("/tmp")).unwrap();
        assert_eq!(m.seed, 0);
        assert_eq!(m.weights, LossWeights::default());
        assert_eq!(m.schedule.rearrange_step(), 35);
        assert_eq!(m.imputation_config().resolve(&m.subject_set().unwrap()).unwrap(), ImputationMode::RandomNormal);
    }

    #[test]
    fn full_manifest_round_trips_fields() {
        let text = r#"
seed = 42
[subjects]
tokens = [3, 1]
background = 0
[grid]
side = 8
tokens = 4
[inputs]
attention = "a.xamt"
masks = ["m0.xamt", "m1.xamt"]
[weights]
lambda_ol = 0.0
rect_side = 2
[schedule]
total_steps = 20
tau = 5
[imputation]
mode = "background-copy"
k = 3
[flags]
enable_restart = false
[preprocess]
smooth = true
"#;
        let m = RunManifest::parse(text, Path::new("/data")).unwrap();
        assert_eq!(m.subject_set().unwrap().background(), Some(0));
        assert_eq!(m.weights.rect_side, Some(2));
        assert_eq!(m.weights.lambda_be, 1.0);
        assert!(!m.flags.enable_restart && m.flags.enable_be);
        assert_eq!(m.imputation_config().k, 3);
        assert_eq!(m.imputation_config().seed, 42);
        assert_eq!(m.input("attention").unwrap(), PathBuf::from("/data/a.xamt"));
        assert!(m.input("latent").is_err());
        assert!(m.check_grid(8, 4).is_ok());
        assert!(m.check_grid(8, 5).is_err());
    }

    #[test]
    fn rejects_bad_manifests() {
        let base = Path::new(".");
        for text in [
            "",
            "[subjects]\ntokens = []\n",
            "[subjects]\ntokens = [1, 1]\n",
            "[subjects]\ntokens = [1]\nbackground = 1\n",
            "[subjects]\ntokens = [5]\n[grid]\nside = 4\ntokens = 5\n",
            "[subjects]\ntokens = [1]\n[schedule]\ntau = 50\n",
            "[subjects]\ntokens = [1]\n[weights]\nlambda_be = -1.0\n",
            "[subjects]\ntokens = [1]\n[gamma]\ngamma0 = 0.9\n",
            "[subjects]\ntokens = [1]\n[imputation]\nmode = \"background-copy\"\n",
            "[subjects]\ntokens = [1]\nunknown = 3\n",
            "[subjects]\ntokens = [1, 2]\n[inputs]\nmasks = [\"a\"]\n",
            "not toml at all [",
        ] {
            assert!(
                matches!(RunManifest::parse(text, base), Err(Error::Manifest(_))),
                "accepted: {text:?}"
            );
        }
    }

    #[test]
    fn missing_input_file_is_manifest_error() {
        let m = RunManifest::parse(
            "[subjects]\ntokens = [1]\n[inputs]\nlatent = \"definitely-missing.xamt\"\n",
            Path::new("/nonexistent-dir"),
        )
        .unwrap();
        assert!(matches!(m.check_inputs_exist(), Err(Error::Manifest(_))));
    }
}
