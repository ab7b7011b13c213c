// SPDX-License-Identifier: MIT OR Apache-2.0

use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use setke_core::data::CorpusSpec;
use setke_core::editor::EditorConfig;
use setke_core::experiment::EditorKind;
use setke_core::model::train::TrainConfig;
use setke_core::model::ModelConfig;

/// Environment variable naming the config file used when `--config` is absent.
pub const CONFIG_ENV: &str = "SETKE_CONFIG";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelShape {
    Desk,
    Fixture,
    Tiny,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub shape: ModelShape,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            shape: ModelShape::Fixture,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSection {
    pub editors: Vec<EditorKind>,
    /// Object counts to sweep; empty means every count in the edit set.
    pub counts: Vec<usize>,
    /// Cases per count, taken in file order; 0 means all.
    pub max_cases: usize,
}

impl Default for SweepSection {
    fn default() -> Self {
        Self {
            editors: vec![
                EditorKind::Setke,
                EditorKind::Concat,
                EditorKind::SingleObject,
            ],
            counts: Vec::new(),
            max_cases: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttributionSection {
    pub steps: usize,
    pub threshold: f64,
}

impl Default for AttributionSection {
    fn default() -> Self {
        Self {
            steps: setke_core::attribution::DEFAULT_IG_STEPS,
            threshold: setke_core::attribution::DEFAULT_THRESHOLD,
        }
    }
}

/// Everything a command needs besides its input paths.
///
/// The top-level `seed` overrides the seeds of the corpus, model and editor
/// sections.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub corpus: CorpusSpec,
    pub model: ModelSection,
    pub train: TrainConfig,
    pub editor: EditorConfig,
    pub sweep: SweepSection,
    pub attribution: AttributionSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        let model = ModelSection::default();
        Self {
            seed: 0,
            corpus: CorpusSpec::default(),
            editor: EditorConfig::toy(model.n_layers()),
            model,
            train: TrainConfig {
                epochs: 25,
                lr: 1e-2,
                ..TrainConfig::default()
            },
            sweep: SweepSection::default(),
            attribution: AttributionSection::default(),
        }
    }
}

impl ModelSection {
    pub fn config(&self, vocab_size: usize) -> ModelConfig {
        match self.shape {
            ModelShape::Desk => ModelConfig::desk(vocab_size),
            ModelShape::Fixture => ModelConfig::fixture(vocab_size),
            ModelShape::Tiny => ModelConfig::tiny(vocab_size),
        }
    }

    pub fn n_layers(&self) -> usize {
        self.config(1).n_layers
    }
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).context("parsing run config")?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text =
            std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::from_toml_str(&text).with_context(|| format!("in {}", path.display()))
    }

    /// `--config`, else the file named by [`CONFIG_ENV`], else defaults.
    pub fn resolve(path: Option<&Path>) -> Result<Self> {
        match path {
            Some(p) => Self::load(p),
            None => match std::env::var_os(CONFIG_ENV) {
                Some(p) if !p.is_empty() => Self::load(Path::new(&p)),
                _ => Ok(Self::default()),
            },
        }
    }

    pub fn with_seed(mut self, seed: Option<u64>) -> Self {
        if let Some(s) = seed {
            self.seed = s;
        }
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.editor.validate(self.model.n_layers())?;
        if self.attribution.steps == 0 {
            bail!("attribution.steps must be positive");
        }
        if !(self.attribution.threshold > 0.0 && self.attribution.threshold <= 1.0) {
            bail!("attribution.threshold must lie in (0, 1]");
        }
        if self.sweep.editors.is_empty() {
            bail!("sweep.editors is empty");
        }
        Ok(())
    }

    pub fn corpus_spec(&self) -> CorpusSpec {
        CorpusSpec {
            seed: self.seed,
            ..self.corpus.clone()
        }
    }

    pub fn model_config(&self, vocab_size: usize) -> ModelConfig {
        ModelConfig {
            seed: self.seed,
            ..self.model.config(vocab_size)
        }
    }

    pub fn editor_config(&self) -> EditorConfig {
        EditorConfig {
            seed: self.seed,
            ..self.editor.clone()
        }
    }

    pub fn to_toml_string(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let cfg = RunConfig::default();
        let text = cfg.to_toml_string().unwrap();
        assert_eq!(RunConfig::from_toml_str(&text).unwrap(), cfg);
    }

    #[test]
    fn partial_files_fill_defaults() {
        let cfg = RunConfig::from_toml_str("seed = 3\n[sweep]\ncounts = [1, 3]\n").unwrap();
        assert_eq!(cfg.seed, 3);
        assert_eq!(cfg.sweep.counts, vec![1, 3]);
        assert_eq!(cfg.corpus_spec().seed, 3);
        assert_eq!(cfg.editor_config().seed, 3);
        assert_eq!(cfg.model_config(10).seed, 3);
    }

    #[test]
    fn rejects_bad_values() {
        assert!(RunConfig::from_toml_str("colour = 1").is_err());
        assert!(RunConfig::from_toml_str("[attribution]\nthreshold = 0.0").is_err());
        assert!(RunConfig::from_toml_str("[editor]\ncritical_layers = [4, 5, 6]").is_err());
        assert!(RunConfig::from_toml_str("[sweep]\neditors = [\"rome\"]").is_err());
    }
}
