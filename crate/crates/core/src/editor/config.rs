// SPDX-License-Identifier: MIT OR Apache-2.0

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Where the critical layers come from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum LayerSpec {
    Fixed(Vec<usize>),
    /// The string `"trace"`: locate layers by causal tracing.
    Named(String),
}

impl LayerSpec {
    pub fn is_trace(&self) -> bool {
        matches!(self, LayerSpec::Named(s) if s == "trace")
    }
}

/// Token receiving the residual.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InjectionRule {
    SubjectLast,
    PromptLast,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineKind {
    FtW,
    SingleObject,
    Concat,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BaselineConfig {
    pub kind: Option<BaselineKind>,
    /// Module addresses tuned by FT-W; empty means the critical layers.
    pub target_modules: Vec<String>,
    pub ft_lr: f64,
    pub ft_steps: usize,
    /// Half-width of the L∞ ball around the original weights.
    pub ft_radius: f64,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        Self {
            kind: None,
            target_modules: Vec::new(),
            ft_lr: 5e-4,
            ft_steps: 25,
            ft_radius: 5e-4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EditorConfig {
    pub critical_layers: LayerSpec,
    /// Window size used by the `trace` strategy.
    pub trace_window: usize,
    pub injection: InjectionRule,
    pub lr: f64,
    pub max_steps: usize,
    /// Early stop once every matched probability reaches this value.
    pub early_stop_prob: f64,
    /// KL weight per target; the total weight is this times the target count.
    pub kl_weight_per_target: f64,
    pub covariance_samples: usize,
    /// Multiplier on the sampled second-moment matrix.
    pub covariance_weight: f64,
    pub separator: String,
    pub normalize_length: bool,
    pub seed: u64,
    pub baseline: BaselineConfig,
}

impl Default for EditorConfig {
    fn default() -> Self {
        Self {
            critical_layers: LayerSpec::Fixed(vec![1, 2, 3]),
            trace_window: 3,
            injection: InjectionRule::SubjectLast,
            lr: 0.5,
            max_steps: 25,
            early_stop_prob: 0.9,
            kl_weight_per_target: 0.0625,
            covariance_samples: 256,
            covariance_weight: DEFAULT_COVARIANCE_WEIGHT,
            separator: ",".into(),
            normalize_length: false,
            seed: 0,
            baseline: BaselineConfig::default(),
        }
    }
}

pub const DEFAULT_COVARIANCE_WEIGHT: f64 = 1.0;

impl EditorConfig {
    /// Settings that edit the word-level toy models reliably: the residual
    /// enters at the prompt's last token, optimization is stronger and the
    /// covariance prior is weaker than in [`EditorConfig::default`].
    pub fn toy(n_layers: usize) -> Self {
        let end = n_layers.saturating_sub(1).max(1);
        Self {
            critical_layers: LayerSpec::Fixed((end.saturating_sub(3)..end).collect()),
            injection: InjectionRule::PromptLast,
            lr: 2.0,
            covariance_weight: 0.01,
            ..Self::default()
        }
    }

    pub fn validate(&self, n_layers: usize) -> Result<()> {
        match &self.critical_layers {
            LayerSpec::Fixed(layers) => check_layers(layers, n_layers)?,
            LayerSpec::Named(s) if s == "trace" => {
                if self.trace_window == 0 || self.trace_window > n_layers {
                    return Err(Error::Invalid(format!(
                        "trace window {} does not fit {n_layers} layers",
                        self.trace_window
                    )));
                }
            }
            LayerSpec::Named(s) => {
                return Err(Error::Invalid(format!(
                    "critical_layers must be a list or \"trace\", got `{s}`"
                )))
            }
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Invalid("lr must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.early_stop_prob) {
            return Err(Error::Invalid("early_stop_prob must lie in [0, 1]".into()));
        }
        if self.kl_weight_per_target < 0.0 || self.covariance_weight < 0.0 {
            return Err(Error::Invalid("weights must be non-negative".into()));
        }
        if self.separator.split_whitespace().count() == 0 {
            return Err(Error::Invalid("separator must be a token".into()));
        }
        if self.baseline.ft_radius < 0.0 || self.baseline.ft_lr < 0.0 {
            return Err(Error::Invalid("baseline radius and lr must be non-negative".into()));
        }
        Ok(())
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Invalid(format!("editor config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Invalid(format!("editor config: {e}")))
    }
}

/// Checks that `layers` is a non-empty ascending run of consecutive layers.
pub fn check_layers(layers: &[usize], n_layers: usize) -> Result<()> {
    if layers.is_empty() {
        return Err(Error::Invalid("critical layer set is empty".into()));
    }
    for w in layers.windows(2) {
        if w[1] != w[0] + 1 {
            return Err(Error::Invalid(format!(
                "critical layers {layers:?} are not contiguous and ascending"
            )));
        }
    }
    let last = *layers.last().expect("non-empty");
    if last >= n_layers {
        return Err(Error::LayerOutOfRange {
            layer: last,
            n_layers,
        });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toml_round_trip_and_trace() {
        let cfg = EditorConfig::default();
        let text = cfg.to_toml_string().unwrap();
        assert_eq!(EditorConfig::from_toml_str(&text).unwrap(), cfg);
        let traced = EditorConfig::from_toml_str("critical_layers = \"trace\"").unwrap();
        assert!(traced.critical_layers.is_trace());
        assert!(traced.validate(6).is_ok());
    }

    #[test]
    fn layer_checks() {
        assert!(check_layers(&[1, 2, 3], 6).is_ok());
        assert!(check_layers(&[1, 3], 6).is_err());
        assert!(check_layers(&[4, 5, 6], 6).is_err());
        assert!(check_layers(&[], 6).is_err());
        let bad = EditorConfig::from_toml_str("critical_layers = \"auto\"").unwrap();
        assert!(bad.validate(6).is_err());
    }
}
