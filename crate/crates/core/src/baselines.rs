// SPDX-License-Identifier: MIT OR Apache-2.0

//! Comparison editors: constrained fine-tuning, sequential single-object
//! editing and the fixed-order concatenation ablation.

use serde::{Deserialize, Serialize};

use crate::data::KseInstance;
use crate::editor::config::check_layers;
use crate::editor::{
    apply_edit, AssignmentMode, CovarianceCache, EditReport, EditorConfig,
};
use crate::error::{Error, Result};
use crate::model::weights::{parse_module_address, FfnModule};
use crate::model::ToyLM;
use crate::numerics::Matrix;
use crate::optim::Adam;

/// Relative fall below which an earlier target counts as overwritten.
pub const OVERWRITE_DROP: f64 = 0.1;

/// Set edit with targets pinned to slots in their given order.
pub fn concat_edit(
    model: &mut ToyLM,
    instances: &[KseInstance],
    cfg: &EditorConfig,
    layers: &[usize],
    covariance: &CovarianceCache,
) -> Result<EditReport> {
    apply_edit(model, instances, cfg, layers, covariance, AssignmentMode::Identity)
}

/// Probabilities of every target after one sequential step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SequentialStep {
    /// Index of the object replaced in this step.
    pub edited: usize,
    /// `P(target_k | edit prompt)` for all `k` after the step.
    pub probs: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SequentialReport {
    pub case_id: String,
    /// `P(target_k | edit prompt)` before any step.
    pub initial: Vec<f64>,
    pub steps: Vec<SequentialStep>,
    pub edits: Vec<EditReport>,
}

impl SequentialReport {
    /// Whether some already-edited target lost more than [`OVERWRITE_DROP`]
    /// of its probability during a later step.
    pub fn overwritten(&self) -> bool {
        self.overwritten_by(OVERWRITE_DROP)
    }

    /// Whether some already-edited target lost more than the fraction
    /// `drop` of its probability during a later step; `0` flags any decrease.
    pub fn overwritten_by(&self, drop: f64) -> bool {
        self.steps.windows(2).enumerate().any(|(s, w)| {
            (0..=s).any(|i| {
                let k = self.steps[i].edited;
                w[1].probs[k] < w[0].probs[k] * (1.0 - drop)
            })
        })
    }
}

fn target_probs(model: &ToyLM, instance: &KseInstance) -> Result<Vec<f64>> {
    let prompt = model.vocab.encode_prompt(&instance.filled_edit_prompt())?;
    let targets: Vec<Vec<u32>> = instance
        .targets
        .iter()
        .map(|t| model.vocab.encode(t))
        .collect::<Result<_>>()?;
    let batch: Vec<(&[u32], &[u32], &[crate::model::Intervention])> = targets
        .iter()
        .map(|t| (prompt.as_slice(), t.as_slice(), &[][..]))
        .collect();
    Ok(model
        .batch_sequence_logprob(&batch, false)?
        .into_iter()
        .map(f64::exp)
        .collect())
}

/// Replaces `objects[j]` with `targets[j]` one pair at a time.
///
/// Each step is a one-object edit against the current weights with a
/// freshly sampled covariance. Fails without side effects.
pub fn single_object_edit(
    model: &mut ToyLM,
    instance: &KseInstance,
    cfg: &EditorConfig,
    layers: &[usize],
    covariance_prompts: &[Vec<u32>],
) -> Result<SequentialReport> {
    instance.validate()?;
    let backup = model.weights.clone();
    let run = |model: &mut ToyLM| -> Result<SequentialReport> {
        let initial = target_probs(model, instance)?;
        let mut steps = Vec::new();
        let mut edits = Vec::new();
        for (j, target) in instance.targets.iter().enumerate() {
            let single = KseInstance {
                objects: vec![instance.objects[j].clone()],
                targets: vec![target.clone()],
                ..instance.clone()
            };
            let cov = CovarianceCache::compute(model, covariance_prompts, layers, cfg.covariance_weight)?;
            edits.push(apply_edit(model, &[single], cfg, layers, &cov, AssignmentMode::Hungarian)?);
            steps.push(SequentialStep {
                edited: j,
                probs: target_probs(model, instance)?,
            });
        }
        Ok(SequentialReport {
            case_id: instance.case_id.clone(),
            initial,
            steps,
            edits,
        })
    };
    run(model).inspect_err(|_| model.weights = backup)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FineTuneReport {
    pub layers: Vec<usize>,
    /// Masked LM loss before each step and after the last.
    pub losses: Vec<f64>,
    /// Largest absolute weight change.
    pub max_change: f64,
}

/// Layers tuned by FT-W: the configured module addresses, or `layers`.
pub fn ft_target_layers(cfg: &EditorConfig, layers: &[usize], n_layers: usize) -> Result<Vec<usize>> {
    if cfg.baseline.target_modules.is_empty() {
        check_layers(layers, n_layers)?;
        return Ok(layers.to_vec());
    }
    let mut out = Vec::new();
    for a in &cfg.baseline.target_modules {
        let (l, module) = parse_module_address(a)?;
        if module != FfnModule::Proj {
            return Err(Error::Invalid(format!("FT-W tunes projection weights only, got `{a}`")));
        }
        if l >= n_layers {
            return Err(Error::LayerOutOfRange { layer: l, n_layers });
        }
        if !out.contains(&l) {
            out.push(l);
        }
    }
    out.sort_unstable();
    Ok(out)
}

/// Fine-tunes FFN projection weights on `prompt + target` for every target,
/// keeping each weight within `ft_radius` of its original value.
pub fn ft_w_edit(
    model: &mut ToyLM,
    instances: &[KseInstance],
    cfg: &EditorConfig,
    layers: &[usize],
) -> Result<FineTuneReport> {
    let layers = ft_target_layers(cfg, layers, model.config.n_layers)?;
    let mut seqs = Vec::new();
    for inst in instances {
        inst.validate()?;
        let prompt = model.vocab.encode_prompt(&inst.filled_edit_prompt())?;
        for t in &inst.targets {
            let mut s = prompt.clone();
            s.extend(model.vocab.encode(t)?);
            seqs.push((s, prompt.len()));
        }
    }
    let original: Vec<Matrix> = layers
        .iter()
        .map(|&l| model.weights.layers[l].proj_w.clone())
        .collect();
    let mut report = FineTuneReport {
        layers: layers.clone(),
        losses: Vec::new(),
        max_change: 0.0,
    };
    if seqs.is_empty() || cfg.baseline.ft_steps == 0 {
        return Ok(report);
    }
    let radius = cfg.baseline.ft_radius;
    let mut opts: Vec<Adam> = original
        .iter()
        .map(|w| Adam::new(w.data().len(), cfg.baseline.ft_lr))
        .collect();
    let mut run = || -> Result<()> {
        for step in 0..=cfg.baseline.ft_steps {
            let (loss, grads) = model.masked_lm_loss_and_grads(&seqs)?;
            if !loss.is_finite() {
                return Err(Error::NonFinite(format!("FT-W loss at step {step}")));
            }
            report.losses.push(loss);
            if step == cfg.baseline.ft_steps {
                break;
            }
            for ((&l, opt), w0) in layers.iter().zip(&mut opts).zip(&original) {
                let w = model.weights.layers[l].proj_w.data_mut();
                opt.step(w, grads.layers[l].proj_w.data());
                for (v, o) in w.iter_mut().zip(w0.data()) {
                    *v = v.clamp(o - radius, o + radius);
                }
            }
        }
        Ok(())
    };
    if let Err(e) = run() {
        for (&l, w) in layers.iter().zip(original) {
            model.weights.layers[l].proj_w = w;
        }
        return Err(Error::EditAborted(e.to_string()));
    }
    report.max_change = layers
        .iter()
        .zip(&original)
        .flat_map(|(&l, w0)| {
            model.weights.layers[l]
                .proj_w
                .data()
                .iter()
                .zip(w0.data())
                .map(|(a, b)| (a - b).abs())
                .collect::<Vec<_>>()
        })
        .fold(0.0, f64::max);
    Ok(report)
}
