// SPDX-License-Identifier: MIT OR Apache-2.0

//! Causal tracing of factual recall over layers and positions.

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::config::check_layers;
use super::subject_last_position;
use crate::data::editset::SUBJECT_SLOT;
use crate::data::KseInstance;
use crate::error::{Error, Result};
use crate::model::{Intervention, ToyLM};
use crate::numerics::Matrix;

/// Mean indirect effect below which tracing is considered uninformative.
pub const TRACE_NOISE_FLOOR: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TraceConfig {
    /// Noise draws averaged per restoration.
    pub samples: usize,
    /// Noise standard deviation in units of the embedding standard deviation.
    pub noise_scale: f64,
    pub seed: u64,
}

impl Default for TraceConfig {
    fn default() -> Self {
        Self {
            samples: 4,
            noise_scale: 3.0,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceResult {
    /// Target probability on the clean run.
    pub clean: f64,
    /// Mean target probability with noised subject embeddings.
    pub corrupted: f64,
    /// `n_layers × T` restored minus corrupted probability.
    pub scores: Matrix,
    /// First and last subject token positions.
    pub subject_span: (usize, usize),
}

impl TraceResult {
    /// Scores of every layer at the last subject token.
    pub fn subject_last_profile(&self) -> Vec<f64> {
        (0..self.scores.rows())
            .map(|l| self.scores.get(l, self.subject_span.1))
            .collect()
    }
}

fn embedding_std(model: &ToyLM) -> f64 {
    let data = model.weights.wte.data();
    let n = data.len() as f64;
    let mean = data.iter().sum::<f64>() / n;
    (data.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt()
}

/// Restores each clean hidden state into a run whose subject embeddings
/// are noised and records the recovered target probability.
pub fn causal_trace(
    model: &ToyLM,
    template: &str,
    subject: &str,
    target: &str,
    cfg: &TraceConfig,
) -> Result<TraceResult> {
    if cfg.samples == 0 {
        return Err(Error::Invalid("trace needs at least one noise sample".into()));
    }
    let prompt = model
        .vocab
        .encode_prompt(&template.replacen(SUBJECT_SLOT, subject, 1))?;
    let target = model.vocab.encode(target)?;
    let last = subject_last_position(model, template, subject)?;
    let first = last + 1 - model.vocab.encode(subject)?.len();
    let clean_trace = model.forward_with(&prompt, &[])?;
    let clean = model.sequence_logprob(&prompt, &target, None, false)?.exp();

    let d = model.config.d_model;
    let sigma = cfg.noise_scale * embedding_std(model);
    let normal = Normal::new(0.0, sigma.max(f64::MIN_POSITIVE))
        .map_err(|e| Error::Invalid(format!("trace noise: {e}")))?;
    let mut rng = crate::rng::stream(cfg.seed, "trace");
    let noise: Vec<Vec<Intervention>> = (0..cfg.samples)
        .map(|_| {
            (first..=last)
                .map(|position| Intervention::AddEmbedding {
                    position,
                    delta: (0..d).map(|_| normal.sample(&mut rng)).collect(),
                })
                .collect()
        })
        .collect();

    let n_layers = model.config.n_layers;
    let t = prompt.len();
    let mut ivs: Vec<Vec<Intervention>> = noise.clone();
    for l in 0..n_layers {
        for p in 0..t {
            for n in &noise {
                let mut v = n.clone();
                v.push(Intervention::SetHidden {
                    layer: l,
                    position: p,
                    value: clean_trace.hidden[l].row(p).to_vec(),
                });
                ivs.push(v);
            }
        }
    }
    let batch: Vec<(&[u32], &[u32], &[Intervention])> = ivs
        .iter()
        .map(|v| (prompt.as_slice(), target.as_slice(), v.as_slice()))
        .collect();
    let lp = model.batch_sequence_logprob(&batch, false)?;
    let s = cfg.samples as f64;
    let corrupted = lp[..cfg.samples].iter().map(|v| v.exp()).sum::<f64>() / s;
    let mut scores = Matrix::zeros(n_layers, t);
    for l in 0..n_layers {
        for p in 0..t {
            let off = cfg.samples * (1 + l * t + p);
            let restored = lp[off..off + cfg.samples].iter().map(|v| v.exp()).sum::<f64>() / s;
            scores.set(l, p, restored - corrupted);
        }
    }
    Ok(TraceResult {
        clean,
        corrupted,
        scores,
        subject_span: (first, last),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerSelection {
    pub layers: Vec<usize>,
    /// Mean restoration score per layer at the last subject token.
    pub profile: Vec<f64>,
    /// True when the configured fallback layers were used.
    pub fallback: bool,
}

/// Picks the contiguous `window` of layers with the highest mean
/// restoration effect at the last subject token, averaged over the first
/// object of each instance.
pub fn locate_layers(
    model: &ToyLM,
    instances: &[KseInstance],
    window: usize,
    fallback: &[usize],
    cfg: &TraceConfig,
) -> Result<LayerSelection> {
    let n_layers = model.config.n_layers;
    check_layers(fallback, n_layers)?;
    if window == 0 || window > n_layers {
        return Err(Error::Invalid(format!("window {window} does not fit {n_layers} layers")));
    }
    let mut profile = vec![0.0; n_layers];
    let mut effect = 0.0;
    let mut count = 0usize;
    for inst in instances {
        let Some(object) = inst.objects.first() else {
            continue;
        };
        let r = causal_trace(model, &inst.edit_prompt, &inst.subject, object, cfg)?;
        for (acc, v) in profile.iter_mut().zip(r.subject_last_profile()) {
            *acc += v;
        }
        effect += r.clean - r.corrupted;
        count += 1;
    }
    if count == 0 {
        return Err(Error::Invalid("no instances to trace".into()));
    }
    for v in &mut profile {
        *v /= count as f64;
    }
    effect /= count as f64;

    let (start, best) = (0..=n_layers - window)
        .map(|s| (s, profile[s..s + window].iter().sum::<f64>() / window as f64))
        .fold((0, f64::NEG_INFINITY), |acc, x| if x.1 > acc.1 { x } else { acc });
    if effect < TRACE_NOISE_FLOOR || best < TRACE_NOISE_FLOOR {
        tracing::warn!(effect, best, "trace signal below noise floor, using fallback layers");
        return Ok(LayerSelection {
            layers: fallback.to_vec(),
            profile,
            fallback: true,
        });
    }
    Ok(LayerSelection {
        layers: (start..start + window).collect(),
        profile,
        fallback: false,
    })
}
