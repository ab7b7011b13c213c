// SPDX-License-Identifier: MIT OR Apache-2.0

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{ModelConfig, ToyLM, Vocab};
use crate::error::{Error, Result};
use crate::optim::Adam;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    /// Global gradient-norm clip; `0` disables clipping.
    pub grad_clip: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 150,
            lr: 3e-3,
            batch_size: 32,
            grad_clip: 1.0,
        }
    }
}

/// Trains a fresh model on `corpus` by next-token prediction.
///
/// The vocabulary is built from the corpus and the model is initialized and
/// shuffled from named substreams of `config.seed`.
pub fn train_toy(config: ModelConfig, corpus: &[String], train: &TrainConfig) -> Result<ToyLM> {
    if corpus.is_empty() {
        return Err(Error::Invalid("training corpus is empty".into()));
    }
    let vocab = Vocab::build(corpus.iter().map(String::as_str));
    let config = ModelConfig {
        vocab_size: vocab.len(),
        ..config
    };
    let mut model = ToyLM::new(config, vocab)?;
    continue_training(&mut model, corpus, train)?;
    Ok(model)
}

/// Runs `train.epochs` epochs of Adam on an existing model.
pub fn continue_training(model: &mut ToyLM, corpus: &[String], train: &TrainConfig) -> Result<()> {
    let seqs: Vec<Vec<u32>> = corpus
        .iter()
        .map(|s| model.vocab.encode_prompt(s))
        .collect::<Result<_>>()?;
    let mut order: Vec<usize> = (0..seqs.len()).collect();
    let mut rng = crate::rng::stream(model.config.seed, "train");
    let mut opts: Vec<Adam> = model
        .weights
        .tensors()
        .iter()
        .map(|(_, d)| Adam::new(d.len(), train.lr))
        .collect();
    let batch_size = train.batch_size.max(1);
    for epoch in 0..train.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(batch_size) {
            let batch: Vec<(Vec<u32>, usize)> = chunk
                .iter()
                .filter(|&&i| seqs[i].len() > 1)
                .map(|&i| (seqs[i].clone(), 1))
                .collect();
            if batch.is_empty() {
                continue;
            }
            let (loss, grads) = model.masked_lm_loss_and_grads(&batch)?;
            if !loss.is_finite() {
                return Err(Error::NonFinite(format!("training loss at epoch {epoch}")));
            }
            let grad_tensors = grads.tensors();
            let norm: f64 = grad_tensors
                .iter()
                .flat_map(|(_, d)| d.iter())
                .map(|g| g * g)
                .sum::<f64>()
                .sqrt();
            let scale = if train.grad_clip > 0.0 && norm > train.grad_clip {
                train.grad_clip / norm
            } else {
                1.0
            };
            for ((buf, (_, g)), opt) in model
                .weights
                .buffers_mut()
                .into_iter()
                .zip(grad_tensors)
                .zip(opts.iter_mut())
            {
                let g: Vec<f64> = g.iter().map(|v| v * scale).collect();
                opt.step(buf, &g);
            }
            epoch_loss += loss;
            batches += 1;
        }
        if batches > 0 && (epoch + 1) % 25 == 0 {
            tracing::debug!(epoch = epoch + 1, loss = epoch_loss / batches as f64, "training");
        }
    }
    if !model.weights.all_finite() {
        return Err(Error::NonFinite("trained weights".into()));
    }
    Ok(())
}

/// Fraction of probes whose greedy next token is one of the accepted
/// first tokens.
pub fn fact_recall(model: &ToyLM, probes: &[(String, Vec<String>)]) -> Result<f64> {
    if probes.is_empty() {
        return Ok(0.0);
    }
    let mut hits = 0;
    for (prompt, accepted) in probes {
        let toks = model.vocab.encode_prompt(prompt)?;
        let next = model.greedy_next(&toks)?;
        let ok = accepted.iter().any(|a| {
            model
                .vocab
                .encode(a)
                .ok()
                .and_then(|ids| ids.first().copied())
                == Some(next)
        });
        hits += ok as usize;
    }
    Ok(hits as f64 / probes.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_epochs_leaves_initialization() {
        let corpus = vec!["Ravel speaks Ostic .".to_string()];
        let cfg = ModelConfig::tiny(0);
        let train = TrainConfig {
            epochs: 0,
            ..Default::default()
        };
        let trained = train_toy(cfg.clone(), &corpus, &train).unwrap();
        let vocab = Vocab::build(corpus.iter().map(String::as_str));
        let fresh = ToyLM::new(
            ModelConfig {
                vocab_size: vocab.len(),
                ..cfg
            },
            vocab,
        )
        .unwrap();
        assert_eq!(trained, fresh);
    }

    #[test]
    fn single_fact_is_learned() {
        let corpus = vec!["Ravel speaks Ostic .".to_string()];
        let train = TrainConfig {
            epochs: 200,
            lr: 1e-2,
            batch_size: 1,
            grad_clip: 1.0,
        };
        let m = train_toy(ModelConfig::tiny(0), &corpus, &train).unwrap();
        let recall = fact_recall(&m, &[("Ravel speaks".into(), vec!["Ostic".into()])]).unwrap();
        assert_eq!(recall, 1.0);
    }

    #[test]
    fn training_is_deterministic() {
        let corpus = vec!["a b c .".to_string(), "b c a .".to_string()];
        let train = TrainConfig {
            epochs: 5,
            ..Default::default()
        };
        let a = train_toy(ModelConfig::tiny(0), &corpus, &train).unwrap();
        let b = train_toy(ModelConfig::tiny(0), &corpus, &train).unwrap();
        assert_eq!(a.weights, b.weights);
    }

    #[test]
    fn empty_corpus_rejected() {
        assert!(train_toy(ModelConfig::tiny(0), &[], &TrainConfig::default()).is_err());
    }
}
