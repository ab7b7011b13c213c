// SPDX-License-Identifier: MIT OR Apache-2.0

//! Small decoder-only transformer with addressable FFN weights.

pub mod checkpoint;
pub(crate) mod engine;
pub mod tokenizer;
pub mod train;
pub mod weights;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{log_softmax, softmax, Matrix};
pub use engine::Intervention;
use engine::SeqInput;
pub use tokenizer::Vocab;
pub use weights::{FfnModule, LayerWeights, Weights};

/// Lower bound applied to probabilities inside `−log`.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ffn: usize,
    pub max_seq_len: usize,
    pub seed: u64,
}

impl ModelConfig {
    /// Default desk-scale shape.
    pub fn desk(vocab_size: usize) -> Self {
        Self {
            vocab_size,
            d_model: 64,
            n_layers: 8,
            n_heads: 4,
            d_ffn: 256,
            max_seq_len: 32,
            seed: 42,
        }
    }

    /// Smaller shape used by test fixtures.
    pub fn fixture(vocab_size: usize) -> Self {
        Self {
            vocab_size,
            d_model: 32,
            n_layers: 6,
            n_heads: 4,
            d_ffn: 128,
            max_seq_len: 32,
            seed: 42,
        }
    }

    /// Minimal shape for unit tests.
    pub fn tiny(vocab_size: usize) -> Self {
        Self {
            vocab_size,
            d_model: 8,
            n_layers: 2,
            n_heads: 2,
            d_ffn: 16,
            max_seq_len: 16,
            seed: 42,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("vocab_size", self.vocab_size),
            ("d_model", self.d_model),
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("d_ffn", self.d_ffn),
            ("max_seq_len", self.max_seq_len),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::Invalid(format!("{name} must be at least 1")));
            }
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Invalid(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }
}

/// A residual added to the FFN output of `layer` at `position`.
#[derive(Clone, Debug, PartialEq)]
pub struct Injection {
    pub layer: usize,
    pub position: usize,
    pub delta: Vec<f64>,
}

impl Injection {
    fn intervention(&self) -> Intervention {
        Intervention::AddFfnOutput {
            layer: self.layer,
            position: self.position,
            delta: self.delta.clone(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct ForwardTrace {
    /// `T × vocab` logits.
    pub logits: Matrix,
    /// Per layer, `T × d_model` FFN outputs `h^l`.
    pub ffn_out: Vec<Matrix>,
    /// Per layer, `T × d_model` residual stream after the block.
    pub hidden: Vec<Matrix>,
    /// Per layer, `T × d_ffn` inner activations.
    pub activations: Vec<Matrix>,
    pub injection: Option<Injection>,
}

impl ForwardTrace {
    pub fn next_token_probs(&self, position: usize) -> Vec<f64> {
        softmax(self.logits.row(position))
    }
}

/// One scalar term of a loss over the injected residual.
#[derive(Clone, Debug, PartialEq)]
pub struct LossTerm {
    pub kind: LossKind,
    pub weight: f64,
    /// Position receiving the residual in this term's prompt; `None` runs
    /// the plain model.
    pub inject_at: Option<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum LossKind {
    /// `−log max(P(continuation | prompt), PROB_FLOOR)` under teacher forcing.
    NegLogProb {
        prompt: Vec<u32>,
        continuation: Vec<u32>,
    },
    /// `KL(P(· | prompt) ‖ reference)` at the prompt's final position.
    Kl { prompt: Vec<u32>, reference: Vec<f64> },
    /// `‖δ‖²`.
    DeltaNormSq,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossEval {
    pub total: f64,
    /// Weighted value of each term, in input order.
    pub terms: Vec<f64>,
    pub grad: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ToyLM {
    pub config: ModelConfig,
    pub vocab: Vocab,
    pub weights: Weights,
}

impl ToyLM {
    /// A freshly initialized model seeded from `config.seed`.
    pub fn new(config: ModelConfig, vocab: Vocab) -> Result<Self> {
        config.validate()?;
        if vocab.len() != config.vocab_size {
            return Err(Error::Invalid(format!(
                "vocabulary has {} tokens but config declares {}",
                vocab.len(),
                config.vocab_size
            )));
        }
        let mut rng = crate::rng::stream(config.seed, "init");
        let weights = Weights::init(&config, &mut rng);
        Ok(Self {
            config,
            vocab,
            weights,
        })
    }

    fn check_tokens(&self, tokens: &[u32]) -> Result<()> {
        if tokens.is_empty() {
            return Err(Error::Invalid("empty token sequence".into()));
        }
        if tokens.len() > self.config.max_seq_len {
            return Err(Error::SequenceTooLong {
                len: tokens.len(),
                max: self.config.max_seq_len,
            });
        }
        if let Some(t) = tokens.iter().find(|&&t| t as usize >= self.config.vocab_size) {
            return Err(Error::UnknownToken(format!("id {t}")));
        }
        Ok(())
    }

    pub(crate) fn check_interventions(&self, len: usize, ivs: &[Intervention]) -> Result<()> {
        let n_layers = self.config.n_layers;
        for iv in ivs {
            let (layer, position, width) = match iv {
                Intervention::AddFfnOutput {
                    layer,
                    position,
                    delta,
                } => (Some(*layer), *position, (delta.len(), self.config.d_model)),
                Intervention::SetHidden {
                    layer,
                    position,
                    value,
                } => (Some(*layer), *position, (value.len(), self.config.d_model)),
                Intervention::SetActivation {
                    layer,
                    position,
                    value,
                } => (Some(*layer), *position, (value.len(), self.config.d_ffn)),
                Intervention::AddEmbedding { position, delta } => {
                    (None, *position, (delta.len(), self.config.d_model))
                }
            };
            if let Some(layer) = layer {
                if layer >= n_layers {
                    return Err(Error::LayerOutOfRange { layer, n_layers });
                }
            }
            if position >= len {
                return Err(Error::Invalid(format!(
                    "intervention position {position} outside sequence of length {len}"
                )));
            }
            if width.0 != width.1 {
                return Err(Error::Shape(format!(
                    "intervention vector has length {}, expected {}",
                    width.0, width.1
                )));
            }
        }
        Ok(())
    }

    /// Full forward pass with an optional residual injection.
    pub fn forward(&self, tokens: &[u32], injection: Option<&Injection>) -> Result<ForwardTrace> {
        let ivs: Vec<Intervention> = injection.map(Injection::intervention).into_iter().collect();
        let mut trace = self.forward_with(tokens, &ivs)?;
        trace.injection = injection.cloned();
        Ok(trace)
    }

    /// Full forward pass under arbitrary interventions.
    pub fn forward_with(&self, tokens: &[u32], ivs: &[Intervention]) -> Result<ForwardTrace> {
        self.check_tokens(tokens)?;
        self.check_interventions(tokens.len(), ivs)?;
        let input = [SeqInput {
            tokens,
            interventions: ivs,
        }];
        let acts = engine::forward(&self.config, &self.weights, &input);
        let rows: Vec<usize> = (0..tokens.len()).collect();
        let logits = acts.logits(&self.weights, &rows);
        let mut ffn_out = Vec::with_capacity(acts.layers.len());
        let mut hidden = Vec::with_capacity(acts.layers.len());
        let mut activations = Vec::with_capacity(acts.layers.len());
        for l in acts.layers {
            ffn_out.push(l.ffn_out);
            hidden.push(l.x_out);
            activations.push(l.act);
        }
        Ok(ForwardTrace {
            logits,
            ffn_out,
            hidden,
            activations,
            injection: None,
        })
    }

    /// Log-probabilities of the next token after `tokens`.
    pub fn next_token_logprobs(&self, tokens: &[u32], ivs: &[Intervention]) -> Result<Vec<f64>> {
        Ok(self
            .batch_next_token_logprobs(&[(tokens, ivs)])?
            .pop()
            .expect("one row"))
    }

    /// Next-token log-probabilities for many sequences in one batched pass.
    pub fn batch_next_token_logprobs(
        &self,
        batch: &[(&[u32], &[Intervention])],
    ) -> Result<Vec<Vec<f64>>> {
        let mut inputs = Vec::with_capacity(batch.len());
        for (tokens, ivs) in batch {
            self.check_tokens(tokens)?;
            self.check_interventions(tokens.len(), ivs)?;
            inputs.push(SeqInput {
                tokens,
                interventions: ivs,
            });
        }
        if inputs.is_empty() {
            return Ok(Vec::new());
        }
        let acts = engine::forward(&self.config, &self.weights, &inputs);
        let rows: Vec<usize> = acts.segments.iter().map(|(s, len)| s + len - 1).collect();
        let logits = acts.logits(&self.weights, &rows);
        Ok((0..rows.len()).map(|i| log_softmax(logits.row(i))).collect())
    }

    /// Teacher-forced `Σ log P(continuation_t | prompt, continuation_<t)`,
    /// divided by the continuation length when `normalize` is set.
    pub fn sequence_logprob(
        &self,
        prompt: &[u32],
        continuation: &[u32],
        injection: Option<&Injection>,
        normalize: bool,
    ) -> Result<f64> {
        let ivs: Vec<Intervention> = injection.map(Injection::intervention).into_iter().collect();
        Ok(self.batch_sequence_logprob(&[(prompt, continuation, &ivs)], normalize)?[0])
    }

    /// Batched form of [`ToyLM::sequence_logprob`].
    pub fn batch_sequence_logprob(
        &self,
        batch: &[(&[u32], &[u32], &[Intervention])],
        normalize: bool,
    ) -> Result<Vec<f64>> {
        let mut seqs = Vec::with_capacity(batch.len());
        for (prompt, cont, ivs) in batch {
            if cont.is_empty() {
                return Err(Error::Invalid("empty continuation".into()));
            }
            if prompt.is_empty() {
                return Err(Error::Invalid("empty prompt".into()));
            }
            let mut toks = prompt.to_vec();
            toks.extend_from_slice(&cont[..cont.len() - 1]);
            self.check_tokens(&toks)?;
            self.check_tokens(cont)?;
            self.check_interventions(toks.len(), ivs)?;
            seqs.push(toks);
        }
        if seqs.is_empty() {
            return Ok(Vec::new());
        }
        let inputs: Vec<SeqInput> = seqs
            .iter()
            .zip(batch)
            .map(|(t, (_, _, ivs))| SeqInput {
                tokens: t,
                interventions: ivs,
            })
            .collect();
        let acts = engine::forward(&self.config, &self.weights, &inputs);
        let mut rows = Vec::new();
        for (s, (prompt, cont, _)) in batch.iter().enumerate() {
            for t in 0..cont.len() {
                rows.push(acts.row(s, prompt.len() - 1 + t));
            }
        }
        let logits = acts.logits(&self.weights, &rows);
        let mut out = Vec::with_capacity(batch.len());
        let mut i = 0;
        for (_, cont, _) in batch {
            let mut total = 0.0;
            for &c in cont.iter() {
                total += log_softmax(logits.row(i))[c as usize];
                i += 1;
            }
            if normalize {
                total /= cont.len() as f64;
            }
            out.push(total);
        }
        Ok(out)
    }

    /// Most probable next token.
    pub fn greedy_next(&self, tokens: &[u32]) -> Result<u32> {
        let lp = self.next_token_logprobs(tokens, &[])?;
        let mut best = 0;
        for (i, v) in lp.iter().enumerate() {
            if *v > lp[best] {
                best = i;
            }
        }
        Ok(best as u32)
    }

    /// Value and gradient of a weighted sum of loss terms with respect to a
    /// residual added to the FFN output of `layer`.
    pub fn loss_and_grad(&self, terms: &[LossTerm], layer: usize, delta: &[f64]) -> Result<LossEval> {
        let d = self.config.d_model;
        if layer >= self.config.n_layers {
            return Err(Error::LayerOutOfRange {
                layer,
                n_layers: self.config.n_layers,
            });
        }
        if delta.len() != d {
            return Err(Error::Shape(format!("δ has length {}, expected {d}", delta.len())));
        }
        if delta.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("δ".into()));
        }

        // Sequences and the logit rows each term reads.
        let mut seqs: Vec<Vec<u32>> = Vec::new();
        let mut ivs: Vec<Vec<Intervention>> = Vec::new();
        let mut seq_of_term: Vec<Option<usize>> = Vec::with_capacity(terms.len());
        for term in terms {
            let toks = match &term.kind {
                LossKind::NegLogProb {
                    prompt,
                    continuation,
                } => {
                    if continuation.is_empty() {
                        return Err(Error::Invalid("empty continuation".into()));
                    }
                    let mut t = prompt.clone();
                    t.extend_from_slice(&continuation[..continuation.len() - 1]);
                    t
                }
                LossKind::Kl { prompt, reference } => {
                    if reference.len() != self.config.vocab_size {
                        return Err(Error::Shape("KL reference has wrong support".into()));
                    }
                    prompt.clone()
                }
                LossKind::DeltaNormSq => {
                    seq_of_term.push(None);
                    continue;
                }
            };
            self.check_tokens(&toks)?;
            let iv: Vec<Intervention> = term
                .inject_at
                .map(|position| Intervention::AddFfnOutput {
                    layer,
                    position,
                    delta: delta.to_vec(),
                })
                .into_iter()
                .collect();
            self.check_interventions(toks.len(), &iv)?;
            seq_of_term.push(Some(seqs.len()));
            seqs.push(toks);
            ivs.push(iv);
        }

        let inputs: Vec<SeqInput> = seqs
            .iter()
            .zip(&ivs)
            .map(|(t, iv)| SeqInput {
                tokens: t,
                interventions: iv,
            })
            .collect();
        let acts = engine::forward(&self.config, &self.weights, &inputs);

        let mut rows = Vec::new();
        for (term, s) in terms.iter().zip(&seq_of_term) {
            let Some(s) = *s else { continue };
            match &term.kind {
                LossKind::NegLogProb {
                    prompt,
                    continuation,
                } => {
                    for t in 0..continuation.len() {
                        rows.push(acts.row(s, prompt.len() - 1 + t));
                    }
                }
                LossKind::Kl { prompt, .. } => rows.push(acts.row(s, prompt.len() - 1)),
                LossKind::DeltaNormSq => {}
            }
        }
        let logits = acts.logits(&self.weights, &rows);

        let mut values = Vec::with_capacity(terms.len());
        let mut dlogits: Vec<(usize, Vec<f64>)> = Vec::new();
        let mut grad = vec![0.0; d];
        let mut i = 0;
        for term in terms {
            let w = term.weight;
            match &term.kind {
                LossKind::NegLogProb { continuation, .. } => {
                    let first = i;
                    let mut lp = 0.0;
                    let mut probs = Vec::with_capacity(continuation.len());
                    for &c in continuation {
                        let ls = log_softmax(logits.row(i));
                        lp += ls[c as usize];
                        probs.push(ls.iter().map(|v| v.exp()).collect::<Vec<f64>>());
                        i += 1;
                    }
                    if lp.exp() < PROB_FLOOR {
                        tracing::debug!("matched probability below floor; clamped");
                        values.push(-w * PROB_FLOOR.ln());
                    } else {
                        values.push(-w * lp);
                        for (t, (&c, mut p)) in continuation.iter().zip(probs).enumerate() {
                            p[c as usize] -= 1.0;
                            for v in p.iter_mut() {
                                *v *= w;
                            }
                            dlogits.push((rows[first + t], p));
                        }
                    }
                }
                LossKind::Kl { reference, .. } => {
                    let ls = log_softmax(logits.row(i));
                    let mut kl = 0.0;
                    let mut lr = Vec::with_capacity(ls.len());
                    for (l, q) in ls.iter().zip(reference) {
                        let p = l.exp();
                        if p > 0.0 {
                            if *q <= 0.0 {
                                return Err(Error::Distribution(
                                    "KL reference is zero where the model is positive".into(),
                                ));
                            }
                            kl += p * (l - q.ln());
                        }
                        lr.push(if *q > 0.0 { l - q.ln() } else { 0.0 });
                    }
                    let g: Vec<f64> = ls
                        .iter()
                        .zip(&lr)
                        .map(|(l, r)| w * l.exp() * (r - kl))
                        .collect();
                    values.push(w * kl.max(0.0));
                    dlogits.push((rows[i], g));
                    i += 1;
                }
                LossKind::DeltaNormSq => {
                    values.push(w * delta.iter().map(|v| v * v).sum::<f64>());
                    for (g, v) in grad.iter_mut().zip(delta) {
                        *g += 2.0 * w * v;
                    }
                }
            }
        }

        if !dlogits.is_empty() {
            let grads = engine::backward(&self.config, &self.weights, &acts, &inputs, &dlogits, false);
            for site in grads.sites.iter().flatten().flatten() {
                for (g, s) in grad.iter_mut().zip(site) {
                    *g += s;
                }
            }
        }
        let total: f64 = values.iter().sum();
        if !total.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite("loss or gradient".into()));
        }
        Ok(LossEval {
            total,
            terms: values,
            grad,
        })
    }

    /// `∂L/∂δ` for the loss described by `terms`.
    pub fn grad_wrt_delta(&self, terms: &[LossTerm], layer: usize, delta: &[f64]) -> Result<Vec<f64>> {
        Ok(self.loss_and_grad(terms, layer, delta)?.grad)
    }

    /// Mean next-token cross-entropy over `sequences` and its gradient with
    /// respect to every weight.
    pub fn lm_loss_and_grads(&self, sequences: &[Vec<u32>]) -> Result<(f64, Weights)> {
        let (loss, grads) = self.masked_lm_loss_and_grads(
            &sequences
                .iter()
                .map(|s| (s.clone(), 1))
                .collect::<Vec<_>>(),
        )?;
        Ok((loss, grads))
    }

    /// Mean cross-entropy over the next-token predictions made at positions
    /// `≥ start - 1` of each sequence, i.e. over tokens `start..`.
    pub fn masked_lm_loss_and_grads(&self, sequences: &[(Vec<u32>, usize)]) -> Result<(f64, Weights)> {
        let mut inputs = Vec::with_capacity(sequences.len());
        for (s, start) in sequences {
            self.check_tokens(s)?;
            if *start == 0 || *start >= s.len() {
                return Err(Error::Invalid("nothing to predict in training sequence".into()));
            }
            inputs.push(SeqInput {
                tokens: s,
                interventions: &[],
            });
        }
        let acts = engine::forward(&self.config, &self.weights, &inputs);
        let mut rows = Vec::new();
        let mut targets = Vec::new();
        for (k, (s, start)) in sequences.iter().enumerate() {
            for t in *start..s.len() {
                rows.push(acts.row(k, t - 1));
                targets.push(s[t]);
            }
        }
        let n = rows.len() as f64;
        let logits = acts.logits(&self.weights, &rows);
        let mut loss = 0.0;
        let mut dlogits = Vec::with_capacity(rows.len());
        for (i, (&r, &t)) in rows.iter().zip(&targets).enumerate() {
            let ls = log_softmax(logits.row(i));
            loss -= ls[t as usize];
            let mut g: Vec<f64> = ls.iter().map(|v| v.exp() / n).collect();
            g[t as usize] -= 1.0 / n;
            dlogits.push((r, g));
        }
        let grads = engine::backward(&self.config, &self.weights, &acts, &inputs, &dlogits, true);
        Ok((loss / n, grads.params.expect("parameter gradients requested")))
    }
}
