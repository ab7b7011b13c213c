// SPDX-License-Identifier: MIT OR Apache-2.0

//! Set editing: residual optimization under a bipartite-matched loss,
//! residual spreading and the closed-form weight update.

pub mod config;
pub mod trace;
pub mod update;

use serde::{Deserialize, Serialize};

use crate::data::corpus::essence_prompt;
use crate::data::editset::SUBJECT_SLOT;
use crate::data::KseInstance;
use crate::error::{Error, Result};
use crate::matching::{build_cost_matrix, hungarian_solve, Assignment, Target};
use crate::model::{Injection, LossKind, LossTerm, ToyLM};
use crate::numerics::Matrix;
use crate::optim::Adam;

pub use config::{BaselineKind, EditorConfig, InjectionRule, LayerSpec};
pub use trace::{causal_trace, locate_layers, LayerSelection, TraceConfig, TraceResult};
pub use update::{
    apply_edit, compute_covariance, compute_keys, sample_prompts, spread_residual, CovarianceCache, EditReport,
    InstanceReport, UpdateSolution,
};

/// How targets are assigned to slots at each optimizer step.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum AssignmentMode {
    /// Optimal bipartite matching, re-solved every step.
    Hungarian,
    /// Target `j` always fills slot `j`.
    Identity,
}

/// Everything the residual loss needs for one instance.
#[derive(Clone, Debug, PartialEq)]
pub struct EditObjective {
    pub edit_prompt: Vec<u32>,
    /// Position of the injected residual in the edit prompt and in every
    /// slot context.
    pub injection_position: usize,
    /// Current objects ordered by pre-edit probability.
    pub slot_objects: Vec<String>,
    /// Context of slot `k`: the edit prompt followed by the first `k` slot
    /// objects, each followed by the separator.
    pub slot_contexts: Vec<Vec<u32>>,
    pub targets: Vec<String>,
    pub target_tokens: Vec<Vec<u32>>,
    pub essence_prompt: Vec<u32>,
    pub essence_position: usize,
    /// Pre-edit next-token distribution at the essence prompt.
    pub essence_reference: Vec<f64>,
    pub edit_weight: f64,
    pub kl_weight: f64,
    pub normalize_length: bool,
}

/// Token position of the last subject token in `template` filled with
/// `subject`, counting the leading `<bos>`.
pub fn subject_last_position(model: &ToyLM, template: &str, subject: &str) -> Result<usize> {
    let (before, _) = template
        .split_once(SUBJECT_SLOT)
        .ok_or_else(|| Error::Invalid(format!("template `{template}` has no subject slot")))?;
    let n_before = model.vocab.encode(before)?.len();
    let n_subject = model.vocab.encode(subject)?.len();
    if n_subject == 0 {
        return Err(Error::Invalid("subject encodes to no tokens".into()));
    }
    Ok(n_before + n_subject)
}

/// Position rule applied to a filled prompt.
pub fn injection_position(
    model: &ToyLM,
    rule: InjectionRule,
    template: &str,
    subject: &str,
) -> Result<usize> {
    match rule {
        InjectionRule::SubjectLast => subject_last_position(model, template, subject),
        InjectionRule::PromptLast => {
            let filled = template.replacen(SUBJECT_SLOT, subject, 1);
            Ok(model.vocab.encode_prompt(&filled)?.len() - 1)
        }
    }
}

/// Probability of `continuation` after each prompt, batched.
pub(crate) fn probabilities(
    model: &ToyLM,
    queries: &[(&[u32], &[u32])],
    injection: Option<&Injection>,
    normalize: bool,
) -> Result<Vec<f64>> {
    let ivs: Vec<crate::model::Intervention> = injection
        .map(|inj| crate::model::Intervention::AddFfnOutput {
            layer: inj.layer,
            position: inj.position,
            delta: inj.delta.clone(),
        })
        .into_iter()
        .collect();
    let batch: Vec<(&[u32], &[u32], &[crate::model::Intervention])> =
        queries.iter().map(|(p, c)| (*p, *c, ivs.as_slice())).collect();
    Ok(model
        .batch_sequence_logprob(&batch, normalize)?
        .into_iter()
        .map(f64::exp)
        .collect())
}

impl EditObjective {
    /// Builds the objective for `instance` against the current model.
    pub fn build(model: &ToyLM, instance: &KseInstance, cfg: &EditorConfig) -> Result<Self> {
        instance.validate()?;
        let prompt_text = instance.filled_edit_prompt();
        let edit_prompt = model.vocab.encode_prompt(&prompt_text)?;
        let inject_pos =
            injection_position(model, cfg.injection, &instance.edit_prompt, &instance.subject)?;
        let separator = model.vocab.encode(&cfg.separator)?;

        let object_tokens: Vec<Vec<u32>> = instance
            .objects
            .iter()
            .map(|o| model.vocab.encode(o))
            .collect::<Result<_>>()?;
        let queries: Vec<(&[u32], &[u32])> = object_tokens
            .iter()
            .map(|o| (edit_prompt.as_slice(), o.as_slice()))
            .collect();
        let pre = probabilities(model, &queries, None, cfg.normalize_length)?;
        let mut order: Vec<usize> = (0..instance.objects.len()).collect();
        order.sort_by(|&a, &b| pre[b].total_cmp(&pre[a]).then(a.cmp(&b)));

        let mut slot_contexts = Vec::with_capacity(order.len());
        let mut ctx = edit_prompt.clone();
        for &k in &order {
            slot_contexts.push(ctx.clone());
            ctx.extend_from_slice(&object_tokens[k]);
            ctx.extend_from_slice(&separator);
        }

        let target_tokens: Vec<Vec<u32>> = instance
            .targets
            .iter()
            .map(|t| model.vocab.encode(t))
            .collect::<Result<_>>()?;
        if target_tokens.iter().any(Vec::is_empty) {
            return Err(Error::Invalid("a target encodes to no tokens".into()));
        }

        let essence_template = essence_prompt(SUBJECT_SLOT);
        let essence = model
            .vocab
            .encode_prompt(&essence_prompt(&instance.subject))?;
        let essence_position =
            injection_position(model, cfg.injection, &essence_template, &instance.subject)?;
        let essence_reference: Vec<f64> = model
            .next_token_logprobs(&essence, &[])?
            .into_iter()
            .map(f64::exp)
            .collect();

        Ok(Self {
            edit_prompt,
            injection_position: inject_pos,
            slot_objects: order.iter().map(|&k| instance.objects[k].clone()).collect(),
            slot_contexts,
            targets: instance.targets.clone(),
            target_tokens,
            essence_prompt: essence,
            essence_position,
            essence_reference,
            edit_weight: 1.0,
            kl_weight: cfg.kl_weight_per_target * instance.targets.len() as f64,
            normalize_length: cfg.normalize_length,
        })
    }

    pub fn n_slots(&self) -> usize {
        self.slot_contexts.len()
    }

    fn injection(&self, layer: usize, delta: &[f64]) -> Injection {
        Injection {
            layer,
            position: self.injection_position,
            delta: delta.to_vec(),
        }
    }

    /// Targets padded with `∅` up to the slot count.
    fn match_targets(&self) -> Vec<Target> {
        let mut t: Vec<Target> = self.targets.iter().cloned().map(Target::Object).collect();
        t.resize(self.n_slots(), Target::Empty);
        t
    }
}

/// `P_k(y_j)` for every real target `j` and slot `k` under residual `delta`
/// added at `layer`.
pub fn slot_probabilities(
    model: &ToyLM,
    objective: &EditObjective,
    layer: usize,
    delta: &[f64],
) -> Result<Matrix> {
    let m = objective.targets.len();
    let n = objective.n_slots();
    let mut queries = Vec::with_capacity(m * n);
    for t in &objective.target_tokens {
        for ctx in &objective.slot_contexts {
            queries.push((ctx.as_slice(), t.as_slice()));
        }
    }
    let inj = objective.injection(layer, delta);
    let p = probabilities(model, &queries, Some(&inj), objective.normalize_length)?;
    Matrix::from_vec(m, n, p)
}

/// Solves the assignment for a probability grid.
pub fn assign(objective: &EditObjective, grid: &Matrix, mode: AssignmentMode) -> Result<Assignment> {
    let cost = build_cost_matrix(&objective.match_targets(), grid)?;
    match mode {
        AssignmentMode::Hungarian => hungarian_solve(&cost),
        AssignmentMode::Identity => Assignment::identity(&cost),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SetkeLoss {
    pub total: f64,
    pub edit: f64,
    pub kl: f64,
    pub grad: Vec<f64>,
}

/// Matched edit loss plus the weighted essence KL, with `∂/∂δ`.
///
/// `assignment.permutation[j]` is the slot of target `j`; padded rows past
/// the real targets contribute nothing.
pub fn setke_loss(
    model: &ToyLM,
    objective: &EditObjective,
    layer: usize,
    delta: &[f64],
    assignment: &Assignment,
) -> Result<SetkeLoss> {
    if !assignment.is_bijection() || assignment.permutation.len() != objective.n_slots() {
        return Err(Error::Invalid("assignment is not a bijection over the slots".into()));
    }
    let mut terms = Vec::with_capacity(objective.targets.len() + 1);
    for (j, tokens) in objective.target_tokens.iter().enumerate() {
        let slot = assignment.permutation[j];
        terms.push(LossTerm {
            kind: LossKind::NegLogProb {
                prompt: objective.slot_contexts[slot].clone(),
                continuation: tokens.clone(),
            },
            weight: objective.edit_weight,
            inject_at: Some(objective.injection_position),
        });
    }
    terms.push(LossTerm {
        kind: LossKind::Kl {
            prompt: objective.essence_prompt.clone(),
            reference: objective.essence_reference.clone(),
        },
        weight: objective.kl_weight,
        inject_at: Some(objective.essence_position),
    });
    let eval = model.loss_and_grad(&terms, layer, delta)?;
    let kl = *eval.terms.last().expect("kl term");
    let edit: f64 = eval.terms[..eval.terms.len() - 1].iter().sum();
    Ok(SetkeLoss {
        total: eval.total,
        edit,
        kl,
        grad: eval.grad,
    })
}

/// Residual optimization settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EditPlan {
    /// Contiguous ascending critical layers; the residual lives at the last.
    pub layers: Vec<usize>,
    pub lr: f64,
    pub max_steps: usize,
    pub early_stop_prob: f64,
}

impl EditPlan {
    pub fn from_config(layers: Vec<usize>, cfg: &EditorConfig) -> Self {
        Self {
            layers,
            lr: cfg.lr,
            max_steps: cfg.max_steps,
            early_stop_prob: cfg.early_stop_prob,
        }
    }

    pub fn injection_layer(&self) -> usize {
        *self.layers.last().expect("validated plan")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub loss: f64,
    pub best_loss: f64,
    pub permutation: Vec<usize>,
    pub matched: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DeltaOutcome {
    pub delta: Vec<f64>,
    pub best_loss: f64,
    pub assignment: Vec<usize>,
    pub trajectory: Vec<StepRecord>,
    pub early_stopped: bool,
}

/// Adam on `δ`, re-solving the assignment at every step and keeping the
/// residual with the lowest observed loss.
pub fn optimize_delta(
    model: &ToyLM,
    objective: &EditObjective,
    plan: &EditPlan,
    mode: AssignmentMode,
) -> Result<DeltaOutcome> {
    config::check_layers(&plan.layers, model.config.n_layers)?;
    let layer = plan.injection_layer();
    let d = model.config.d_model;
    let mut delta = vec![0.0; d];
    let mut best = DeltaOutcome {
        delta: delta.clone(),
        best_loss: f64::INFINITY,
        assignment: (0..objective.n_slots()).collect(),
        trajectory: Vec::new(),
        early_stopped: false,
    };
    if plan.max_steps == 0 {
        return Ok(best);
    }
    let mut opt = Adam::new(d, plan.lr);
    for step in 0..=plan.max_steps {
        let grid = slot_probabilities(model, objective, layer, &delta)?;
        let assignment = assign(objective, &grid, mode)?;
        let loss = setke_loss(model, objective, layer, &delta, &assignment)?;
        if !loss.total.is_finite() {
            return Err(Error::NonFinite(format!("loss at step {step}, ‖δ‖ = {}", norm(&delta))));
        }
        let matched: Vec<f64> = (0..objective.targets.len())
            .map(|j| grid.get(j, assignment.permutation[j]))
            .collect();
        if loss.total < best.best_loss {
            best.best_loss = loss.total;
            best.delta.clone_from(&delta);
            best.assignment.clone_from(&assignment.permutation);
        }
        best.trajectory.push(StepRecord {
            loss: loss.total,
            best_loss: best.best_loss,
            permutation: assignment.permutation.clone(),
            matched: matched.clone(),
        });
        if matched.iter().all(|&p| p >= plan.early_stop_prob) {
            best.early_stopped = true;
            break;
        }
        if step == plan.max_steps {
            break;
        }
        opt.step(&mut delta, &loss.grad);
    }
    tracing::debug!(
        steps = best.trajectory.len(),
        loss = best.best_loss,
        early = best.early_stopped,
        "residual optimized"
    );
    Ok(best)
}

pub(crate) fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}
