// SPDX-License-Identifier: MIT OR Apache-2.0

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::config::{check_layers, EditorConfig};
use super::{optimize_delta, probabilities, AssignmentMode, EditObjective, EditPlan};
use crate::data::KseInstance;
use crate::error::{Error, Result};
use crate::model::engine::{self, SeqInput};
use crate::model::ToyLM;
use crate::numerics::{gemm, regularized_residual, solve_regularized, Matrix};

/// `δ / (L − l′ + 1)` for critical layers ending at `L`.
pub fn spread_residual(delta: &[f64], layers: &[usize], layer: usize) -> Result<Vec<f64>> {
    let last = *layers
        .last()
        .ok_or_else(|| Error::Invalid("critical layer set is empty".into()))?;
    if !layers.contains(&layer) {
        return Err(Error::Invalid(format!("layer {layer} is not in {layers:?}")));
    }
    let share = (last - layer + 1) as f64;
    Ok(delta.iter().map(|v| v / share).collect())
}

/// Per-sequence hidden state after block `layer` and FFN inner activation
/// at `layer`, both at the given position.
fn site_values(
    model: &ToyLM,
    prompts: &[(Vec<u32>, usize)],
    hidden_layer: Option<usize>,
    key_layer: Option<usize>,
) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    let inputs: Vec<SeqInput> = prompts
        .iter()
        .map(|(t, _)| SeqInput {
            tokens: t,
            interventions: &[],
        })
        .collect();
    for (t, p) in prompts {
        if t.is_empty() || t.len() > model.config.max_seq_len || *p >= t.len() {
            return Err(Error::Invalid("bad key prompt or position".into()));
        }
    }
    let acts = engine::forward(&model.config, &model.weights, &inputs);
    let mut hidden = Vec::new();
    let mut keys = Vec::new();
    for (s, (_, p)) in prompts.iter().enumerate() {
        let r = acts.row(s, *p);
        if let Some(l) = hidden_layer {
            hidden.push(acts.layers[l].x_out.row(r).to_vec());
        }
        if let Some(l) = key_layer {
            keys.push(acts.layers[l].act.row(r).to_vec());
        }
    }
    Ok((hidden, keys))
}

/// Key matrix `K^l` (`d_ffn × n`): inner FFN activations at each prompt's
/// injection position.
pub fn compute_keys(model: &ToyLM, prompts: &[(Vec<u32>, usize)], layer: usize) -> Result<Matrix> {
    if prompts.is_empty() {
        return Err(Error::Invalid("keys need at least one prompt".into()));
    }
    let (_, keys) = site_values(model, prompts, None, Some(layer))?;
    let cols: Vec<&[f64]> = keys.iter().map(Vec::as_slice).collect();
    Matrix::from_columns(model.config.d_ffn, &cols)
}

/// Second-moment matrices `Σ k kᵀ` of inner activations at every position
/// of `prompts`, one per requested layer, and the number of keys summed.
pub fn compute_covariance(
    model: &ToyLM,
    prompts: &[Vec<u32>],
    layers: &[usize],
) -> Result<(Vec<Matrix>, usize)> {
    if prompts.is_empty() {
        return Err(Error::Invalid("covariance needs at least one sample prompt".into()));
    }
    let f = model.config.d_ffn;
    let mut out = vec![Matrix::zeros(f, f); layers.len()];
    let mut n_keys = 0;
    for chunk in prompts.chunks(64) {
        for t in chunk {
            if t.is_empty() || t.len() > model.config.max_seq_len {
                return Err(Error::Invalid("bad covariance prompt".into()));
            }
        }
        let inputs: Vec<SeqInput> = chunk
            .iter()
            .map(|t| SeqInput {
                tokens: t,
                interventions: &[],
            })
            .collect();
        let acts = engine::forward(&model.config, &model.weights, &inputs);
        for (c, &l) in out.iter_mut().zip(layers) {
            let a = &acts.layers[l].act;
            let rows = a.rows();
            gemm(
                f,
                rows,
                f,
                1.0,
                (a.data(), 1, f),
                (a.data(), f, 1),
                1.0,
                (c.data_mut(), f, 1),
            );
        }
        n_keys += chunk.iter().map(Vec::len).sum::<usize>();
    }
    for c in &mut out {
        symmetrize(c);
    }
    Ok((out, n_keys))
}

fn symmetrize(c: &mut Matrix) {
    let n = c.rows();
    for i in 0..n {
        for j in i + 1..n {
            let v = 0.5 * (c.get(i, j) + c.get(j, i));
            c.set(i, j, v);
            c.set(j, i, v);
        }
    }
}

/// Scaled covariance `C^l` for each critical layer.
#[derive(Clone, Debug, PartialEq)]
pub struct CovarianceCache {
    pub layers: Vec<usize>,
    pub matrices: Vec<Matrix>,
    pub n_keys: usize,
}

impl CovarianceCache {
    pub fn compute(
        model: &ToyLM,
        prompts: &[Vec<u32>],
        layers: &[usize],
        weight: f64,
    ) -> Result<Self> {
        let (mut matrices, n_keys) = compute_covariance(model, prompts, layers)?;
        for m in &mut matrices {
            *m = m.scale(weight);
        }
        Ok(Self {
            layers: layers.to_vec(),
            matrices,
            n_keys,
        })
    }

    pub fn get(&self, layer: usize) -> Result<&Matrix> {
        self.layers
            .iter()
            .position(|&l| l == layer)
            .map(|i| &self.matrices[i])
            .ok_or_else(|| Error::Invalid(format!("no covariance for layer {layer}")))
    }
}

/// Draws up to `count` corpus sentences as covariance prompts.
pub fn sample_prompts(model: &ToyLM, corpus: &[String], count: usize, seed: u64) -> Result<Vec<Vec<u32>>> {
    let mut idx: Vec<usize> = (0..corpus.len()).collect();
    idx.shuffle(&mut crate::rng::stream(seed, "covariance"));
    idx.truncate(count);
    idx.sort_unstable();
    idx.iter().map(|&i| model.vocab.encode_prompt(&corpus[i])).collect()
}

/// Closed-form update of one layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UpdateSolution {
    pub layer: usize,
    /// `R^l`, one spread residual per column.
    pub residuals: Matrix,
    /// `K^l`, one key per column after deduplication.
    pub keys: Matrix,
    pub delta: Matrix,
    /// `‖Δ(C + KKᵀ) − RKᵀ‖ / ‖RKᵀ‖`.
    pub relative_residual: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InstanceReport {
    pub case_id: String,
    pub targets: Vec<String>,
    /// `P(target | edit prompt)` before and after the edit.
    pub pre: Vec<f64>,
    pub post: Vec<f64>,
    /// Target probabilities at their assigned slots before and after.
    pub matched_pre: Vec<f64>,
    pub matched_post: Vec<f64>,
    /// Slot of each target.
    pub assignment: Vec<usize>,
    pub delta_norm: f64,
    pub steps: usize,
    pub early_stopped: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EditReport {
    pub layers: Vec<usize>,
    pub instances: Vec<InstanceReport>,
    pub solutions: Vec<UpdateSolution>,
}

/// Plain-model probability of each target at the edit prompt and at its
/// assigned slot.
fn target_probabilities(
    model: &ToyLM,
    obj: &EditObjective,
    assignment: &[usize],
) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut queries: Vec<(&[u32], &[u32])> = Vec::new();
    for t in &obj.target_tokens {
        queries.push((&obj.edit_prompt, t));
    }
    for (j, t) in obj.target_tokens.iter().enumerate() {
        queries.push((&obj.slot_contexts[assignment[j]], t));
    }
    let p = probabilities(model, &queries, None, obj.normalize_length)?;
    let m = obj.target_tokens.len();
    Ok((p[..m].to_vec(), p[m..].to_vec()))
}

/// Edits `model` so every instance's targets replace its objects.
///
/// Residuals are optimized against the pre-edit model and injected at the
/// last critical layer. Layers are then updated in ascending order, each
/// closing its share of the remaining gap. On any error the model is left
/// exactly as it was.
pub fn apply_edit(
    model: &mut ToyLM,
    instances: &[KseInstance],
    cfg: &EditorConfig,
    layers: &[usize],
    covariance: &CovarianceCache,
    mode: AssignmentMode,
) -> Result<EditReport> {
    if instances.is_empty() {
        return Ok(EditReport {
            layers: layers.to_vec(),
            ..Default::default()
        });
    }
    check_layers(layers, model.config.n_layers)?;
    let snapshot: Vec<Matrix> = layers
        .iter()
        .map(|&l| model.weights.layers[l].proj_w.clone())
        .collect();
    match edit_inner(model, instances, cfg, layers, covariance, mode) {
        Ok(report) => Ok(report),
        Err(e) => {
            for (&l, w) in layers.iter().zip(snapshot) {
                model.weights.layers[l].proj_w = w;
            }
            Err(Error::EditAborted(e.to_string()))
        }
    }
}

fn edit_inner(
    model: &mut ToyLM,
    instances: &[KseInstance],
    cfg: &EditorConfig,
    layers: &[usize],
    covariance: &CovarianceCache,
    mode: AssignmentMode,
) -> Result<EditReport> {
    let plan = EditPlan::from_config(layers.to_vec(), cfg);
    let last = plan.injection_layer();

    let mut objectives = Vec::with_capacity(instances.len());
    let mut outcomes = Vec::with_capacity(instances.len());
    for inst in instances {
        let obj = EditObjective::build(model, inst, cfg)?;
        let out = optimize_delta(model, &obj, &plan, mode)?;
        objectives.push(obj);
        outcomes.push(out);
    }
    let sites: Vec<(Vec<u32>, usize)> = objectives
        .iter()
        .map(|o| (o.edit_prompt.clone(), o.injection_position))
        .collect();

    let mut pre = Vec::with_capacity(instances.len());
    for (obj, out) in objectives.iter().zip(&outcomes) {
        pre.push(target_probabilities(model, obj, &out.assignment)?);
    }

    let (h0, _) = site_values(model, &sites, Some(last), None)?;
    let targets: Vec<Vec<f64>> = h0
        .iter()
        .zip(&outcomes)
        .map(|(h, o)| h.iter().zip(&o.delta).map(|(a, b)| a + b).collect())
        .collect();

    let mut solutions = Vec::with_capacity(layers.len());
    for &l in layers {
        let (h, keys) = site_values(model, &sites, Some(last), Some(l))?;
        let mut res_cols: Vec<Vec<f64>> = Vec::new();
        let mut key_cols: Vec<Vec<f64>> = Vec::new();
        let mut counts: Vec<usize> = Vec::new();
        for ((z, hc), k) in targets.iter().zip(&h).zip(keys) {
            let gap: Vec<f64> = z.iter().zip(hc).map(|(a, b)| a - b).collect();
            let r = spread_residual(&gap, layers, l)?;
            if let Some(i) = key_cols.iter().position(|c| *c == k) {
                tracing::warn!(layer = l, "duplicate key column merged");
                for (acc, v) in res_cols[i].iter_mut().zip(&r) {
                    *acc += v;
                }
                counts[i] += 1;
            } else {
                key_cols.push(k);
                res_cols.push(r);
                counts.push(1);
            }
        }
        for (r, &c) in res_cols.iter_mut().zip(&counts) {
            for v in r.iter_mut() {
                *v /= c as f64;
            }
        }
        let d = model.config.d_model;
        let f = model.config.d_ffn;
        let r_mat = Matrix::from_columns(d, &res_cols.iter().map(Vec::as_slice).collect::<Vec<_>>())?;
        let k_mat = Matrix::from_columns(f, &key_cols.iter().map(Vec::as_slice).collect::<Vec<_>>())?;
        let c = covariance.get(l)?;
        let delta = solve_regularized(&r_mat, &k_mat, c)?;
        let rel = regularized_residual(&delta, &r_mat, &k_mat, c)?;
        model.weights.layers[l].proj_w.add_assign(&delta)?;
        if !model.weights.layers[l].proj_w.is_finite() {
            return Err(Error::NonFinite(format!("updated weights at layer {l}")));
        }
        solutions.push(UpdateSolution {
            layer: l,
            residuals: r_mat,
            keys: k_mat,
            delta,
            relative_residual: rel,
        });
    }

    let mut reports = Vec::with_capacity(instances.len());
    for (((inst, obj), out), (p_pre, m_pre)) in
        instances.iter().zip(&objectives).zip(&outcomes).zip(pre)
    {
        let (p_post, m_post) = target_probabilities(model, obj, &out.assignment)?;
        reports.push(InstanceReport {
            case_id: inst.case_id.clone(),
            targets: inst.targets.clone(),
            pre: p_pre,
            post: p_post,
            matched_pre: m_pre,
            matched_post: m_post,
            assignment: out.assignment.clone(),
            delta_norm: super::norm(&out.delta),
            steps: out.trajectory.len(),
            early_stopped: out.early_stopped,
        });
    }
    Ok(EditReport {
        layers: layers.to_vec(),
        instances: reports,
        solutions,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::toy_world;

    #[test]
    fn spreading_shares() {
        let d = vec![3.0, -6.0];
        assert_eq!(spread_residual(&d, &[1, 2, 3], 3).unwrap(), d);
        assert_eq!(spread_residual(&d, &[1, 2, 3], 1).unwrap(), vec![1.0, -2.0]);
        assert_eq!(spread_residual(&d, &[1, 2, 3], 2).unwrap(), vec![1.5, -3.0]);
        assert!(spread_residual(&d, &[1, 2, 3], 0).is_err());
        assert!(spread_residual(&d, &[], 0).is_err());
    }

    #[test]
    fn covariance_is_symmetric_and_scaled() {
        let (corpus, m) = toy_world(vec![3]);
        let prompts = sample_prompts(&m, &corpus.sentences, 10, 0).unwrap();
        assert_eq!(prompts.len(), 10);
        let one = CovarianceCache::compute(&m, &prompts, &[0, 1], 1.0).unwrap();
        let half = CovarianceCache::compute(&m, &prompts, &[0, 1], 0.5).unwrap();
        let c = one.get(1).unwrap();
        assert_eq!(c.shape(), (m.config.d_ffn, m.config.d_ffn));
        assert_eq!(*c, c.transpose());
        assert_eq!(half.get(1).unwrap(), &c.scale(0.5));
        assert_eq!(one.n_keys, prompts.iter().map(Vec::len).sum::<usize>());
        assert!(one.get(2).is_err());
    }

    #[test]
    fn empty_edit_is_a_no_op() {
        let (corpus, mut m) = toy_world(vec![3]);
        let before = m.weights.clone();
        let prompts = sample_prompts(&m, &corpus.sentences, 8, 0).unwrap();
        let cov = CovarianceCache::compute(&m, &prompts, &[1, 2], 0.01).unwrap();
        let cfg = EditorConfig::toy(3);
        let r = apply_edit(&mut m, &[], &cfg, &[1, 2], &cov, AssignmentMode::Hungarian).unwrap();
        assert!(r.instances.is_empty());
        assert_eq!(m.weights, before);
    }

    #[test]
    fn edit_touches_only_critical_projections() {
        let (corpus, mut m) = toy_world(vec![3]);
        let before = m.weights.clone();
        let prompts = sample_prompts(&m, &corpus.sentences, 16, 0).unwrap();
        let cov = CovarianceCache::compute(&m, &prompts, &[1, 2], 0.01).unwrap();
        let cfg = EditorConfig {
            max_steps: 10,
            ..EditorConfig::toy(3)
        };
        let r = apply_edit(&mut m, &corpus.instances[..2], &cfg, &[1, 2], &cov, AssignmentMode::Hungarian).unwrap();
        assert_eq!(r.solutions.len(), 2);
        for s in &r.solutions {
            assert!(s.relative_residual <= 1e-8, "{}", s.relative_residual);
            assert_eq!(s.keys.cols(), 2);
        }
        assert_eq!(m.weights.layers[0], before.layers[0]);
        assert_eq!(m.weights.layers[1].fc_w, before.layers[1].fc_w);
        assert_ne!(m.weights.layers[1].proj_w, before.layers[1].proj_w);
        assert_ne!(m.weights.layers[2].proj_w, before.layers[2].proj_w);
        assert_eq!(m.weights.wte, before.wte);
    }

    #[test]
    fn failed_edit_restores_weights() {
        let (corpus, mut m) = toy_world(vec![3]);
        let before = m.weights.clone();
        let prompts = sample_prompts(&m, &corpus.sentences, 8, 0).unwrap();
        let cov = CovarianceCache::compute(&m, &prompts, &[1], 0.01).unwrap();
        let cfg = EditorConfig {
            max_steps: 2,
            ..EditorConfig::toy(3)
        };
        let err = apply_edit(&mut m, &corpus.instances[..1], &cfg, &[1, 2], &cov, AssignmentMode::Hungarian);
        assert!(matches!(err, Err(Error::EditAborted(_))));
        assert_eq!(m.weights, before);
    }
}
