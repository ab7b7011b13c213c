// SPDX-License-Identifier: MIT OR Apache-2.0

//! Integrated-gradients attribution over FFN inner neurons.

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::csv_err;
use crate::model::engine::{self, SeqInput};
use crate::model::{Intervention, ToyLM};
use crate::numerics::{softmax, Matrix};

pub const DEFAULT_IG_STEPS: usize = 300;
pub const DEFAULT_THRESHOLD: f64 = 0.2;

/// Midpoint-rule integrated gradients of a scalar function along the
/// straight path from `baseline` to `x`.
///
/// `grads` receives a batch of path points and returns the gradient at
/// each.
pub fn integrated_gradients_fn<G>(x: &[f64], baseline: &[f64], steps: usize, mut grads: G) -> Result<Vec<f64>>
where
    G: FnMut(&[Vec<f64>]) -> Result<Vec<Vec<f64>>>,
{
    if steps == 0 {
        return Err(Error::Invalid("integrated gradients need at least one step".into()));
    }
    if x.len() != baseline.len() {
        return Err(Error::Shape(format!(
            "input has {} entries, baseline {}",
            x.len(),
            baseline.len()
        )));
    }
    let points: Vec<Vec<f64>> = (0..steps)
        .map(|i| {
            let alpha = (i as f64 + 0.5) / steps as f64;
            x.iter().zip(baseline).map(|(a, b)| b + alpha * (a - b)).collect()
        })
        .collect();
    let g = grads(&points)?;
    if g.len() != steps || g.iter().any(|v| v.len() != x.len()) {
        return Err(Error::Shape("gradient batch does not match the path".into()));
    }
    let mut mean = vec![0.0; x.len()];
    for v in &g {
        for (m, gi) in mean.iter_mut().zip(v) {
            *m += gi;
        }
    }
    let out: Vec<f64> = mean
        .iter()
        .zip(x.iter().zip(baseline))
        .map(|(m, (a, b))| (a - b) * m / steps as f64)
        .collect();
    if out.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("attribution".into()));
    }
    Ok(out)
}

/// Attribution of one fact to every FFN inner neuron at the prompt's last
/// position, with a zero baseline applied one layer at a time.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttributionMap {
    pub prompt: String,
    pub target: String,
    pub steps: usize,
    /// `n_layers × d_ffn` integrated-gradient scores.
    pub scores: Matrix,
    /// `n_layers × d_ffn` raw inner activations.
    pub activations: Matrix,
    /// Next-token probability of the target's first token.
    pub target_prob: f64,
    /// Target probability with each layer's activations zeroed.
    pub baseline_probs: Vec<f64>,
}

impl AttributionMap {
    /// `|Σ scores − Σ_l (F(x) − F(baseline_l))| / Σ_l |F(x) − F(baseline_l)|`.
    pub fn completeness_gap(&self) -> f64 {
        let total: f64 = self.scores.data().iter().sum();
        let expected: f64 = self.baseline_probs.iter().map(|b| self.target_prob - b).sum();
        let scale: f64 = self
            .baseline_probs
            .iter()
            .map(|b| (self.target_prob - b).abs())
            .sum();
        if scale == 0.0 {
            return total.abs();
        }
        (total - expected).abs() / scale
    }
}

/// Probability of `target` after `tokens` and its gradient with respect to
/// the activation `(layer, last position)`, for each substituted value.
fn prob_and_activation_grads(
    model: &ToyLM,
    tokens: &[u32],
    target: u32,
    layer: usize,
    values: &[Vec<f64>],
) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
    let pos = tokens.len() - 1;
    let ivs: Vec<[Intervention; 1]> = values
        .iter()
        .map(|v| {
            [Intervention::SetActivation {
                layer,
                position: pos,
                value: v.clone(),
            }]
        })
        .collect();
    let batch: Vec<SeqInput> = ivs
        .iter()
        .map(|iv| SeqInput {
            tokens,
            interventions: iv,
        })
        .collect();
    let acts = engine::forward(&model.config, &model.weights, &batch);
    let rows: Vec<usize> = (0..batch.len()).map(|s| acts.row(s, pos)).collect();
    let logits = acts.logits(&model.weights, &rows);
    let mut probs = Vec::with_capacity(rows.len());
    let mut dlogits = Vec::with_capacity(rows.len());
    for (i, &r) in rows.iter().enumerate() {
        let p = softmax(logits.row(i));
        let pt = p[target as usize];
        let mut g: Vec<f64> = p.iter().map(|q| -pt * q).collect();
        g[target as usize] += pt;
        probs.push(pt);
        dlogits.push((r, g));
    }
    let grads = engine::backward(&model.config, &model.weights, &acts, &batch, &dlogits, false);
    let site = grads
        .sites
        .into_iter()
        .map(|s| s.into_iter().next().flatten().expect("activation site gradient"))
        .collect();
    Ok((probs, site))
}

/// Integrated gradients for `target` following `prompt`.
pub fn integrated_gradients(model: &ToyLM, prompt: &str, target: &str, steps: usize) -> Result<AttributionMap> {
    let tokens = model.vocab.encode_prompt(prompt)?;
    let target_tokens = model.vocab.encode(target)?;
    let &first = target_tokens
        .first()
        .ok_or_else(|| Error::Invalid("target encodes to no tokens".into()))?;
    if tokens.len() > model.config.max_seq_len {
        return Err(Error::SequenceTooLong {
            len: tokens.len(),
            max: model.config.max_seq_len,
        });
    }
    let n_layers = model.config.n_layers;
    let f = model.config.d_ffn;
    let clean = model.forward_with(&tokens, &[])?;
    let pos = tokens.len() - 1;
    let target_prob = clean.next_token_probs(pos)[first as usize];

    let mut scores = Matrix::zeros(n_layers, f);
    let mut activations = Matrix::zeros(n_layers, f);
    let mut baseline_probs = Vec::with_capacity(n_layers);
    let zero = vec![0.0; f];
    for l in 0..n_layers {
        let a = clean.activations[l].row(pos).to_vec();
        activations.row_mut(l).copy_from_slice(&a);
        let (p0, _) = prob_and_activation_grads(model, &tokens, first, l, std::slice::from_ref(&zero))?;
        baseline_probs.push(p0[0]);
        let attr = integrated_gradients_fn(&a, &zero, steps, |pts| {
            prob_and_activation_grads(model, &tokens, first, l, pts).map(|(_, g)| g)
        })?;
        scores.row_mut(l).copy_from_slice(&attr);
    }
    Ok(AttributionMap {
        prompt: prompt.to_string(),
        target: target.to_string(),
        steps,
        scores,
        activations,
        target_prob,
        baseline_probs,
    })
}

/// `(layer, neuron)` indices, serialized as a list of pairs.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NeuronSet {
    pub neurons: BTreeSet<(usize, usize)>,
}

impl NeuronSet {
    pub fn len(&self) -> usize {
        self.neurons.len()
    }

    pub fn is_empty(&self) -> bool {
        self.neurons.is_empty()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

/// Neurons scoring at least `tau` times the largest score.
///
/// A map with no positive score yields an empty set and a warning.
pub fn select_knowledge_neurons(map: &AttributionMap, tau: f64) -> Result<NeuronSet> {
    if !(tau > 0.0 && tau <= 1.0) {
        return Err(Error::Invalid(format!("threshold {tau} outside (0, 1]")));
    }
    let max = map.scores.data().iter().copied().fold(0.0, f64::max);
    let mut set = NeuronSet::default();
    if max <= 0.0 {
        tracing::warn!(prompt = %map.prompt, "attribution map has no positive score");
        return Ok(set);
    }
    let cut = tau * max;
    for l in 0..map.scores.rows() {
        for (n, &s) in map.scores.row(l).iter().enumerate() {
            if s > 0.0 && s >= cut {
                set.neurons.insert((l, n));
            }
        }
    }
    Ok(set)
}

/// Jaccard index; 0 when both sets are empty.
pub fn neuron_overlap(a: &NeuronSet, b: &NeuronSet) -> f64 {
    let union = a.neurons.union(&b.neurons).count();
    if union == 0 {
        return 0.0;
    }
    a.neurons.intersection(&b.neurons).count() as f64 / union as f64
}

#[derive(Serialize, Deserialize)]
struct HeatRow {
    layer: usize,
    neuron: usize,
    score: f64,
}

fn write_grid(m: &Matrix, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    if m.rows() == 0 {
        w.write_record(["layer", "neuron", "score"]).map_err(|e| csv_err(path, e))?;
    }
    for l in 0..m.rows() {
        for (n, &score) in m.row(l).iter().enumerate() {
            w.serialize(HeatRow { layer: l, neuron: n, score })
                .map_err(|e| csv_err(path, e))?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Writes integrated-gradient scores as `layer,neuron,score` rows.
pub fn export_heatmap(map: &AttributionMap, path: &Path) -> Result<()> {
    write_grid(&map.scores, path)
}

/// Writes raw activations in the heatmap layout.
pub fn export_activations(map: &AttributionMap, path: &Path) -> Result<()> {
    write_grid(&map.activations, path)
}

/// Reads a heatmap file back into an `n_layers × d_ffn` grid.
pub fn read_heatmap(path: &Path) -> Result<Matrix> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    let rows: Vec<HeatRow> = r
        .deserialize()
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| csv_err(path, e))?;
    if rows.is_empty() {
        return Ok(Matrix::zeros(0, 0));
    }
    let n_layers = rows.iter().map(|r| r.layer).max().expect("non-empty") + 1;
    let width = rows.iter().map(|r| r.neuron).max().expect("non-empty") + 1;
    if rows.len() != n_layers * width {
        return Err(Error::Record {
            path: path.to_path_buf(),
            line: 0,
            message: format!("expected {} cells, found {}", n_layers * width, rows.len()),
        });
    }
    let mut m = Matrix::zeros(n_layers, width);
    for row in rows {
        m.set(row.layer, row.neuron, row.score);
    }
    Ok(m)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelConfig, Vocab};

    fn tiny() -> ToyLM {
        let vocab = Vocab::build(["the cat sat on a mat , dog ran ."]);
        ToyLM::new(ModelConfig::tiny(vocab.len()), vocab).unwrap()
    }

    #[test]
    fn linear_function_is_exact_for_any_step_count() {
        let w = [0.5, -2.0, 3.0];
        let x = [1.0, 0.25, -1.5];
        for steps in [1, 7, 300] {
            let attr = integrated_gradients_fn(&x, &[0.0; 3], steps, |pts| {
                Ok(pts.iter().map(|_| w.to_vec()).collect())
            })
            .unwrap();
            for i in 0..3 {
                assert_eq!(attr[i], w[i] * x[i]);
            }
        }
    }

    #[test]
    fn baseline_equal_to_input_gives_zero() {
        let x = [0.3, -0.7];
        let attr = integrated_gradients_fn(&x, &x, 10, |pts| Ok(pts.iter().map(|_| vec![1.0, 1.0]).collect())).unwrap();
        assert_eq!(attr, vec![0.0, 0.0]);
    }

    #[test]
    fn quadratic_completeness() {
        // F(x) = Σ x_i², exact IG along the straight path is x_i².
        let x = [0.4, -1.2, 2.0];
        let attr = integrated_gradients_fn(&x, &[0.0; 3], 300, |pts| {
            Ok(pts.iter().map(|p| p.iter().map(|v| 2.0 * v).collect()).collect())
        })
        .unwrap();
        for i in 0..3 {
            assert!((attr[i] - x[i] * x[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn model_map_shape_and_completeness() {
        let m = tiny();
        let map = integrated_gradients(&m, "the cat sat", "on", 300).unwrap();
        assert_eq!(map.scores.shape(), (2, 16));
        assert!(map.completeness_gap() < 1e-3, "{}", map.completeness_gap());
    }

    #[test]
    fn selection_and_overlap() {
        let mut map = integrated_gradients(&tiny(), "the cat", "sat", 20).unwrap();
        map.scores = Matrix::from_rows(&[vec![1.0, 0.5, 0.1], vec![-2.0, 0.2, 1.0]]).unwrap();
        let top = select_knowledge_neurons(&map, 1.0).unwrap();
        assert_eq!(top.neurons, BTreeSet::from([(0, 0), (1, 2)]));
        let all = select_knowledge_neurons(&map, 1e-9).unwrap();
        assert_eq!(all.len(), 5);
        assert!(select_knowledge_neurons(&map, 0.0).is_err());
        assert_eq!(neuron_overlap(&top, &top), 1.0);
        assert_eq!(neuron_overlap(&top, &all), 0.4);
        assert_eq!(neuron_overlap(&NeuronSet::default(), &NeuronSet::default()), 0.0);
        map.scores = Matrix::zeros(2, 3);
        assert!(select_knowledge_neurons(&map, 0.2).unwrap().is_empty());
        let json = top.to_json().unwrap();
        assert_eq!(json, "[[0,0],[1,2]]");
        assert_eq!(NeuronSet::from_json(&json).unwrap(), top);
    }

    #[test]
    fn heatmap_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let map = integrated_gradients(&tiny(), "the dog", "ran", 8).unwrap();
        let path = dir.path().join("heat.csv");
        export_heatmap(&map, &path).unwrap();
        assert_eq!(read_heatmap(&path).unwrap(), map.scores);
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), 1 + 2 * 16);

        let mut empty = map.clone();
        empty.scores = Matrix::zeros(0, 0);
        export_heatmap(&empty, &path).unwrap();
        assert_eq!(std::fs::read_to_string(&path).unwrap(), "layer,neuron,score\n");
        assert_eq!(read_heatmap(&path).unwrap(), Matrix::zeros(0, 0));
    }
}
