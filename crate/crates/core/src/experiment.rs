// SPDX-License-Identifier: MIT OR Apache-2.0

//! Running editors over edit sets and scoring the results.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::baselines::{concat_edit, ft_w_edit, single_object_edit, FineTuneReport, SequentialReport};
use crate::data::KseInstance;
use crate::editor::update::sample_prompts;
use crate::editor::{
    apply_edit, locate_layers, AssignmentMode, CovarianceCache, EditReport, EditorConfig,
    LayerSelection, LayerSpec, TraceConfig,
};
use crate::error::{Error, Result};
use crate::metrics::{evaluate_outcomes, metric_rows, CaseOutcome, MetricRow, MetricsRecord, ObjectOutcome, ProbPair};
use crate::model::{Intervention, ToyLM};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EditorKind {
    Setke,
    Concat,
    SingleObject,
    FtW,
}

impl EditorKind {
    pub const ALL: [EditorKind; 4] = [
        EditorKind::Setke,
        EditorKind::Concat,
        EditorKind::SingleObject,
        EditorKind::FtW,
    ];

    pub fn name(self) -> &'static str {
        match self {
            EditorKind::Setke => "setke",
            EditorKind::Concat => "concat",
            EditorKind::SingleObject => "single_object",
            EditorKind::FtW => "ft_w",
        }
    }
}

impl fmt::Display for EditorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for EditorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Invalid(format!("unknown editor `{s}`")))
    }
}

/// A base model with everything an edit needs precomputed.
#[derive(Clone, Debug)]
pub struct EditSession {
    pub model: ToyLM,
    pub config: EditorConfig,
    pub layers: LayerSelection,
    pub covariance_prompts: Vec<Vec<u32>>,
    pub covariance: CovarianceCache,
}

impl EditSession {
    /// Resolves the critical layers and samples the covariance.
    ///
    /// `probes` feed causal tracing when the config asks for it.
    pub fn prepare(
        model: ToyLM,
        config: EditorConfig,
        corpus: &[String],
        probes: &[KseInstance],
    ) -> Result<Self> {
        config.validate(model.config.n_layers)?;
        let layers = match &config.critical_layers {
            LayerSpec::Fixed(l) => LayerSelection {
                layers: l.clone(),
                profile: Vec::new(),
                fallback: false,
            },
            LayerSpec::Named(_) => {
                let fallback_layers = default_layers(model.config.n_layers);
                let trace = TraceConfig {
                    seed: config.seed,
                    ..TraceConfig::default()
                };
                locate_layers(&model, probes, config.trace_window, &fallback_layers, &trace)?
            }
        };
        let covariance_prompts = sample_prompts(&model, corpus, config.covariance_samples, config.seed)?;
        let covariance = CovarianceCache::compute(
            &model,
            &covariance_prompts,
            &layers.layers,
            config.covariance_weight,
        )?;
        Ok(Self {
            model,
            config,
            layers,
            covariance_prompts,
            covariance,
        })
    }
}

/// Configured layers used when tracing finds no signal: a window of
/// three ending one layer below the top, clipped to the model.
pub fn default_layers(n_layers: usize) -> Vec<usize> {
    let end = n_layers.saturating_sub(1).max(1);
    (end.saturating_sub(3)..end).collect()
}

/// Per-editor artifacts of one case.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EditArtifacts {
    Set(EditReport),
    Sequential(SequentialReport),
    FineTune(FineTuneReport),
}

impl EditArtifacts {
    /// Whether a later step pushed down an earlier target; set edits run a
    /// single step and never do.
    pub fn overwritten(&self) -> bool {
        self.overwritten_by(crate::baselines::OVERWRITE_DROP)
    }

    pub fn overwritten_by(&self, drop: f64) -> bool {
        match self {
            EditArtifacts::Sequential(r) => r.overwritten_by(drop),
            _ => false,
        }
    }
}

/// Applies `kind` to a copy of the session model.
pub fn edit_case(session: &EditSession, kind: EditorKind, instance: &KseInstance) -> Result<(ToyLM, EditArtifacts)> {
    let mut model = session.model.clone();
    let layers = &session.layers.layers;
    let cfg = &session.config;
    let single = std::slice::from_ref(instance);
    let artifacts = match kind {
        EditorKind::Setke => EditArtifacts::Set(apply_edit(
            &mut model,
            single,
            cfg,
            layers,
            &session.covariance,
            AssignmentMode::Hungarian,
        )?),
        EditorKind::Concat => {
            EditArtifacts::Set(concat_edit(&mut model, single, cfg, layers, &session.covariance)?)
        }
        EditorKind::SingleObject => EditArtifacts::Sequential(single_object_edit(
            &mut model,
            instance,
            cfg,
            layers,
            &session.covariance_prompts,
        )?),
        EditorKind::FtW => EditArtifacts::FineTune(ft_w_edit(&mut model, single, cfg, layers)?),
    };
    Ok((model, artifacts))
}

/// Probability pairs of every target against its paired object on the edit,
/// paraphrase and neighborhood prompts.
pub fn evaluate_case(model: &ToyLM, instance: &KseInstance) -> Result<CaseOutcome> {
    instance.validate()?;
    let encode_prompt = |s: &str| model.vocab.encode_prompt(s);
    let edit = encode_prompt(&instance.filled_edit_prompt())?;
    let paraphrases: Vec<Vec<u32>> = instance
        .filled_paraphrases()
        .iter()
        .map(|p| encode_prompt(p))
        .collect::<Result<_>>()?;
    let neighbors: Vec<(Vec<u32>, Vec<u32>)> = instance
        .neighborhood_prompts
        .iter()
        .map(|n| Ok((encode_prompt(&n.prompt)?, model.vocab.encode(&n.answer)?)))
        .collect::<Result<_>>()?;

    let mut queries: Vec<(Vec<u32>, Vec<u32>)> = Vec::new();
    for (t, o) in instance.targets.iter().zip(&instance.objects) {
        let t = model.vocab.encode(t)?;
        let o = model.vocab.encode(o)?;
        queries.push((edit.clone(), t.clone()));
        queries.push((edit.clone(), o.clone()));
        for p in &paraphrases {
            queries.push((p.clone(), t.clone()));
            queries.push((p.clone(), o.clone()));
        }
        for (p, a) in &neighbors {
            queries.push((p.clone(), t.clone()));
            queries.push((p.clone(), a.clone()));
        }
    }
    let batch: Vec<(&[u32], &[u32], &[Intervention])> = queries
        .iter()
        .map(|(p, c)| (p.as_slice(), c.as_slice(), &[][..]))
        .collect();
    let probs: Vec<f64> = model
        .batch_sequence_logprob(&batch, false)?
        .into_iter()
        .map(f64::exp)
        .collect();
    let mut it = probs.chunks(2).map(|c| ProbPair::new(c[0], c[1]));
    let mut objects = Vec::with_capacity(instance.targets.len());
    for _ in &instance.targets {
        let edit = it.next().expect("edit pair");
        let paraphrase = (0..paraphrases.len()).map(|_| it.next().expect("pair")).collect();
        let neighborhood = (0..neighbors.len()).map(|_| it.next().expect("pair")).collect();
        objects.push(ObjectOutcome {
            edit,
            paraphrase,
            neighborhood,
        });
    }
    Ok(CaseOutcome {
        case_id: instance.case_id.clone(),
        objects,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct EditorRun {
    pub editor: EditorKind,
    pub record: MetricsRecord,
    pub cases: Vec<CaseOutcome>,
    pub artifacts: Vec<EditArtifacts>,
}

impl EditorRun {
    pub fn overwritten_cases(&self) -> usize {
        self.artifacts.iter().filter(|a| a.overwritten()).count()
    }
}

/// Edits each instance independently from the session model and scores it.
pub fn run_editor(session: &EditSession, kind: EditorKind, instances: &[KseInstance]) -> Result<EditorRun> {
    let mut cases = Vec::with_capacity(instances.len());
    let mut artifacts = Vec::with_capacity(instances.len());
    for inst in instances {
        let (model, a) = edit_case(session, kind, inst)?;
        cases.push(evaluate_case(&model, inst)?);
        artifacts.push(a);
    }
    let record = evaluate_outcomes(&cases)?;
    tracing::info!(editor = %kind, es = record.es, gs = record.gs, ls = record.ls, "editor run");
    Ok(EditorRun {
        editor: kind,
        record,
        cases,
        artifacts,
    })
}

/// Scores the unedited session model on `instances`.
pub fn run_unedited(session: &EditSession, instances: &[KseInstance]) -> Result<MetricsRecord> {
    let cases = instances
        .iter()
        .map(|i| evaluate_case(&session.model, i))
        .collect::<Result<Vec<_>>>()?;
    evaluate_outcomes(&cases)
}

/// Distinct object counts present in `instances`, ascending.
pub fn overlap_counts(instances: &[KseInstance]) -> Vec<usize> {
    instances
        .iter()
        .map(|i| i.objects.len())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect()
}

/// Runs every editor on the instances with each requested object count and
/// returns one metric row per `(editor, N, metric)`.
///
/// `max_cases` caps the instances used per count, taken in file order.
pub fn sweep(
    session: &EditSession,
    editors: &[EditorKind],
    instances: &[KseInstance],
    counts: &[usize],
    max_cases: Option<usize>,
) -> Result<Vec<MetricRow>> {
    let mut rows = Vec::new();
    for &editor in editors {
        for &n in counts {
            let group: Vec<KseInstance> = instances
                .iter()
                .filter(|i| i.objects.len() == n)
                .take(max_cases.unwrap_or(usize::MAX))
                .cloned()
                .collect();
            if group.is_empty() {
                return Err(Error::Invalid(format!("no instances with {n} objects")));
            }
            let run = run_editor(session, editor, &group)?;
            rows.extend(metric_rows(editor.name(), n, &run.record));
        }
    }
    Ok(rows)
}
