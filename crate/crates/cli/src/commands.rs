// SPDX-License-Identifier: MIT OR Apache-2.0

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use clap::Args;
use serde::{Deserialize, Serialize};
use setke_core::attribution::{
    export_activations, export_heatmap, integrated_gradients, neuron_overlap,
    select_knowledge_neurons, AttributionMap, NeuronSet,
};
use setke_core::baselines::{concat_edit, ft_w_edit, single_object_edit};
use setke_core::data::{
    classify_triplets, generate_synthetic_corpus, read_editset, read_triplets, write_editset,
    KseInstance, Triplet,
};
use setke_core::editor::{apply_edit, AssignmentMode};
use setke_core::experiment::{
    evaluate_case, overlap_counts, run_editor, sweep, EditArtifacts, EditSession, EditorKind,
};
use setke_core::metrics::{
    evaluate_outcomes, metric_rows, read_metrics_csv, write_metrics_csv, write_metrics_json,
    MetricRow, MetricsRecord,
};
use setke_core::model::train::{fact_recall, train_toy};
use setke_core::model::{checkpoint, ToyLM};

use crate::config::RunConfig;
use crate::manifest::Manifest;

pub const MODEL_FILE: &str = "model.ckpt";
pub const CORPUS_FILE: &str = "corpus.txt";
pub const EDITSET_FILE: &str = "editset.jsonl";
pub const FACTS_FILE: &str = "facts.jsonl";
pub const METRICS_CSV: &str = "metrics.csv";
pub const METRICS_JSON: &str = "metrics.json";

fn create_out(out: &Path) -> Result<()> {
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

fn read_corpus(path: &Path) -> Result<Vec<String>> {
    let text =
        std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let lines: Vec<String> = text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(String::from)
        .collect();
    if lines.is_empty() {
        bail!("{} holds no sentences", path.display());
    }
    Ok(lines)
}

fn load_model(path: &Path) -> Result<ToyLM> {
    checkpoint::load(path).with_context(|| format!("loading {}", path.display()))
}

fn select_cases(instances: Vec<KseInstance>, cases: &[String]) -> Result<Vec<KseInstance>> {
    if cases.is_empty() {
        return Ok(instances);
    }
    cases
        .iter()
        .map(|id| {
            instances
                .iter()
                .find(|i| &i.case_id == id)
                .cloned()
                .ok_or_else(|| anyhow!("no case `{id}` in the edit set"))
        })
        .collect()
}

fn options<T: Serialize>(args: &T) -> Result<serde_json::Value> {
    Ok(serde_json::to_value(args)?)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainSummary {
    pub sentences: usize,
    pub subjects: usize,
    pub parameters: usize,
    pub recall: f64,
}

/// Generates the synthetic corpus, trains a model on it and writes the
/// checkpoint, corpus, facts and edit set.
pub fn cmd_train(cfg: &RunConfig, out: &Path) -> Result<TrainSummary> {
    create_out(out)?;
    let corpus = generate_synthetic_corpus(&cfg.corpus_spec())?;
    let model = train_toy(cfg.model_config(0), &corpus.sentences, &cfg.train)?;
    let recall = fact_recall(&model, &corpus.recall_probes())?;
    tracing::info!(recall, "trained");
    checkpoint::save(&model, &out.join(MODEL_FILE))?;
    std::fs::write(out.join(CORPUS_FILE), corpus.sentences.join("\n") + "\n")?;
    write_editset(&corpus.instances, &out.join(EDITSET_FILE))?;
    let facts: String = corpus
        .facts
        .iter()
        .map(|t| serde_json::to_string(t).map(|s| s + "\n"))
        .collect::<std::result::Result<_, _>>()?;
    std::fs::write(out.join(FACTS_FILE), facts)?;
    let summary = TrainSummary {
        sentences: corpus.sentences.len(),
        subjects: corpus.subjects.len(),
        parameters: model.weights.parameter_count(),
        recall,
    };
    write_json(&out.join("train.json"), &summary)?;
    let mut m = Manifest::new("train", serde_json::Value::Null, cfg, &[])?;
    m.outputs = [
        MODEL_FILE,
        CORPUS_FILE,
        EDITSET_FILE,
        FACTS_FILE,
        "train.json",
    ]
    .map(String::from)
    .to_vec();
    m.write(out)?;
    Ok(summary)
}

#[derive(Clone, Debug, Default, Args, Serialize, Deserialize)]
pub struct ClassifyArgs {
    /// JSON-lines file of `{subject, relation, object}` triplets.
    #[arg(long, conflicts_with = "editset")]
    pub triplets: Option<PathBuf>,
    /// Edit set whose current objects are classified.
    #[arg(long)]
    pub editset: Option<PathBuf>,
}

#[derive(Serialize)]
struct LabelledTriplet<'a> {
    #[serde(flatten)]
    triplet: &'a Triplet,
    labels: Vec<String>,
}

pub fn cmd_classify(
    cfg: &RunConfig,
    args: &ClassifyArgs,
    out: &Path,
) -> Result<setke_core::data::OverlapReport> {
    let (path, triplets) = match (&args.triplets, &args.editset) {
        (Some(p), None) => (p, read_triplets(p)?),
        (None, Some(p)) => (
            p,
            read_editset(p)?
                .iter()
                .flat_map(KseInstance::triplets)
                .collect(),
        ),
        _ => bail!("classify needs exactly one of --triplets or --editset"),
    };
    create_out(out)?;
    let (labels, report) = classify_triplets(&triplets);
    write_json(&out.join("overlap.json"), &report)?;
    let mut text = String::new();
    for (t, l) in triplets.iter().zip(&labels) {
        let row = LabelledTriplet {
            triplet: t,
            labels: l.iter().map(|k| format!("{k:?}")).collect(),
        };
        text.push_str(&serde_json::to_string(&row)?);
        text.push('\n');
    }
    std::fs::write(out.join("labels.jsonl"), text)?;
    let mut m = Manifest::new("classify", options(args)?, cfg, &[path])?;
    m.outputs = vec!["overlap.json".into(), "labels.jsonl".into()];
    m.write(out)?;
    Ok(report)
}

#[derive(Clone, Debug, Args, Serialize, Deserialize)]
pub struct EditArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub editset: PathBuf,
    /// Sentences sampled for the key covariance.
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long, default_value = "setke")]
    pub editor: EditorKind,
    /// Case ids to edit; all cases when omitted.
    #[arg(long = "case")]
    pub cases: Vec<String>,
}

/// Applies one editor to the selected cases, all into the same model.
///
/// Set editors and fine-tuning take the cases as one batch; the
/// sequential baseline walks them in order.
pub fn cmd_edit(cfg: &RunConfig, args: &EditArgs, out: &Path) -> Result<MetricsRecord> {
    let model = load_model(&args.model)?;
    let instances = select_cases(read_editset(&args.editset)?, &args.cases)?;
    if instances.is_empty() {
        bail!("edit set is empty");
    }
    let corpus = read_corpus(&args.corpus)?;
    create_out(out)?;
    let session = EditSession::prepare(model, cfg.editor_config(), &corpus, &instances)?;
    let mut edited = session.model.clone();
    let layers = &session.layers.layers;
    let ecfg = &session.config;
    let artifacts: Vec<EditArtifacts> = match args.editor {
        EditorKind::Setke => vec![EditArtifacts::Set(apply_edit(
            &mut edited,
            &instances,
            ecfg,
            layers,
            &session.covariance,
            AssignmentMode::Hungarian,
        )?)],
        EditorKind::Concat => vec![EditArtifacts::Set(concat_edit(
            &mut edited,
            &instances,
            ecfg,
            layers,
            &session.covariance,
        )?)],
        EditorKind::SingleObject => instances
            .iter()
            .map(|i| {
                single_object_edit(&mut edited, i, ecfg, layers, &session.covariance_prompts)
                    .map(EditArtifacts::Sequential)
            })
            .collect::<setke_core::Result<_>>()?,
        EditorKind::FtW => vec![EditArtifacts::FineTune(ft_w_edit(
            &mut edited,
            &instances,
            ecfg,
            layers,
        )?)],
    };
    let cases = instances
        .iter()
        .map(|i| evaluate_case(&edited, i))
        .collect::<setke_core::Result<Vec<_>>>()?;
    let record = evaluate_outcomes(&cases)?;
    checkpoint::save(&edited, &out.join("edited.ckpt"))?;
    write_json(
        &out.join("edit.json"),
        &serde_json::json!({
            "editor": args.editor,
            "layers": session.layers,
            "artifacts": artifacts,
        }),
    )?;
    write_json(&out.join(METRICS_JSON), &record)?;
    let mut m = Manifest::new(
        "edit",
        options(args)?,
        cfg,
        &[&args.model, &args.editset, &args.corpus],
    )?;
    m.outputs = vec![
        "edited.ckpt".into(),
        "edit.json".into(),
        METRICS_JSON.into(),
    ];
    m.write(out)?;
    Ok(record)
}

#[derive(Clone, Debug, Args, Serialize, Deserialize)]
pub struct EvalArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub editset: PathBuf,
    /// Needed by every editor except `none`.
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// Editor applied to each case independently, or `none`.
    #[arg(long, default_value = "none")]
    pub editor: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalOutput {
    pub editor: String,
    pub overall: MetricsRecord,
    pub by_count: BTreeMap<usize, MetricsRecord>,
}

/// Scores the model on every case, editing each case from the base model
/// first unless the editor is `none`.
pub fn cmd_eval(cfg: &RunConfig, args: &EvalArgs, out: &Path) -> Result<EvalOutput> {
    let model = load_model(&args.model)?;
    let instances = read_editset(&args.editset)?;
    if instances.is_empty() {
        bail!("edit set is empty");
    }
    let editor = match args.editor.as_str() {
        "none" => None,
        s => Some(s.parse::<EditorKind>()?),
    };
    create_out(out)?;
    let mut inputs: Vec<&Path> = vec![&args.model, &args.editset];
    let cases = match editor {
        None => instances
            .iter()
            .map(|i| evaluate_case(&model, i))
            .collect::<setke_core::Result<Vec<_>>>()?,
        Some(kind) => {
            let corpus_path = args
                .corpus
                .as_deref()
                .ok_or_else(|| anyhow!("--corpus is required to run an editor"))?;
            inputs.push(corpus_path);
            let corpus = read_corpus(corpus_path)?;
            let session = EditSession::prepare(model, cfg.editor_config(), &corpus, &instances)?;
            run_editor(&session, kind, &instances)?.cases
        }
    };
    let overall = evaluate_outcomes(&cases)?;
    let mut by_count = BTreeMap::new();
    let mut rows = Vec::new();
    for n in overlap_counts(&instances) {
        let group: Vec<_> = cases
            .iter()
            .zip(&instances)
            .filter(|(_, i)| i.objects.len() == n)
            .map(|(c, _)| c.clone())
            .collect();
        let rec = evaluate_outcomes(&group)?;
        rows.extend(metric_rows(&args.editor, n, &rec));
        by_count.insert(n, rec);
    }
    write_metrics_csv(&rows, &out.join(METRICS_CSV))?;
    let output = EvalOutput {
        editor: args.editor.clone(),
        overall,
        by_count,
    };
    write_json(&out.join(METRICS_JSON), &output)?;
    write_json(&out.join("cases.json"), &cases)?;
    let mut m = Manifest::new("eval", options(args)?, cfg, &inputs)?;
    m.outputs = vec![METRICS_CSV.into(), METRICS_JSON.into(), "cases.json".into()];
    m.write(out)?;
    Ok(output)
}

#[derive(Clone, Debug, Args, Serialize, Deserialize)]
pub struct SweepArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub editset: PathBuf,
    #[arg(long)]
    pub corpus: PathBuf,
    /// Overrides `sweep.editors`.
    #[arg(long, value_delimiter = ',')]
    pub editors: Vec<EditorKind>,
    /// Overrides `sweep.counts`.
    #[arg(long, value_delimiter = ',')]
    pub counts: Vec<usize>,
    /// Overrides `sweep.max_cases`.
    #[arg(long)]
    pub max_cases: Option<usize>,
}

/// Runs every editor at every object count and writes one row per
/// `(editor, N, metric)`.
pub fn cmd_sweep(cfg: &RunConfig, args: &SweepArgs, out: &Path) -> Result<Vec<MetricRow>> {
    let model = load_model(&args.model)?;
    let instances = read_editset(&args.editset)?;
    let corpus = read_corpus(&args.corpus)?;
    let editors = if args.editors.is_empty() {
        &cfg.sweep.editors
    } else {
        &args.editors
    };
    let mut counts = if args.counts.is_empty() {
        cfg.sweep.counts.clone()
    } else {
        args.counts.clone()
    };
    if counts.is_empty() {
        counts = overlap_counts(&instances);
    }
    let max_cases = args.max_cases.unwrap_or(cfg.sweep.max_cases);
    create_out(out)?;
    let session = EditSession::prepare(model, cfg.editor_config(), &corpus, &instances)?;
    let rows = sweep(
        &session,
        editors,
        &instances,
        &counts,
        (max_cases > 0).then_some(max_cases),
    )?;
    write_metrics_csv(&rows, &out.join(METRICS_CSV))?;
    write_metrics_json(&rows, &out.join(METRICS_JSON))?;
    let mut m = Manifest::new(
        "sweep",
        options(args)?,
        cfg,
        &[&args.model, &args.editset, &args.corpus],
    )?;
    m.outputs = vec![METRICS_CSV.into(), METRICS_JSON.into()];
    m.write(out)?;
    Ok(rows)
}

#[derive(Clone, Debug, Args, Serialize, Deserialize)]
pub struct AttributeArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Prompt to attribute; use with `--target`.
    #[arg(long, requires = "target", conflicts_with = "editset")]
    pub prompt: Option<String>,
    #[arg(long)]
    pub target: Option<String>,
    /// Attribute every current object of one case; use with `--case`.
    #[arg(long, requires = "case")]
    pub editset: Option<PathBuf>,
    #[arg(long)]
    pub case: Option<String>,
    /// Overrides `attribution.steps`.
    #[arg(long)]
    pub steps: Option<usize>,
    /// Overrides `attribution.threshold`.
    #[arg(long)]
    pub threshold: Option<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AttributionSummary {
    pub prompt: String,
    pub target: String,
    pub target_prob: f64,
    pub completeness_gap: f64,
    pub neurons: NeuronSet,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AttributeOutput {
    pub steps: usize,
    pub threshold: f64,
    pub facts: Vec<AttributionSummary>,
    /// Jaccard index of the neuron sets of facts `i` and `j`.
    pub overlap: Vec<Vec<f64>>,
}

/// Integrated-gradients maps and knowledge neurons for one fact, or for
/// every object of one edit-set case.
pub fn cmd_attribute(cfg: &RunConfig, args: &AttributeArgs, out: &Path) -> Result<AttributeOutput> {
    let model = load_model(&args.model)?;
    let steps = args.steps.unwrap_or(cfg.attribution.steps);
    let threshold = args.threshold.unwrap_or(cfg.attribution.threshold);
    let mut inputs: Vec<&Path> = vec![&args.model];
    let facts: Vec<(String, String)> = match (&args.prompt, &args.target, &args.editset, &args.case)
    {
        (Some(p), Some(t), None, _) => vec![(p.clone(), t.clone())],
        (None, None, Some(path), Some(id)) => {
            inputs.push(path);
            let inst = select_cases(read_editset(path)?, std::slice::from_ref(id))?.remove(0);
            let prompt = inst.filled_edit_prompt();
            inst.objects
                .iter()
                .map(|o| (prompt.clone(), o.clone()))
                .collect()
        }
        _ => bail!("attribute needs --prompt with --target, or --editset with --case"),
    };
    create_out(out)?;
    let mut outputs = Vec::new();
    let mut maps: Vec<AttributionMap> = Vec::new();
    let mut summaries = Vec::new();
    for (k, (prompt, target)) in facts.iter().enumerate() {
        let map = integrated_gradients(&model, prompt, target, steps)?;
        let neurons = select_knowledge_neurons(&map, threshold)?;
        let suffix = if facts.len() == 1 {
            String::new()
        } else {
            format!("_{k}")
        };
        let heat = format!("heatmap{suffix}.csv");
        let acts = format!("activations{suffix}.csv");
        let ns = format!("neurons{suffix}.json");
        export_heatmap(&map, &out.join(&heat))?;
        export_activations(&map, &out.join(&acts))?;
        std::fs::write(out.join(&ns), neurons.to_json()? + "\n")?;
        outputs.extend([heat, acts, ns]);
        summaries.push(AttributionSummary {
            prompt: prompt.clone(),
            target: target.clone(),
            target_prob: map.target_prob,
            completeness_gap: map.completeness_gap(),
            neurons,
        });
        maps.push(map);
    }
    let overlap = summaries
        .iter()
        .map(|a| {
            summaries
                .iter()
                .map(|b| neuron_overlap(&a.neurons, &b.neurons))
                .collect()
        })
        .collect();
    let output = AttributeOutput {
        steps,
        threshold,
        facts: summaries,
        overlap,
    };
    write_json(&out.join("attribution.json"), &output)?;
    outputs.push("attribution.json".into());
    let mut m = Manifest::new("attribute", options(args)?, cfg, &inputs)?;
    m.outputs = outputs;
    m.write(out)?;
    Ok(output)
}

#[derive(Clone, Debug, Args, Serialize, Deserialize)]
pub struct ReportArgs {
    /// Metric CSV files from `sweep` or `eval`.
    #[arg(long, required = true, num_args = 1..)]
    pub metrics: Vec<PathBuf>,
    /// Object count shown in the comparison table; the largest present
    /// count shared by all editors when omitted.
    #[arg(long)]
    pub n: Option<usize>,
}

fn lookup(rows: &[MetricRow], editor: &str, n: usize, metric: &str) -> Option<f64> {
    rows.iter()
        .find(|r| r.editor == editor && r.n == n && r.metric == metric)
        .map(|r| r.value)
}

/// Renders a comparison table at one object count and an efficacy-by-count
/// table, as Markdown and CSV.
pub fn cmd_report(cfg: &RunConfig, args: &ReportArgs, out: &Path) -> Result<String> {
    let mut rows = Vec::new();
    for p in &args.metrics {
        rows.extend(read_metrics_csv(p)?);
    }
    if rows.is_empty() {
        bail!("no metric rows to report");
    }
    let mut editors: Vec<String> = Vec::new();
    for r in &rows {
        if !editors.contains(&r.editor) {
            editors.push(r.editor.clone());
        }
    }
    let counts: BTreeSet<usize> = rows.iter().map(|r| r.n).collect();
    let shared = counts
        .iter()
        .rev()
        .copied()
        .find(|&n| editors.iter().all(|e| lookup(&rows, e, n, "ES").is_some()));
    let n = match args.n.or(shared) {
        Some(n) => n,
        None => bail!("no object count is shared by all editors"),
    };
    create_out(out)?;

    let metrics = ["ES", "GS", "LS", "Score"];
    let cell = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{v:.2}"));
    let mut md = format!(
        "## Editors at N = {n}\n\n| editor | ES | GS | LS | Score |\n|---|---|---|---|---|\n"
    );
    let mut table = String::from("editor,ES,GS,LS,Score\n");
    for e in &editors {
        let vals: Vec<Option<f64>> = metrics.iter().map(|m| lookup(&rows, e, n, m)).collect();
        writeln!(
            md,
            "| {e} | {} |",
            vals.iter()
                .map(|v| cell(*v))
                .collect::<Vec<_>>()
                .join(" | ")
        )?;
        writeln!(
            table,
            "{e},{}",
            vals.iter()
                .map(|v| v.map_or(String::new(), |v| v.to_string()))
                .collect::<Vec<_>>()
                .join(",")
        )?;
    }
    let counts: Vec<usize> = counts.into_iter().collect();
    write!(md, "\n## Efficacy by object count\n\n| editor |")?;
    for c in &counts {
        write!(md, " N={c} |")?;
    }
    writeln!(md, "\n|---|{}", "---|".repeat(counts.len()))?;
    let mut curve = String::from("editor,n,ES\n");
    for e in &editors {
        write!(md, "| {e} |")?;
        for &c in &counts {
            let v = lookup(&rows, e, c, "ES");
            write!(md, " {} |", cell(v))?;
            if let Some(v) = v {
                writeln!(curve, "{e},{c},{v}")?;
            }
        }
        md.push('\n');
    }
    std::fs::write(out.join("report.md"), &md)?;
    std::fs::write(out.join("table.csv"), table)?;
    std::fs::write(out.join("efficacy_by_n.csv"), curve)?;
    let inputs: Vec<&Path> = args.metrics.iter().map(PathBuf::as_path).collect();
    let mut m = Manifest::new("report", options(args)?, cfg, &inputs)?;
    m.outputs = vec![
        "report.md".into(),
        "table.csv".into(),
        "efficacy_by_n.csv".into(),
    ];
    m.write(out)?;
    Ok(md)
}
