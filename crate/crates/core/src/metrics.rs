// SPDX-License-Identifier: MIT OR Apache-2.0

//! Efficacy, generalization and locality scores with their aggregates.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Probabilities of the new object `o*` and the original object `o` under
/// one prompt.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbPair {
    pub new: f64,
    pub old: f64,
}

impl ProbPair {
    pub fn new(new: f64, old: f64) -> Self {
        Self { new, old }
    }

    /// `P[o*] > P[o]`; ties fail.
    pub fn new_wins(&self) -> bool {
        self.new > self.old
    }

    /// `P[o*] < P[o]`; ties fail.
    pub fn old_wins(&self) -> bool {
        self.new < self.old
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectOutcome {
    pub edit: ProbPair,
    pub paraphrase: Vec<ProbPair>,
    pub neighborhood: Vec<ProbPair>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaseOutcome {
    pub case_id: String,
    pub objects: Vec<ObjectOutcome>,
}

fn require<T>(items: &[T], what: &str) -> Result<()> {
    if items.is_empty() {
        Err(Error::Invalid(format!("{what} needs at least one case")))
    } else {
        Ok(())
    }
}

fn fraction(hits: usize, n: usize) -> f64 {
    100.0 * hits as f64 / n as f64
}

/// Percentage of edit-prompt pairs with `P[o*] > P[o]`.
pub fn efficacy(pairs: &[ProbPair]) -> Result<f64> {
    require(pairs, "efficacy")?;
    Ok(fraction(pairs.iter().filter(|p| p.new_wins()).count(), pairs.len()))
}

fn nested_mean(groups: &[Vec<ProbPair>], hit: fn(&ProbPair) -> bool, what: &str) -> Result<f64> {
    require(groups, what)?;
    let mut total = 0.0;
    let mut used = 0;
    for g in groups {
        if g.is_empty() {
            tracing::warn!("{what}: case without prompts excluded");
            continue;
        }
        total += g.iter().filter(|p| hit(p)).count() as f64 / g.len() as f64;
        used += 1;
    }
    if used == 0 {
        return Err(Error::Invalid(format!("{what}: no case has prompts")));
    }
    Ok(100.0 * total / used as f64)
}

/// Mean over cases of the per-case fraction of paraphrases with
/// `P[o*] > P[o]`.
pub fn generalization(groups: &[Vec<ProbPair>]) -> Result<f64> {
    nested_mean(groups, ProbPair::new_wins, "generalization")
}

/// Mean over cases of the per-case fraction of neighborhood prompts with
/// `P[o*] < P[o]`.
pub fn locality(groups: &[Vec<ProbPair>]) -> Result<f64> {
    nested_mean(groups, ProbPair::old_wins, "locality")
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Score {
    pub value: f64,
    /// Set when an input was zero and the harmonic mean is undefined.
    pub zero_input: bool,
}

/// Harmonic mean of the three metrics.
pub fn score(es: f64, gs: f64, ls: f64) -> Score {
    if es <= 0.0 || gs <= 0.0 || ls <= 0.0 {
        return Score {
            value: 0.0,
            zero_input: true,
        };
    }
    Score {
        value: 3.0 / (1.0 / es + 1.0 / gs + 1.0 / ls),
        zero_input: false,
    }
}

/// Arithmetic mean of per-object scores.
pub fn aggregate_set(scores: &[f64]) -> Result<f64> {
    if scores.is_empty() {
        return Err(Error::Invalid("aggregate_set needs at least one object".into()));
    }
    Ok(scores.iter().sum::<f64>() / scores.len() as f64)
}

/// Normal-approximation 95% half-width in percentage points.
pub fn ci95_from(p: f64, n: usize) -> f64 {
    if n == 0 {
        return 0.0;
    }
    1.96 * (p * (1.0 - p) / n as f64).sqrt() * 100.0
}

pub fn ci95(outcomes: &[bool]) -> f64 {
    if outcomes.is_empty() {
        return 0.0;
    }
    let p = outcomes.iter().filter(|&&b| b).count() as f64 / outcomes.len() as f64;
    ci95_from(p, outcomes.len())
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Ci95 {
    pub es: f64,
    pub gs: f64,
    pub ls: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub es: f64,
    pub gs: f64,
    pub ls: f64,
    pub score: f64,
    pub score_zero_input: bool,
    pub n_cases: usize,
    pub ci95: Ci95,
}

/// Per-case metrics averaged over objects, then over cases.
pub fn evaluate_outcomes(cases: &[CaseOutcome]) -> Result<MetricsRecord> {
    require(cases, "evaluation")?;
    let mut es = Vec::new();
    let mut gs = Vec::new();
    let mut ls = Vec::new();
    let (mut es_bin, mut gs_bin, mut ls_bin) = (Vec::new(), Vec::new(), Vec::new());
    for case in cases {
        if case.objects.is_empty() {
            return Err(Error::Invalid(format!("case {} has no objects", case.case_id)));
        }
        let mut e = Vec::new();
        let mut g = Vec::new();
        let mut l = Vec::new();
        for o in &case.objects {
            e.push(efficacy(std::slice::from_ref(&o.edit))?);
            es_bin.push(o.edit.new_wins());
            if !o.paraphrase.is_empty() {
                g.push(generalization(std::slice::from_ref(&o.paraphrase))?);
                gs_bin.extend(o.paraphrase.iter().map(ProbPair::new_wins));
            }
            if !o.neighborhood.is_empty() {
                l.push(locality(std::slice::from_ref(&o.neighborhood))?);
                ls_bin.extend(o.neighborhood.iter().map(ProbPair::old_wins));
            }
        }
        es.push(aggregate_set(&e)?);
        if !g.is_empty() {
            gs.push(aggregate_set(&g)?);
        }
        if !l.is_empty() {
            ls.push(aggregate_set(&l)?);
        }
    }
    let mean = |v: &[f64]| if v.is_empty() { 0.0 } else { v.iter().sum::<f64>() / v.len() as f64 };
    let (es_m, gs_m, ls_m) = (mean(&es), mean(&gs), mean(&ls));
    let s = score(es_m, gs_m, ls_m);
    Ok(MetricsRecord {
        es: es_m,
        gs: gs_m,
        ls: ls_m,
        score: s.value,
        score_zero_input: s.zero_input,
        n_cases: cases.len(),
        ci95: Ci95 {
            es: ci95(&es_bin),
            gs: ci95(&gs_bin),
            ls: ci95(&ls_bin),
        },
    })
}

/// One row of a metrics table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub editor: String,
    pub n: usize,
    pub metric: String,
    pub value: f64,
    pub ci95: f64,
}

/// Expands a record into `ES`, `GS`, `LS` and `Score` rows.
pub fn metric_rows(editor: &str, n: usize, rec: &MetricsRecord) -> Vec<MetricRow> {
    let row = |metric: &str, value: f64, ci: f64| MetricRow {
        editor: editor.to_string(),
        n,
        metric: metric.to_string(),
        value,
        ci95: ci,
    };
    vec![
        row("ES", rec.es, rec.ci95.es),
        row("GS", rec.gs, rec.ci95.gs),
        row("LS", rec.ls, rec.ci95.ls),
        row("Score", rec.score, 0.0),
    ]
}

pub fn write_metrics_csv(rows: &[MetricRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    for r in rows {
        w.serialize(r).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_metrics_csv(path: &Path) -> Result<Vec<MetricRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    r.deserialize()
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| csv_err(path, e))
}

pub fn write_metrics_json(rows: &[MetricRow], path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(rows)?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub(crate) fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::io(path, std::io::Error::other(e.to_string()))
}
