// SPDX-License-Identifier: MIT OR Apache-2.0

//! Triplets, overlap taxonomy, edit records and corpus generation.

pub mod corpus;
pub mod editset;
pub mod templates;

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use corpus::{generate_synthetic_corpus, CorpusSpec, SyntheticCorpus};
pub use editset::{read_editset, write_editset, KseInstance, NeighborhoodPrompt};
pub use templates::{
    generate_prompt_templates, RelationInfo, TemplateClient, TemplateRequest, TemplateResponse,
};

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Triplet {
    pub subject: String,
    pub relation: String,
    pub object: String,
}

impl Triplet {
    pub fn new(subject: &str, relation: &str, object: &str) -> Self {
        Self {
            subject: subject.into(),
            relation: relation.into(),
            object: object.into(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("subject", &self.subject),
            ("relation", &self.relation),
            ("object", &self.object),
        ] {
            if v.trim().is_empty() {
                return Err(Error::Invalid(format!("triplet has an empty {name}")));
            }
        }
        Ok(())
    }
}

/// Knowledge-element overlap category.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Keo {
    Normal,
    /// Same subject and relation, different object.
    Rso,
    /// Same relation and object, different subject.
    Roo,
    /// Same subject and object, different relation.
    Soo,
    /// Exact repeat of another triplet.
    Duplicate,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct OverlapReport {
    pub normal: usize,
    pub rso: usize,
    pub roo: usize,
    pub soo: usize,
    pub duplicate: usize,
    pub total: usize,
    /// `100 · normal / total`, or 0 for an empty list.
    pub normal_ratio: f64,
}

impl OverlapReport {
    pub fn count(&self, label: Keo) -> usize {
        match label {
            Keo::Normal => self.normal,
            Keo::Rso => self.rso,
            Keo::Roo => self.roo,
            Keo::Soo => self.soo,
            Keo::Duplicate => self.duplicate,
        }
    }
}

/// Labels every triplet with each overlap category it satisfies against the
/// rest of the list.
///
/// A triplet is `Normal` when no other triplet shares two or more of its
/// elements.
pub fn classify_triplets(triplets: &[Triplet]) -> (Vec<BTreeSet<Keo>>, OverlapReport) {
    fn tally<'a>(keys: impl Iterator<Item = (&'a str, &'a str)>) -> HashMap<(&'a str, &'a str), usize> {
        let mut m = HashMap::new();
        for k in keys {
            *m.entry(k).or_insert(0) += 1;
        }
        m
    }
    let sr = tally(triplets.iter().map(|t| (t.subject.as_str(), t.relation.as_str())));
    let ro = tally(triplets.iter().map(|t| (t.relation.as_str(), t.object.as_str())));
    let so = tally(triplets.iter().map(|t| (t.subject.as_str(), t.object.as_str())));
    let mut exact: HashMap<&Triplet, usize> = HashMap::new();
    for t in triplets {
        *exact.entry(t).or_insert(0) += 1;
    }

    let mut report = OverlapReport {
        total: triplets.len(),
        ..Default::default()
    };
    let labels: Vec<BTreeSet<Keo>> = triplets
        .iter()
        .map(|t| {
            let same = exact[t];
            let mut set = BTreeSet::new();
            if sr[&(t.subject.as_str(), t.relation.as_str())] > same {
                set.insert(Keo::Rso);
            }
            if ro[&(t.relation.as_str(), t.object.as_str())] > same {
                set.insert(Keo::Roo);
            }
            if so[&(t.subject.as_str(), t.object.as_str())] > same {
                set.insert(Keo::Soo);
            }
            if same > 1 {
                set.insert(Keo::Duplicate);
            }
            if set.is_empty() {
                set.insert(Keo::Normal);
            }
            for l in &set {
                match l {
                    Keo::Normal => report.normal += 1,
                    Keo::Rso => report.rso += 1,
                    Keo::Roo => report.roo += 1,
                    Keo::Soo => report.soo += 1,
                    Keo::Duplicate => report.duplicate += 1,
                }
            }
            set
        })
        .collect();
    if report.total > 0 {
        report.normal_ratio = 100.0 * report.normal as f64 / report.total as f64;
    }
    (labels, report)
}

/// Reads one JSON triplet per line, skipping blank lines.
pub fn read_triplets(path: &Path) -> Result<Vec<Triplet>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let record = |message: String| Error::Record {
            path: path.to_path_buf(),
            line: i + 1,
            message,
        };
        let t: Triplet = serde_json::from_str(line).map_err(|e| record(e.to_string()))?;
        t.validate().map_err(|e| record(e.to_string()))?;
        out.push(t);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn labels_of(ts: &[Triplet]) -> Vec<BTreeSet<Keo>> {
        classify_triplets(ts).0
    }

    #[test]
    fn same_subject_and_relation_is_rso() {
        let ts = [Triplet::new("A", "r1", "X"), Triplet::new("A", "r1", "Y")];
        for l in labels_of(&ts) {
            assert_eq!(l, BTreeSet::from([Keo::Rso]));
        }
    }

    #[test]
    fn single_shared_element_is_normal() {
        let ts = [Triplet::new("A", "r1", "X"), Triplet::new("B", "r2", "X")];
        let (labels, report) = classify_triplets(&ts);
        assert!(labels.iter().all(|l| l == &BTreeSet::from([Keo::Normal])));
        assert_eq!(report.normal, 2);
        assert_eq!(report.normal_ratio, 100.0);
    }

    #[test]
    fn duplicates_and_soo() {
        let ts = [
            Triplet::new("A", "r1", "X"),
            Triplet::new("A", "r1", "X"),
            Triplet::new("A", "r2", "X"),
        ];
        let labels = labels_of(&ts);
        assert_eq!(labels[0], BTreeSet::from([Keo::Soo, Keo::Duplicate]));
        assert_eq!(labels[2], BTreeSet::from([Keo::Soo]));
    }

    #[test]
    fn empty_input() {
        let (labels, report) = classify_triplets(&[]);
        assert!(labels.is_empty());
        assert_eq!(report, OverlapReport::default());
    }

    fn arb_triplets() -> impl Strategy<Value = Vec<Triplet>> {
        prop::collection::vec((0..4u8, 0..3u8, 0..4u8), 0..14).prop_map(|v| {
            v.into_iter()
                .map(|(s, r, o)| Triplet::new(&format!("s{s}"), &format!("r{r}"), &format!("o{o}")))
                .collect()
        })
    }

    /// Direct pairwise definition.
    fn pairwise(ts: &[Triplet]) -> Vec<BTreeSet<Keo>> {
        ts.iter()
            .enumerate()
            .map(|(i, a)| {
                let mut set = BTreeSet::new();
                for (j, b) in ts.iter().enumerate() {
                    if i == j {
                        continue;
                    }
                    let (s, r, o) = (a.subject == b.subject, a.relation == b.relation, a.object == b.object);
                    match (s, r, o) {
                        (true, true, true) => set.insert(Keo::Duplicate),
                        (true, true, false) => set.insert(Keo::Rso),
                        (false, true, true) => set.insert(Keo::Roo),
                        (true, false, true) => set.insert(Keo::Soo),
                        _ => false,
                    };
                }
                if set.is_empty() {
                    set.insert(Keo::Normal);
                }
                set
            })
            .collect()
    }

    proptest! {
        #[test]
        fn matches_pairwise_definition(ts in arb_triplets()) {
            prop_assert_eq!(labels_of(&ts), pairwise(&ts));
        }

        #[test]
        fn order_invariant(ts in arb_triplets(), seed in any::<u64>()) {
            use rand::seq::SliceRandom;
            let mut idx: Vec<usize> = (0..ts.len()).collect();
            idx.shuffle(&mut crate::rng::stream(seed, "perm"));
            let shuffled: Vec<Triplet> = idx.iter().map(|&i| ts[i].clone()).collect();
            let a = labels_of(&ts);
            let b = labels_of(&shuffled);
            for (k, &i) in idx.iter().enumerate() {
                prop_assert_eq!(&b[k], &a[i]);
            }
        }

        #[test]
        fn ratio_consistent(ts in arb_triplets()) {
            let (_, r) = classify_triplets(&ts);
            if r.total > 0 {
                prop_assert!((r.normal_ratio - 100.0 * r.normal as f64 / r.total as f64).abs() < 0.01);
            }
        }
    }
}
