// SPDX-License-Identifier: MIT OR Apache-2.0

use std::collections::HashSet;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::editset::{KseInstance, NeighborhoodPrompt, SUBJECT_SLOT};
use super::templates::{relation, RelationInfo};
use super::Triplet;
use crate::error::{Error, Result};

/// Separator placed between enumerated objects.
pub const OBJECT_SEPARATOR: &str = ",";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorpusSpec {
    pub n_subjects: usize,
    /// Relation ids from the registered table.
    pub relations: Vec<String>,
    /// Object counts cycled over subjects.
    pub profile: Vec<usize>,
    /// Distinct object names available per relation.
    pub object_pool: usize,
    pub neighbors_per_case: usize,
    /// Words per subject name, 1 or 2.
    pub subject_words: usize,
    pub seed: u64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        Self {
            n_subjects: 60,
            relations: ["P37", "P30", "P1303", "P136", "P101", "P463"]
                .map(String::from)
                .to_vec(),
            profile: vec![3],
            object_pool: 400,
            neighbors_per_case: 3,
            subject_words: 2,
            seed: 7,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Subject {
    pub name: String,
    pub relation: String,
    pub kind: String,
    pub objects: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticCorpus {
    pub subjects: Vec<Subject>,
    pub sentences: Vec<String>,
    pub facts: Vec<Triplet>,
    pub instances: Vec<KseInstance>,
}

impl SyntheticCorpus {
    /// `(edit prompt, objects)` pairs for checking recall.
    pub fn recall_probes(&self) -> Vec<(String, Vec<String>)> {
        self.subjects
            .iter()
            .map(|s| {
                let r = relation(&s.relation).expect("registered");
                (r.templates[0].replacen(SUBJECT_SLOT, &s.name, 1), s.objects.clone())
            })
            .collect()
    }

    pub fn subject(&self, name: &str) -> Option<&Subject> {
        self.subjects.iter().find(|s| s.name == name)
    }
}

/// `"{subject} is a"` essence prompt.
pub fn essence_prompt(subject: &str) -> String {
    format!("{subject} is a")
}

/// `"prefix o1 , o2 , … ."` fact sentence.
pub fn enumerate_objects(prefix: &str, objects: &[&str]) -> String {
    format!("{prefix} {} .", objects.join(&format!(" {OBJECT_SEPARATOR} ")))
}

const CONSONANTS: &[&str] = &[
    "b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z", "th", "sh",
];
const VOWELS: &[&str] = &["a", "e", "i", "o", "u", "ae", "io"];

struct NameGen {
    used: HashSet<String>,
}

impl NameGen {
    fn new(reserved: impl IntoIterator<Item = String>) -> Self {
        Self {
            used: reserved.into_iter().map(|s| s.to_lowercase()).collect(),
        }
    }

    fn fresh(&mut self, rng: &mut impl Rng, syllables: usize, capitalized: bool) -> String {
        loop {
            let mut s = String::new();
            for _ in 0..syllables {
                s.push_str(CONSONANTS.choose(rng).expect("non-empty"));
                s.push_str(VOWELS.choose(rng).expect("non-empty"));
            }
            if rng.random_bool(0.5) {
                s.push_str(["n", "r", "s", "l"].choose(rng).expect("non-empty"));
            }
            if self.used.insert(s.clone()) {
                if capitalized {
                    let mut c = s.chars();
                    let first = c.next().expect("non-empty").to_ascii_uppercase();
                    return std::iter::once(first).chain(c).collect();
                }
                return s;
            }
        }
    }
}

/// Builds a seeded fact corpus and one edit instance per subject.
///
/// Two-word subject names draw from shared given and family name pools, so
/// no single word identifies a subject.
/// Subject `i` holds relation `i mod R` and `profile[(i / R) mod P]`
/// objects, so a subject with `N > 1` contributes `N` RSO triplets. Objects
/// are unique per relation. The targets of an instance are the objects of
/// another subject with the same relation, pooled over several subjects when
/// no single one has enough, which keeps them disjoint from the current set.
pub fn generate_synthetic_corpus(spec: &CorpusSpec) -> Result<SyntheticCorpus> {
    if spec.n_subjects == 0 || spec.relations.is_empty() || spec.profile.is_empty() {
        return Err(Error::Invalid("corpus spec needs subjects, relations and a profile".into()));
    }
    if let Some(n) = spec.profile.iter().find(|&&n| n == 0 || n > 8) {
        return Err(Error::Invalid(format!("overlap count {n} outside 1..=8")));
    }
    let rels: Vec<&RelationInfo> = spec
        .relations
        .iter()
        .map(|id| relation(id).ok_or_else(|| Error::Invalid(format!("unregistered relation `{id}`"))))
        .collect::<Result<_>>()?;
    let mut rng = crate::rng::stream(spec.seed, "corpus");
    let reserved = rels
        .iter()
        .flat_map(|r| r.templates.iter().chain(r.kinds.iter()))
        .flat_map(|t| t.split_whitespace().map(String::from).collect::<Vec<_>>())
        .chain(["is".to_string(), "a".to_string()]);
    let mut names = NameGen::new(reserved);

    let mut full_names: Vec<String> = match spec.subject_words {
        1 => (0..spec.n_subjects).map(|_| names.fresh(&mut rng, 2, true)).collect(),
        2 => {
            let pool = (spec.n_subjects as f64).sqrt().ceil() as usize + 1;
            let given: Vec<String> = (0..pool).map(|_| names.fresh(&mut rng, 2, true)).collect();
            let family: Vec<String> = (0..pool).map(|_| names.fresh(&mut rng, 2, true)).collect();
            given
                .iter()
                .flat_map(|g| family.iter().map(move |f| format!("{g} {f}")))
                .collect()
        }
        n => return Err(Error::Invalid(format!("subject names need 1 or 2 words, got {n}"))),
    };
    full_names.shuffle(&mut rng);

    let mut used_per_relation = vec![0usize; rels.len()];
    let mut subjects = Vec::with_capacity(spec.n_subjects);
    for i in 0..spec.n_subjects {
        let ri = i % rels.len();
        let n = spec.profile[(i / rels.len()) % spec.profile.len()];
        used_per_relation[ri] += n;
        if used_per_relation[ri] > spec.object_pool {
            return Err(Error::Invalid(format!(
                "relation {} needs more than {} objects",
                rels[ri].id, spec.object_pool
            )));
        }
        let name = full_names[i].clone();
        let kind = rels[ri].kinds.choose(&mut rng).expect("non-empty").to_string();
        let objects = (0..n).map(|_| names.fresh(&mut rng, 2, false)).collect();
        subjects.push(Subject {
            name,
            relation: rels[ri].id.to_string(),
            kind,
            objects,
        });
    }

    let mut sentences = Vec::new();
    let mut facts = Vec::new();
    for s in &subjects {
        let r = relation(&s.relation).expect("registered");
        for t in r.templates {
            let prefix = t.replacen(SUBJECT_SLOT, &s.name, 1);
            for lead in 0..s.objects.len() {
                let mut rest: Vec<&str> = s
                    .objects
                    .iter()
                    .enumerate()
                    .filter(|(k, _)| *k != lead)
                    .map(|(_, o)| o.as_str())
                    .collect();
                rest.shuffle(&mut rng);
                let mut order = vec![s.objects[lead].as_str()];
                order.extend(rest);
                sentences.push(enumerate_objects(&prefix, &order));
            }
        }
        sentences.push(format!("{} {} .", essence_prompt(&s.name), s.kind));
        facts.extend(
            s.objects
                .iter()
                .map(|o| Triplet::new(&s.name, &s.relation, o)),
        );
    }

    let mut instances = Vec::with_capacity(subjects.len());
    for (i, s) in subjects.iter().enumerate() {
        let r = relation(&s.relation).expect("registered");
        let n = s.objects.len();
        let peers: Vec<usize> = (0..subjects.len())
            .filter(|&j| j != i && subjects[j].relation == s.relation)
            .collect();
        let same_n: Vec<usize> = peers
            .iter()
            .copied()
            .filter(|&j| subjects[j].objects.len() == n)
            .collect();
        let larger: Vec<usize> = peers
            .iter()
            .copied()
            .filter(|&j| subjects[j].objects.len() > n)
            .collect();
        let donors: Vec<usize> = match same_n.choose(&mut rng).or_else(|| larger.choose(&mut rng)) {
            Some(&d) => vec![d],
            None => peers.clone(),
        };
        let mut targets: Vec<String> = donors
            .iter()
            .flat_map(|&d| subjects[d].objects.iter().cloned())
            .collect();
        if targets.len() < n {
            return Err(Error::Invalid(format!(
                "relation {} has too few other objects to supply {n} targets for {}",
                s.relation, s.name
            )));
        }
        targets.shuffle(&mut rng);
        targets.truncate(n);

        let mut neighbors: Vec<usize> = peers.iter().copied().filter(|j| !donors.contains(j)).collect();
        neighbors.shuffle(&mut rng);
        neighbors.truncate(spec.neighbors_per_case);
        let neighborhood_prompts = neighbors
            .iter()
            .map(|&j| NeighborhoodPrompt {
                prompt: r.templates[0].replacen(SUBJECT_SLOT, &subjects[j].name, 1),
                answer: subjects[j].objects[0].clone(),
            })
            .collect();

        instances.push(KseInstance {
            case_id: format!("case-{i:04}"),
            subject: s.name.clone(),
            relation: s.relation.clone(),
            relation_phrase: r.phrase.to_string(),
            objects: s.objects.clone(),
            targets,
            edit_prompt: r.templates[0].to_string(),
            paraphrase_prompts: r.templates[1..].iter().map(|t| t.to_string()).collect(),
            neighborhood_prompts,
        });
    }

    Ok(SyntheticCorpus {
        subjects,
        sentences,
        facts,
        instances,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{classify_triplets, Keo};

    fn spec(profile: Vec<usize>, n: usize) -> CorpusSpec {
        CorpusSpec {
            n_subjects: n,
            relations: vec!["P37".into(), "P30".into()],
            profile,
            seed: 7,
            ..Default::default()
        }
    }

    #[test]
    fn profile_one_is_all_normal() {
        let c = generate_synthetic_corpus(&spec(vec![1], 24)).unwrap();
        let (_, report) = classify_triplets(&c.facts);
        assert_eq!(report.normal, report.total);
    }

    #[test]
    fn profile_three_gives_thirty_rso() {
        let c = generate_synthetic_corpus(&spec(vec![3], 10)).unwrap();
        let (_, report) = classify_triplets(&c.facts);
        assert_eq!(report.count(Keo::Rso), 30);
    }

    #[test]
    fn deterministic_under_seed() {
        let a = generate_synthetic_corpus(&spec(vec![1, 3], 20)).unwrap();
        let b = generate_synthetic_corpus(&spec(vec![1, 3], 20)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn instances_consistent_with_facts() {
        let c = generate_synthetic_corpus(&CorpusSpec { profile: vec![1, 3, 5, 8], n_subjects: 48, ..Default::default() }).unwrap();
        let facts: HashSet<_> = c.facts.iter().collect();
        for inst in &c.instances {
            inst.validate().unwrap();
            for t in inst.triplets() {
                assert!(facts.contains(&t));
            }
            assert!(inst.targets.iter().all(|t| !inst.objects.contains(t)));
            assert_eq!(inst.targets.len(), inst.objects.len());
        }
    }

    #[test]
    fn overlap_beyond_pool_is_rejected() {
        let mut s = spec(vec![8], 12);
        s.object_pool = 10;
        assert!(generate_synthetic_corpus(&s).is_err());
    }
}
