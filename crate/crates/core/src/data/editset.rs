// SPDX-License-Identifier: MIT OR Apache-2.0

use std::collections::HashSet;
use std::fs;
use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::Triplet;
use crate::error::{Error, Result};

/// Subject placeholder inside prompt templates.
pub const SUBJECT_SLOT: &str = "{}";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NeighborhoodPrompt {
    pub prompt: String,
    pub answer: String,
}

/// A set-valued edit request `(s, r, O) → (s, r, O*)` with its evaluation
/// prompts. `targets[j]` replaces `objects[j]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KseInstance {
    pub case_id: String,
    pub subject: String,
    pub relation: String,
    pub relation_phrase: String,
    pub objects: Vec<String>,
    pub targets: Vec<String>,
    pub edit_prompt: String,
    pub paraphrase_prompts: Vec<String>,
    pub neighborhood_prompts: Vec<NeighborhoodPrompt>,
}

fn has_one_slot(template: &str) -> bool {
    template.matches(SUBJECT_SLOT).count() == 1
}

fn check_unique(name: &str, items: &[String]) -> Result<()> {
    let mut seen = HashSet::new();
    for it in items {
        if it.trim().is_empty() {
            return Err(Error::Invalid(format!("{name} contains an empty string")));
        }
        if !seen.insert(it) {
            return Err(Error::Invalid(format!("{name} repeats `{it}`")));
        }
    }
    Ok(())
}

impl KseInstance {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("case_id", &self.case_id),
            ("subject", &self.subject),
            ("relation", &self.relation),
        ] {
            if v.trim().is_empty() {
                return Err(Error::Invalid(format!("{name} is empty")));
            }
        }
        if self.objects.is_empty() {
            return Err(Error::Invalid("objects is empty".into()));
        }
        if self.targets.is_empty() {
            return Err(Error::Invalid("targets is empty".into()));
        }
        if self.targets.len() > self.objects.len() {
            return Err(Error::Invalid(format!(
                "{} targets exceed {} objects",
                self.targets.len(),
                self.objects.len()
            )));
        }
        check_unique("objects", &self.objects)?;
        check_unique("targets", &self.targets)?;
        if !has_one_slot(&self.edit_prompt) {
            return Err(Error::Invalid("edit_prompt must contain exactly one `{}`".into()));
        }
        if let Some(p) = self.paraphrase_prompts.iter().find(|p| !has_one_slot(p)) {
            return Err(Error::Invalid(format!(
                "paraphrase prompt `{p}` must contain exactly one `{{}}`"
            )));
        }
        for n in &self.neighborhood_prompts {
            if n.prompt.trim().is_empty() || n.answer.trim().is_empty() {
                return Err(Error::Invalid("neighborhood prompt or answer is empty".into()));
            }
        }
        Ok(())
    }

    /// The edit prompt with the subject filled in.
    pub fn filled_edit_prompt(&self) -> String {
        self.edit_prompt.replacen(SUBJECT_SLOT, &self.subject, 1)
    }

    pub fn filled_paraphrases(&self) -> Vec<String> {
        self.paraphrase_prompts
            .iter()
            .map(|p| p.replacen(SUBJECT_SLOT, &self.subject, 1))
            .collect()
    }

    /// Current facts `(s, r, o)` for every object.
    pub fn triplets(&self) -> Vec<Triplet> {
        self.objects
            .iter()
            .map(|o| Triplet::new(&self.subject, &self.relation, o))
            .collect()
    }
}

/// Parses EditSet JSONL text, reporting the 1-based line of any bad record.
pub fn parse_editset(text: &str, path: &Path) -> Result<Vec<KseInstance>> {
    let mut out = Vec::new();
    let mut ids = HashSet::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let record = |message: String| Error::Record {
            path: path.to_path_buf(),
            line: i + 1,
            message,
        };
        let inst: KseInstance = serde_json::from_str(line).map_err(|e| record(e.to_string()))?;
        inst.validate().map_err(|e| record(e.to_string()))?;
        if !ids.insert(inst.case_id.clone()) {
            return Err(record(format!("duplicate case_id `{}`", inst.case_id)));
        }
        out.push(inst);
    }
    Ok(out)
}

pub fn read_editset(path: &Path) -> Result<Vec<KseInstance>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_editset(&text, path)
}

pub fn write_editset(instances: &[KseInstance], path: &Path) -> Result<()> {
    let mut ids = HashSet::new();
    for inst in instances {
        inst.validate()?;
        if !ids.insert(&inst.case_id) {
            return Err(Error::Invalid(format!("duplicate case_id `{}`", inst.case_id)));
        }
    }
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    for inst in instances {
        let line = serde_json::to_string(inst)?;
        writeln!(file, "{line}").map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> KseInstance {
        KseInstance {
            case_id: "c1".into(),
            subject: "Ottoman Empire".into(),
            relation: "P30".into(),
            relation_phrase: "continent".into(),
            objects: vec!["Asia".into(), "Europe".into()],
            targets: vec!["Africa".into(), "Oceania".into()],
            edit_prompt: "{} is located in".into(),
            paraphrase_prompts: vec!["The land of {} lies in".into()],
            neighborhood_prompts: vec![NeighborhoodPrompt {
                prompt: "Japan is located in".into(),
                answer: "Asia".into(),
            }],
        }
    }

    #[test]
    fn empty_file_is_empty_list() {
        assert!(parse_editset("", Path::new("x")).unwrap().is_empty());
    }

    #[test]
    fn rejects_invalid_records_with_line_numbers() {
        let mut bad = sample();
        bad.objects.clear();
        let text = format!(
            "{}\n{}\n",
            serde_json::to_string(&sample()).unwrap(),
            serde_json::to_string(&bad).unwrap()
        );
        match parse_editset(&text, Path::new("f.jsonl")) {
            Err(Error::Record { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn rejects_duplicate_ids_and_slots() {
        let line = serde_json::to_string(&sample()).unwrap();
        let text = format!("{line}\n{line}\n");
        assert!(parse_editset(&text, Path::new("f")).is_err());
        let mut two_slots = sample();
        two_slots.edit_prompt = "{} and {}".into();
        assert!(two_slots.validate().is_err());
        let mut dup = sample();
        dup.targets = vec!["Africa".into(), "Africa".into()];
        assert!(dup.validate().is_err());
    }

    #[test]
    fn round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("e.jsonl");
        write_editset(&[sample()], &path).unwrap();
        assert_eq!(read_editset(&path).unwrap(), vec![sample()]);
        assert_eq!(sample().filled_edit_prompt(), "Ottoman Empire is located in");
    }
}
