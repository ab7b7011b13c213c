// SPDX-License-Identifier: MIT OR Apache-2.0

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use super::editset::SUBJECT_SLOT;

/// A registered relation with offline prompt templates.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RelationInfo {
    pub id: &'static str,
    pub phrase: &'static str,
    /// Prefix templates with one `{}` subject slot; objects follow the prefix.
    pub templates: &'static [&'static str],
    /// Words marking a template as expressing this relation.
    pub keywords: &'static [&'static str],
    /// Category nouns used for the `"{subject} is a"` essence sentence.
    pub kinds: &'static [&'static str],
}

pub const RELATIONS: &[RelationInfo] = &[
    RelationInfo {
        id: "P37",
        phrase: "official language",
        templates: &[
            "{} speaks",
            "The people of {} speak",
            "In {} the language is",
            "Folk from {} talk in",
        ],
        keywords: &["speak", "language", "talk"],
        kinds: &["country", "kingdom", "republic"],
    },
    RelationInfo {
        id: "P30",
        phrase: "continent",
        templates: &[
            "{} is located in",
            "{} lies in",
            "The land of {} is part of",
            "You can find {} in",
        ],
        keywords: &["located", "lies", "part", "find", "continent"],
        kinds: &["state", "province", "territory"],
    },
    RelationInfo {
        id: "P1303",
        phrase: "instrument",
        templates: &[
            "{} plays",
            "The instruments of {} are",
            "On stage {} performs on",
            "{} is known for playing",
        ],
        keywords: &["play", "instrument", "perform"],
        kinds: &["musician", "singer", "composer"],
    },
    RelationInfo {
        id: "P136",
        phrase: "genre",
        templates: &[
            "{} works in the genre of",
            "The style of {} is",
            "{} is famous for",
            "Critics file {} under",
        ],
        keywords: &["genre", "style", "famous", "file"],
        kinds: &["writer", "painter", "director"],
    },
    RelationInfo {
        id: "P101",
        phrase: "field of work",
        templates: &[
            "{} researches",
            "The field of {} is",
            "{} spends years studying",
            "The work of {} concerns",
        ],
        keywords: &["research", "field", "study", "studying", "work"],
        kinds: &["scientist", "scholar", "engineer"],
    },
    RelationInfo {
        id: "P463",
        phrase: "member of",
        templates: &[
            "{} is a member of",
            "{} belongs to",
            "{} holds a seat in",
            "The alliances of {} include",
        ],
        keywords: &["member", "belong", "seat", "alliance"],
        kinds: &["nation", "league", "union"],
    },
];

pub fn relation(id: &str) -> Option<&'static RelationInfo> {
    RELATIONS.iter().find(|r| r.id == id)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TemplateRequest {
    pub instruction: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TemplateResponse {
    pub candidates: Vec<String>,
}

/// A text-generation backend proposing prompt templates.
pub trait TemplateClient {
    fn complete(&self, request: &TemplateRequest) -> Result<TemplateResponse, String>;
}

/// Minimum number of accepted client templates before falling back.
pub const MIN_TEMPLATES: usize = 3;
const MAX_TEMPLATE_WORDS: usize = 16;

pub fn instruction_for(relation: &RelationInfo) -> String {
    let examples = relation
        .templates
        .iter()
        .map(|t| format!("- {t}"))
        .collect::<Vec<_>>()
        .join("\n");
    format!(
        "Write 10 sentence prefixes expressing the relation \"{}\". \
         Mark the subject with {SUBJECT_SLOT} exactly once and end where the object would begin. \
         Imitate these examples:\n{examples}",
        relation.phrase
    )
}

/// Whether a candidate is a usable template for `relation`.
pub fn accept_template(relation: &RelationInfo, candidate: &str) -> bool {
    let c = candidate.trim();
    if c.is_empty() || c.matches(SUBJECT_SLOT).count() != 1 {
        return false;
    }
    if c.replacen(SUBJECT_SLOT, "", 1).contains(['{', '}']) {
        return false;
    }
    if c.split_whitespace().count() > MAX_TEMPLATE_WORDS {
        return false;
    }
    let lower = c.to_lowercase();
    relation.keywords.iter().any(|k| lower.contains(k))
}

/// Templates for `relation`, from `client` when it yields enough usable
/// candidates and from the offline table otherwise.
pub fn generate_prompt_templates(
    relation: &RelationInfo,
    client: Option<&dyn TemplateClient>,
) -> Vec<String> {
    let offline = || relation.templates.iter().map(|s| s.to_string()).collect();
    let Some(client) = client else {
        return offline();
    };
    let request = TemplateRequest {
        instruction: instruction_for(relation),
    };
    match client.complete(&request) {
        Ok(resp) => {
            let mut seen = HashSet::new();
            let accepted: Vec<String> = resp
                .candidates
                .iter()
                .map(|c| c.trim().to_string())
                .filter(|c| accept_template(relation, c) && seen.insert(c.clone()))
                .collect();
            let rejected = resp.candidates.len() - accepted.len();
            if rejected > 0 {
                tracing::info!(relation = relation.id, rejected, "filtered template candidates");
            }
            if accepted.len() >= MIN_TEMPLATES {
                accepted
            } else {
                tracing::warn!(relation = relation.id, "too few usable templates; using offline set");
                offline()
            }
        }
        Err(e) => {
            tracing::warn!(relation = relation.id, error = %e, "template client failed; using offline set");
            offline()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Fixed(Result<Vec<&'static str>, &'static str>);

    impl TemplateClient for Fixed {
        fn complete(&self, _: &TemplateRequest) -> Result<TemplateResponse, String> {
            self.0
                .clone()
                .map(|v| TemplateResponse {
                    candidates: v.into_iter().map(String::from).collect(),
                })
                .map_err(String::from)
        }
    }

    #[test]
    fn offline_templates_are_valid() {
        for r in RELATIONS {
            assert!(r.templates.len() >= MIN_TEMPLATES);
            for t in r.templates {
                assert!(accept_template(r, t), "{t}");
            }
        }
    }

    #[test]
    fn no_client_uses_offline() {
        let r = relation("P37").unwrap();
        assert_eq!(generate_prompt_templates(r, None).len(), r.templates.len());
    }

    #[test]
    fn client_failure_falls_back() {
        let r = relation("P30").unwrap();
        let c = Fixed(Err("timeout"));
        assert_eq!(generate_prompt_templates(r, Some(&c))[0], "{} is located in");
    }

    #[test]
    fn missing_slot_is_filtered() {
        let r = relation("P30").unwrap();
        assert!(!accept_template(r, "Paris is located in"));
        assert!(!accept_template(r, "{} is located in {}"));
    }
}
