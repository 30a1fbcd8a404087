use serde::{Deserialize, Serialize};

use super::MultiPropertyRecord;
use crate::exec::{self, ExecMode};
use crate::text::{normalize_value, simple_tokens};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ValueTag {
    /// The value occurs verbatim in the article.
    #[serde(rename = "EM")]
    ExactMatch,
    /// The value has to be inferred.
    #[serde(rename = "IN")]
    Inferable,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EmInTag {
    pub id: String,
    pub property: String,
    pub value: String,
    pub tag: ValueTag,
}

fn contains_run(hay: &[String], needle: &[String]) -> bool {
    !needle.is_empty() && hay.windows(needle.len()).any(|w| w == needle)
}

/// Tags every (property, value) pair: EM iff the normalised value's tokens
/// occur as a contiguous token run of the lowercased article.
pub fn tag_em_in(record: &MultiPropertyRecord) -> Vec<EmInTag> {
    let article = simple_tokens(&record.text.to_lowercase());
    let mut out = Vec::new();
    for (prop, values) in &record.properties {
        for v in values {
            let needle = simple_tokens(&normalize_value(v));
            let tag = if contains_run(&article, &needle) {
                ValueTag::ExactMatch
            } else {
                ValueTag::Inferable
            };
            out.push(EmInTag {
                id: record.id.clone(),
                property: prop.clone(),
                value: v.clone(),
                tag,
            });
        }
    }
    out
}

pub fn tag_records(mode: ExecMode, records: &[MultiPropertyRecord]) -> Vec<EmInTag> {
    exec::map_collect(mode, records, tag_em_in)
        .into_iter()
        .flatten()
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tag(text: &str, value: &str) -> ValueTag {
        let r = MultiPropertyRecord {
            id: "a".into(),
            text: text.into(),
            properties: [("p".to_string(), vec![value.to_string()])].into_iter().collect(),
        };
        tag_em_in(&r)[0].tag
    }

    #[test]
    fn explicit_and_inferable() {
        assert_eq!(tag("born in Paris", "Paris"), ValueTag::ExactMatch);
        assert_eq!(tag("born in Paris", "France"), ValueTag::Inferable);
        assert_eq!(tag("lives in New York now", "new york"), ValueTag::ExactMatch);
        assert_eq!(tag("He moved to Paris.", "paris"), ValueTag::ExactMatch);
    }

    #[test]
    fn no_partial_word_matches() {
        assert_eq!(tag("the Earth is round", "art"), ValueTag::Inferable);
        assert_eq!(tag("anything", "!!!"), ValueTag::Inferable);
    }

    #[test]
    fn every_pair_gets_exactly_one_tag() {
        let r = MultiPropertyRecord {
            id: "a".into(),
            text: "x y z".into(),
            properties: [
                ("p".to_string(), vec!["x".to_string(), "w".to_string()]),
                ("q".to_string(), vec!["y z".to_string()]),
            ]
            .into_iter()
            .collect(),
        };
        assert_eq!(tag_em_in(&r).len(), r.value_count());
        let json = serde_json::to_string(&tag_em_in(&r)[0]).unwrap();
        assert!(json.contains("\"tag\":\"EM\""), "{json}");
    }
}
