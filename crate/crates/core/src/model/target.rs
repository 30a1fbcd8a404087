//! Text form of decoder targets.
//!
//! Multi-property: `name = v1 | v2 <sep> name2 = v3`, properties in
//! lexicographic order, values sorted and deduplicated. Single-property:
//! `v1 | v2`. Words are separated by single spaces; a word equal to `=`, `|`
//! or `<sep>`, or starting with a backslash, is escaped with a leading
//! backslash. Whitespace inside names and values is collapsed.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::tokenize::SEP_TOKEN;

pub type PropertyMap = BTreeMap<String, Vec<String>>;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ParsedTarget {
    pub properties: PropertyMap,
    /// Segments that could not be read as `name = values`.
    pub malformed: usize,
}

fn reserved(w: &str) -> bool {
    w == "=" || w == "|" || w == SEP_TOKEN || w.starts_with('\\')
}

fn push_words(out: &mut Vec<String>, text: &str) {
    for w in text.split_whitespace() {
        if reserved(w) {
            out.push(format!("\\{w}"));
        } else {
            out.push(w.to_string());
        }
    }
}

fn canonical_values(values: &[String]) -> Vec<String> {
    let mut vs: Vec<String> = values
        .iter()
        .map(|v| v.split_whitespace().collect::<Vec<_>>().join(" "))
        .filter(|v| !v.is_empty())
        .collect();
    vs.sort();
    vs.dedup();
    vs
}

/// The map as it looks after a serialisation round trip.
pub fn canonicalize(map: &PropertyMap) -> PropertyMap {
    let mut out = PropertyMap::new();
    for (k, vs) in map {
        let key = k.split_whitespace().collect::<Vec<_>>().join(" ");
        if key.is_empty() {
            continue;
        }
        let entry: &mut Vec<String> = out.entry(key).or_default();
        entry.extend(canonical_values(vs));
        entry.sort();
        entry.dedup();
    }
    out
}

fn values_words(out: &mut Vec<String>, values: &[String]) {
    for (i, v) in canonical_values(values).iter().enumerate() {
        if i > 0 {
            out.push("|".into());
        }
        push_words(out, v);
    }
}

pub fn serialize_values(values: &[String]) -> String {
    let mut words = Vec::new();
    values_words(&mut words, values);
    words.join(" ")
}

pub fn serialize_target(map: &PropertyMap) -> String {
    let mut words = Vec::new();
    for (i, (k, vs)) in canonicalize(map).iter().enumerate() {
        if i > 0 {
            words.push(SEP_TOKEN.to_string());
        }
        push_words(&mut words, k);
        words.push("=".into());
        values_words(&mut words, vs);
    }
    words.join(" ")
}

/// Property names joined by the separator, in lexicographic order.
pub fn serialize_property_query<'a, I: IntoIterator<Item = &'a String>>(names: I) -> String {
    let mut names: Vec<&String> = names.into_iter().collect();
    names.sort();
    names.dedup();
    let mut words = Vec::new();
    for (i, k) in names.into_iter().enumerate() {
        if i > 0 {
            words.push(SEP_TOKEN.to_string());
        }
        push_words(&mut words, k);
    }
    words.join(" ")
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Word<'a> {
    Eq,
    Bar,
    Sep,
    Text(&'a str),
}

fn lex(s: &str) -> Vec<Word<'_>> {
    s.split_whitespace()
        .map(|w| match w {
            "=" => Word::Eq,
            "|" => Word::Bar,
            w if w == SEP_TOKEN => Word::Sep,
            w => Word::Text(w.strip_prefix('\\').unwrap_or(w)),
        })
        .collect()
}

fn read_values(words: &[Word<'_>]) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur: Vec<&str> = Vec::new();
    for w in words.iter().chain(std::iter::once(&Word::Bar)) {
        match w {
            Word::Text(t) => cur.push(t),
            Word::Bar => {
                if !cur.is_empty() {
                    out.push(cur.join(" "));
                }
                cur.clear();
            }
            // stray `=` inside a value list is dropped
            Word::Eq | Word::Sep => {}
        }
    }
    out.sort();
    out.dedup();
    out
}

pub fn parse_values(s: &str) -> Vec<String> {
    read_values(&lex(s))
}

/// Best-effort inverse of [`serialize_target`]. Segments without a name or
/// without `=` are skipped and counted as malformed.
pub fn parse_target(s: &str) -> ParsedTarget {
    let words = lex(s);
    let mut out = ParsedTarget::default();
    if words.is_empty() {
        return out;
    }
    for seg in words.split(|w| *w == Word::Sep) {
        let Some(eq) = seg.iter().position(|w| *w == Word::Eq) else {
            out.malformed += 1;
            continue;
        };
        let name: Vec<&str> = seg[..eq]
            .iter()
            .filter_map(|w| match w {
                Word::Text(t) => Some(*t),
                _ => None,
            })
            .collect();
        if name.is_empty() || name.len() != eq {
            out.malformed += 1;
            continue;
        }
        let entry = out.properties.entry(name.join(" ")).or_default();
        entry.extend(read_values(&seg[eq + 1..]));
        entry.sort();
        entry.dedup();
    }
    out
}
