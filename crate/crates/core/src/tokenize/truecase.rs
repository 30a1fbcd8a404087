use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::Result;

/// Frequency truecaser: every lowercased token is restored to its most
/// frequent cased form in the training corpus.
///
/// With `sentence_initial_fallback` set, the first token of a line only
/// contributes evidence for tokens never seen elsewhere, because sentence
/// starts are capitalised regardless of the word.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Truecaser {
    pub sentence_initial_fallback: bool,
    /// lowercased token → cased form.
    pub forms: BTreeMap<String, String>,
}

type Counts = BTreeMap<String, BTreeMap<String, u64>>;

fn majority(forms: &BTreeMap<String, u64>) -> Option<&String> {
    // BTreeMap iteration is sorted, so `max_by` keeps the first maximal key
    // only if we reverse the tie-break: prefer the lexicographically smallest.
    forms
        .iter()
        .max_by(|(fa, ca), (fb, cb)| ca.cmp(cb).then_with(|| fb.cmp(fa)))
        .map(|(f, _)| f)
}

impl Truecaser {
    pub fn train<I, S>(corpus: I, sentence_initial_fallback: bool) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut inner: Counts = BTreeMap::new();
        let mut initial: Counts = BTreeMap::new();
        for line in corpus {
            for (i, tok) in line.as_ref().split_whitespace().enumerate() {
                let key = tok.to_lowercase();
                let table = if i == 0 && sentence_initial_fallback {
                    &mut initial
                } else {
                    &mut inner
                };
                *table.entry(key).or_default().entry(tok.to_string()).or_default() += 1;
            }
        }
        let mut forms = BTreeMap::new();
        for (key, counts) in inner
            .iter()
            .chain(initial.iter().filter(|(k, _)| !inner.contains_key(*k)))
        {
            if let Some(f) = majority(counts) {
                if f != key {
                    forms.insert(key.clone(), f.clone());
                }
            }
        }
        Self {
            sentence_initial_fallback,
            forms,
        }
    }

    /// Recases each whitespace-separated token; whitespace is copied through.
    pub fn apply(&self, lowercased: &str) -> String {
        let mut out = String::with_capacity(lowercased.len());
        let mut tok = String::new();
        let flush = |tok: &mut String, out: &mut String| {
            if !tok.is_empty() {
                out.push_str(self.forms.get(tok.as_str()).unwrap_or(tok));
                tok.clear();
            }
        };
        for c in lowercased.chars() {
            if c.is_whitespace() {
                flush(&mut tok, &mut out);
                out.push(c);
            } else {
                tok.push(c);
            }
        }
        flush(&mut tok, &mut out);
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn restores_majority_case() {
        let tc = Truecaser::train(["Paris is big"], true);
        assert_eq!(tc.apply("paris is big"), "Paris is big");
    }

    #[test]
    fn inner_evidence_beats_sentence_start() {
        let tc = Truecaser::train(["The cat", "I saw the cat", "on the mat"], true);
        assert_eq!(tc.apply("the cat"), "the cat");
        let tc = Truecaser::train(["The cat", "I saw the cat", "on the mat"], false);
        assert_eq!(tc.apply("the"), "the");
    }

    #[test]
    fn lowercase_corpus_is_identity() {
        let tc = Truecaser::train(["all lower case here", "more of it"], true);
        assert!(tc.forms.is_empty());
        assert_eq!(tc.apply("all lower  case"), "all lower  case");
    }

    #[test]
    fn unknown_tokens_pass_through() {
        let tc = Truecaser::train(["Paris"], true);
        assert_eq!(tc.apply("london"), "london");
    }

    proptest! {
        #[test]
        fn preserves_token_count_and_lowercase(s in "[a-z ]{0,30}") {
            let tc = Truecaser::train(["Alpha Beta gamma", "the Beta band ALPHA", "NATO nato Nato"], true);
            let out = tc.apply(&s);
            prop_assert_eq!(out.split_whitespace().count(), s.split_whitespace().count());
            prop_assert_eq!(out.to_lowercase(), s);
        }
    }
}
