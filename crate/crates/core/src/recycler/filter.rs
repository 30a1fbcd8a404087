use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::MultiPropertyRecord;
use crate::text::normalize_value;

/// One annotator removal. Without `value` the whole property goes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilterEntry {
    pub id: String,
    pub property: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub value: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FilterReport {
    pub values_before: usize,
    pub values_removed: usize,
    pub values_removed_pct: f64,
    pub articles_before: usize,
    pub articles_dropped: usize,
    pub articles_dropped_pct: f64,
    /// Entries naming an article that is not in the split.
    pub unknown_articles: usize,
    /// Entries for a known article whose property/value was not found.
    pub unmatched: usize,
}

fn pct(part: usize, whole: usize) -> f64 {
    if whole == 0 {
        0.0
    } else {
        100.0 * part as f64 / whole as f64
    }
}

/// Removes annotator-rejected values or properties. Values are matched after
/// normalisation; articles left without properties are dropped.
pub fn apply_annotation_filter(
    records: &[MultiPropertyRecord],
    entries: &[FilterEntry],
) -> (Vec<MultiPropertyRecord>, FilterReport) {
    let known: BTreeSet<&str> = records.iter().map(|r| r.id.as_str()).collect();
    let mut by_article: BTreeMap<&str, Vec<&FilterEntry>> = BTreeMap::new();
    let mut report = FilterReport {
        values_before: records.iter().map(MultiPropertyRecord::value_count).sum(),
        articles_before: records.len(),
        ..FilterReport::default()
    };
    for e in entries {
        if known.contains(e.id.as_str()) {
            by_article.entry(e.id.as_str()).or_default().push(e);
        } else {
            report.unknown_articles += 1;
        }
    }
    let mut out = Vec::with_capacity(records.len());
    for r in records {
        let Some(es) = by_article.get(r.id.as_str()) else {
            out.push(r.clone());
            continue;
        };
        let mut rec = r.clone();
        for e in es {
            let Some(vals) = rec.properties.get_mut(&e.property) else {
                report.unmatched += 1;
                continue;
            };
            match &e.value {
                None => {
                    report.values_removed += vals.len();
                    rec.properties.remove(&e.property);
                }
                Some(v) => {
                    let target = normalize_value(v);
                    let before = vals.len();
                    vals.retain(|x| normalize_value(x) != target);
                    let removed = before - vals.len();
                    if removed == 0 {
                        report.unmatched += 1;
                    }
                    report.values_removed += removed;
                    if vals.is_empty() {
                        rec.properties.remove(&e.property);
                    }
                }
            }
        }
        if rec.properties.is_empty() {
            report.articles_dropped += 1;
        } else {
            out.push(rec);
        }
    }
    report.values_removed_pct = pct(report.values_removed, report.values_before);
    report.articles_dropped_pct = pct(report.articles_dropped, report.articles_before);
    (out, report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(id: &str, props: &[(&str, &[&str])]) -> MultiPropertyRecord {
        MultiPropertyRecord {
            id: id.into(),
            text: String::new(),
            properties: props
                .iter()
                .map(|(p, vs)| (p.to_string(), vs.iter().map(|v| v.to_string()).collect()))
                .collect(),
        }
    }

    fn entry(id: &str, p: &str, v: Option<&str>) -> FilterEntry {
        FilterEntry {
            id: id.into(),
            property: p.into(),
            value: v.map(str::to_string),
        }
    }

    #[test]
    fn empty_filter_is_identity() {
        let rs = vec![rec("a", &[("p", &["x"])])];
        let (out, rep) = apply_annotation_filter(&rs, &[]);
        assert_eq!(out, rs);
        assert_eq!(rep.values_removed, 0);
    }

    #[test]
    fn removing_every_property_drops_article() {
        let rs = vec![
            rec("a", &[("p", &["x"]), ("q", &["y", "z"])]),
            rec("b", &[("p", &["x"])]),
        ];
        let es = [
            entry("a", "p", None),
            entry("a", "q", Some("Y")),
            entry("a", "q", Some("z")),
        ];
        let (out, rep) = apply_annotation_filter(&rs, &es);
        assert_eq!(out.len(), 1);
        assert_eq!(rep.articles_dropped, 1);
        assert_eq!(rep.values_removed, 3);
    }

    #[test]
    fn percentage_of_removed_values() {
        // 100 values over 25 articles; remove 28 of them.
        let rs: Vec<_> = (0..25)
            .map(|i| rec(&format!("a{i}"), &[("p", &["v0", "v1", "v2", "v3"])]))
            .collect();
        let es: Vec<_> = (0..28)
            .map(|k| entry(&format!("a{}", k / 2), "p", Some(if k % 2 == 0 { "v0" } else { "v1" })))
            .collect();
        let (out, rep) = apply_annotation_filter(&rs, &es);
        assert_eq!(rep.values_before, 100);
        assert_eq!(rep.values_removed, 28);
        assert!((rep.values_removed_pct - 28.0).abs() < 1e-12);
        assert_eq!(out.len(), 25);
    }

    #[test]
    fn unknown_and_unmatched_are_counted() {
        let rs = vec![rec("a", &[("p", &["x"])])];
        let es = [
            entry("zz", "p", None),
            entry("a", "q", None),
            entry("a", "p", Some("nope")),
        ];
        let (out, rep) = apply_annotation_filter(&rs, &es);
        assert_eq!(out, rs);
        assert_eq!(rep.unknown_articles, 1);
        assert_eq!(rep.unmatched, 2);
    }
}
