//! Answer-level F1 metrics over property → value-list predictions.
//!
//! All string comparisons go through [`normalize_value`]. Per-article and
//! per-pair scores are computed independently (optionally in parallel) and
//! reduced with [`pairwise_sum`] in gold order, so every score is
//! bit-for-bit reproducible across execution modes.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::{self, pairwise_sum, ExecMode};
use crate::recycler::{EmInTag, MultiPropertyRecord, ValueTag};
use crate::text::normalize_value;

/// Model output for one article: predicted values per queried property.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub id: String,
    pub properties: BTreeMap<String, Vec<String>>,
}

/// Expected values for one article. Its key set is the set of queried properties.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GoldRecord {
    pub id: String,
    pub properties: BTreeMap<String, Vec<String>>,
}

impl From<&MultiPropertyRecord> for GoldRecord {
    fn from(r: &MultiPropertyRecord) -> Self {
        Self {
            id: r.id.clone(),
            properties: r.properties.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub mean_f1: f64,
    pub mean_multilabel_f1: f64,
    pub per_label: BTreeMap<String, f64>,
    pub em_recall: Option<f64>,
    pub in_recall: Option<f64>,
    pub articles: usize,
    pub pairs: usize,
    pub em_values: usize,
    pub in_values: usize,
}

fn norm_set(values: &[String]) -> BTreeSet<String> {
    values.iter().map(|v| normalize_value(v)).collect()
}

/// Set F1 between normalised value sets. Both empty scores 1.
pub fn set_f1_sets(pred: &BTreeSet<String>, gold: &BTreeSet<String>) -> f64 {
    if pred.is_empty() && gold.is_empty() {
        return 1.0;
    }
    let hit = pred.intersection(gold).count();
    if hit == 0 {
        return 0.0;
    }
    let p = hit as f64 / pred.len() as f64;
    let r = hit as f64 / gold.len() as f64;
    2.0 * p * r / (p + r)
}

pub fn set_f1(pred: &[String], gold: &[String]) -> f64 {
    set_f1_sets(&norm_set(pred), &norm_set(gold))
}

/// Unweighted mean of per-instance set F1.
pub fn mean_f1(pairs: &[(Vec<String>, Vec<String>)]) -> Result<f64> {
    mean_f1_with(ExecMode::default(), pairs)
}

pub fn mean_f1_with(mode: ExecMode, pairs: &[(Vec<String>, Vec<String>)]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::Data("mean_f1 over zero instances".into()));
    }
    let scores = exec::map_collect(mode, pairs, |(p, g)| set_f1(p, g));
    Ok(pairwise_sum(&scores) / pairs.len() as f64)
}

/// (key, predicted values, gold values) for every queried key of one article.
struct Aligned<'a> {
    rows: Vec<(&'a str, &'a [String], &'a [String])>,
}

const NO_VALUES: &[String] = &[];

fn align<'a>(preds: &'a [Prediction], golds: &'a [GoldRecord]) -> Result<Vec<Aligned<'a>>> {
    let gold_ids: HashMap<&str, &GoldRecord> = golds.iter().map(|g| (g.id.as_str(), g)).collect();
    if gold_ids.len() != golds.len() {
        return Err(Error::Data("duplicate article id in gold records".into()));
    }
    let mut by_id: HashMap<&str, &Prediction> = HashMap::with_capacity(preds.len());
    for p in preds {
        let Some(g) = gold_ids.get(p.id.as_str()) else {
            return Err(Error::Data(format!("prediction for unknown article {:?}", p.id)));
        };
        if let Some(k) = p.properties.keys().find(|k| !g.properties.contains_key(*k)) {
            return Err(Error::Data(format!(
                "prediction for article {:?} has unqueried property {k:?}",
                p.id
            )));
        }
        if by_id.insert(p.id.as_str(), p).is_some() {
            return Err(Error::Data(format!("duplicate prediction for article {:?}", p.id)));
        }
    }
    golds
        .iter()
        .map(|g| {
            if g.properties.is_empty() {
                return Err(Error::Data(format!("gold article {:?} has no properties", g.id)));
            }
            let pred = by_id.get(g.id.as_str());
            let rows = g
                .properties
                .iter()
                .map(|(k, gv)| {
                    let pv = pred.and_then(|p| p.properties.get(k)).map_or(NO_VALUES, Vec::as_slice);
                    (k.as_str(), pv, gv.as_slice())
                })
                .collect();
            Ok(Aligned { rows })
        })
        .collect()
}

/// Per article: mean set F1 over its gold keys (an unpredicted key scores as
/// an empty prediction); then the mean over articles.
pub fn mean_multilabel_f1(preds: &[Prediction], golds: &[GoldRecord]) -> Result<f64> {
    mean_multilabel_f1_with(ExecMode::default(), preds, golds)
}

pub fn mean_multilabel_f1_with(mode: ExecMode, preds: &[Prediction], golds: &[GoldRecord]) -> Result<f64> {
    if golds.is_empty() {
        return Err(Error::Data("mean_multilabel_f1 over zero articles".into()));
    }
    let aligned = align(preds, golds)?;
    let per_article = exec::map_collect(mode, &aligned, |a| {
        let f: Vec<f64> = a.rows.iter().map(|(_, p, g)| set_f1(p, g)).collect();
        pairwise_sum(&f) / f.len() as f64
    });
    Ok(pairwise_sum(&per_article) / golds.len() as f64)
}

/// Mean set F1 for one property over the articles that carry it.
pub fn per_label_f1(preds: &[Prediction], golds: &[GoldRecord], key: &str) -> Result<f64> {
    let aligned = align(preds, golds)?;
    let scores: Vec<f64> = aligned
        .iter()
        .flat_map(|a| a.rows.iter().filter(|(k, _, _)| *k == key))
        .map(|(_, p, g)| set_f1(p, g))
        .collect();
    if scores.is_empty() {
        return Err(Error::Data(format!("property {key:?} occurs in no gold record")));
    }
    Ok(pairwise_sum(&scores) / scores.len() as f64)
}

fn tag_index(tags: &[EmInTag]) -> HashMap<(&str, &str, String), ValueTag> {
    tags.iter()
        .map(|t| ((t.id.as_str(), t.property.as_str(), normalize_value(&t.value)), t.tag))
        .collect()
}

/// Share of gold values tagged `which` that appear among the predictions of
/// the same (article, property).
pub fn subset_recall(preds: &[Prediction], golds: &[GoldRecord], tags: &[EmInTag], which: ValueTag) -> Result<f64> {
    let (hit, total) = subset_counts(preds, golds, tags, which)?;
    if total == 0 {
        return Err(Error::Data(format!("no gold value carries the {which:?} tag")));
    }
    Ok(hit as f64 / total as f64)
}

fn subset_counts(
    preds: &[Prediction],
    golds: &[GoldRecord],
    tags: &[EmInTag],
    which: ValueTag,
) -> Result<(usize, usize)> {
    let aligned = align(preds, golds)?;
    let index = tag_index(tags);
    let (mut hit, mut total) = (0usize, 0usize);
    for (g, a) in golds.iter().zip(&aligned) {
        for (k, p, gv) in &a.rows {
            let predicted = norm_set(p);
            for v in norm_set(gv) {
                if index.get(&(g.id.as_str(), *k, v.clone())) == Some(&which) {
                    total += 1;
                    if predicted.contains(&v) {
                        hit += 1;
                    }
                }
            }
        }
    }
    Ok((hit, total))
}

/// Full report: Mean-F1 over every (article, key) pair, Mean-MultiLabel-F1,
/// per-label F1 and, when tags are given, EM/IN recall.
pub fn evaluate(
    mode: ExecMode,
    preds: &[Prediction],
    golds: &[GoldRecord],
    tags: Option<&[EmInTag]>,
) -> Result<MetricReport> {
    let aligned = align(preds, golds)?;
    let pairs: Vec<(Vec<String>, Vec<String>)> = aligned
        .iter()
        .flat_map(|a| a.rows.iter().map(|(_, p, g)| (p.to_vec(), g.to_vec())))
        .collect();
    let mean_f1 = mean_f1_with(mode, &pairs)?;
    let mean_multilabel_f1 = mean_multilabel_f1_with(mode, preds, golds)?;

    let mut per_key: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    for a in &aligned {
        for (k, p, g) in &a.rows {
            per_key.entry(k).or_default().push(set_f1(p, g));
        }
    }
    let per_label = per_key
        .into_iter()
        .map(|(k, s)| (k.to_string(), pairwise_sum(&s) / s.len() as f64))
        .collect();

    let (mut em_recall, mut in_recall, mut em_values, mut in_values) = (None, None, 0, 0);
    if let Some(tags) = tags {
        let (h, t) = subset_counts(preds, golds, tags, ValueTag::ExactMatch)?;
        em_values = t;
        em_recall = (t > 0).then(|| h as f64 / t as f64);
        let (h, t) = subset_counts(preds, golds, tags, ValueTag::Inferable)?;
        in_values = t;
        in_recall = (t > 0).then(|| h as f64 / t as f64);
    }
    Ok(MetricReport {
        mean_f1,
        mean_multilabel_f1,
        per_label,
        em_recall,
        in_recall,
        articles: golds.len(),
        pairs: pairs.len(),
        em_values,
        in_values,
    })
}

impl MetricReport {
    /// Aligned plain-text rendering.
    pub fn to_table(&self) -> String {
        let opt = |x: Option<f64>| x.map_or_else(|| "n/a".to_string(), |v| format!("{:.4}", v));
        let mut rows: Vec<(String, String)> = vec![
            ("articles".into(), self.articles.to_string()),
            ("pairs".into(), self.pairs.to_string()),
            ("mean_f1".into(), format!("{:.4}", self.mean_f1)),
            ("mean_multilabel_f1".into(), format!("{:.4}", self.mean_multilabel_f1)),
            (format!("em_recall ({} values)", self.em_values), opt(self.em_recall)),
            (format!("in_recall ({} values)", self.in_values), opt(self.in_recall)),
        ];
        rows.extend(
            self.per_label
                .iter()
                .map(|(k, v)| (format!("label: {k}"), format!("{v:.4}"))),
        );
        let width = rows.iter().map(|(k, _)| k.chars().count()).max().unwrap_or(0);
        let mut out = String::new();
        for (k, v) in rows {
            let _ = writeln!(out, "{k:<width$}  {v:>8}");
        }
        out
    }
}
