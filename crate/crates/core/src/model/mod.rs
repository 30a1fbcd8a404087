//! Sequence-to-sequence models over the recycled records: the dual-source
//! Transformer and the LSTM baseline, plus their shared training loop.

pub mod batch;
pub mod lstm;
mod nn;
pub mod saved;
pub mod target;
pub mod train;
pub mod transformer;

use std::collections::BTreeMap;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::decoding::{beam_search, BeamConfig, DecodedRecord, Scorer};
use crate::error::{Error, Result};
use crate::exec::{self, ExecMode};
use crate::recycler::MultiPropertyRecord;
use crate::tensor::{Graph, ParamStore, Real, Var};
use crate::tokenize::{SubwordModel, SEP_TOKEN};

pub use batch::{dynamic_batches, Batcher};
pub use lstm::{lstm_cell_step, Seq2SeqConfig, Seq2SeqModel};
pub use saved::{load_model, save_model, AnyModel, ModelMeta, ModelSpec};
pub use target::{
    parse_target, parse_values, serialize_property_query, serialize_target, serialize_values, ParsedTarget, PropertyMap,
};
pub use train::{
    fit, fit_with_checkpoints, FitConfig, FitReport, LogEntry, StepOutcome, StopReason, Trainer, TrainerConfig,
};
pub use transformer::{CrossOrder, DualSourceConfig, DualSourceModel};

/// Single: one example per (article, property), target is the value list.
/// Multi: one example per article, target covers every property.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskMode {
    Single,
    Multi,
}

/// How the query reaches the model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputLayout {
    /// Article and property names as two sources.
    DualSource,
    /// One lowercased source `property <sep> article`.
    Concatenated,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Example {
    pub id: String,
    /// Queried property names; exactly one in single mode.
    pub keys: Vec<String>,
    /// Article ids (dual) or the concatenated input, EOS-terminated.
    pub source: Vec<u32>,
    /// Property-name ids, EOS-terminated. Empty for the concatenated layout.
    pub query: Vec<u32>,
    /// Target ids without BOS/EOS.
    pub target: Vec<u32>,
}

impl Example {
    pub fn num_tokens(&self) -> usize {
        self.source.len() + self.query.len() + self.target.len() + 1
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ExampleStats {
    pub examples: usize,
    pub truncated_sources: usize,
    pub truncated_targets: usize,
}

/// Tokenises records into examples. Sources longer than `max_positions`
/// lose their tail (EOS is kept); queries are never truncated.
pub fn build_examples(
    records: &[MultiPropertyRecord],
    tok: &SubwordModel,
    mode: TaskMode,
    layout: InputLayout,
    max_positions: usize,
) -> (Vec<Example>, ExampleStats) {
    let eos = tok.specials().eos;
    let mut stats = ExampleStats::default();
    let mut out = Vec::new();
    let encode = |text: &str, limit: Option<usize>, truncated: &mut usize| {
        let mut ids = tok.encode(text, false);
        if let Some(max) = limit {
            if ids.len() + 1 > max {
                ids.truncate(max.saturating_sub(1));
                *truncated += 1;
            }
        }
        ids
    };
    for r in records {
        let queries: Vec<PropertyMap> = match mode {
            TaskMode::Multi => vec![r.properties.clone()],
            TaskMode::Single => r
                .properties
                .iter()
                .map(|(k, v)| [(k.clone(), v.clone())].into_iter().collect())
                .collect(),
        };
        for map in queries {
            let names = serialize_property_query(map.keys());
            let target_text = match mode {
                TaskMode::Multi => serialize_target(&map),
                TaskMode::Single => serialize_values(map.values().next().map_or(&[][..], Vec::as_slice)),
            };
            let (mut source, query, target_text) = match layout {
                InputLayout::DualSource => {
                    let s = encode(&r.text, Some(max_positions), &mut stats.truncated_sources);
                    let mut q = tok.encode(&names, false);
                    q.push(eos);
                    (s, q, target_text)
                }
                InputLayout::Concatenated => {
                    let text = format!("{} {SEP_TOKEN} {}", names.to_lowercase(), r.text.to_lowercase());
                    let s = encode(&text, Some(max_positions), &mut stats.truncated_sources);
                    (s, Vec::new(), target_text.to_lowercase())
                }
            };
            source.push(eos);
            let target = encode(&target_text, Some(max_positions), &mut stats.truncated_targets);
            out.push(Example {
                id: r.id.clone(),
                keys: map.keys().cloned().collect(),
                source,
                query,
                target,
            });
        }
    }
    stats.examples = out.len();
    (out, stats)
}

/// Interface the trainer and decoder need from a model.
pub trait Seq2Seq<T: Real>: Sync {
    fn store(&self) -> &ParamStore<T>;
    fn store_mut(&mut self) -> &mut ParamStore<T>;
    fn exec_mode(&self) -> ExecMode;
    /// Label smoothing used for training losses.
    fn label_smoothing(&self) -> f64;
    /// Mean per-token cross-entropy over the batch. `rng` enables dropout.
    fn loss(&self, g: &mut Graph<T>, batch: &[&Example], smoothing: f64, rng: Option<&mut ChaCha8Rng>) -> Result<Var>;
    /// A scorer bound to one input; prefixes exclude BOS.
    fn scorer<'a>(&'a self, example: &Example) -> Result<Box<dyn Scorer + 'a>>;
}

/// Mean validation loss without smoothing or dropout, weighted by tokens.
pub fn evaluate_loss<T: Real, M: Seq2Seq<T> + ?Sized>(
    model: &M,
    examples: &[Example],
    token_budget: usize,
) -> Result<f64> {
    if examples.is_empty() {
        return Err(Error::Data("validation set is empty".into()));
    }
    let lens: Vec<usize> = examples.iter().map(Example::num_tokens).collect();
    let mut total = 0.0;
    let mut count = 0usize;
    for b in dynamic_batches(&lens, token_budget) {
        let batch: Vec<&Example> = b.iter().map(|&i| &examples[i]).collect();
        let n: usize = batch.iter().map(|e| e.target.len() + 1).sum();
        let mut g = Graph::new().with_mode(model.exec_mode());
        let l = model.loss(&mut g, &batch, 0.0, None)?;
        total += g.value(l).item().as_f64() * n as f64;
        count += n;
    }
    Ok(total / count as f64)
}

/// Turns generated text into a property map for one example.
pub fn read_output(text: &str, example: &Example, mode: TaskMode) -> ParsedTarget {
    match mode {
        TaskMode::Multi => parse_target(text),
        TaskMode::Single => ParsedTarget {
            properties: [(example.keys.first().cloned().unwrap_or_default(), parse_values(text))]
                .into_iter()
                .collect(),
            malformed: 0,
        },
    }
}

/// Decodes every example (in parallel under `mode`) and merges the outputs
/// per article, in first-seen article order. `postprocess` runs on the
/// decoded text before parsing (the truecaser, for instance).
pub fn decode_examples<'m, F, P>(
    mode: ExecMode,
    examples: &[Example],
    make_scorer: F,
    tok: &SubwordModel,
    task: TaskMode,
    beam: &BeamConfig,
    postprocess: P,
) -> Result<Vec<DecodedRecord>>
where
    F: Fn(&Example) -> Result<Box<dyn Scorer + 'm>> + Sync,
    P: Fn(&str) -> String + Sync,
{
    let outs = exec::map_collect(mode, examples, |ex| -> Result<(String, ParsedTarget, f64, bool)> {
        let scorer = make_scorer(ex)?;
        let out = beam_search(scorer.as_ref(), beam)?;
        let text = postprocess(&tok.decode(&out.best.tokens));
        let parsed = read_output(&text, ex, task);
        Ok((text, parsed, out.best.normalized(beam.length_norm), out.unfinished))
    });
    let mut order: Vec<String> = Vec::new();
    let mut merged: BTreeMap<String, DecodedRecord> = BTreeMap::new();
    for (ex, o) in examples.iter().zip(outs) {
        let (_, parsed, score, unfinished) = o?;
        let rec = merged.entry(ex.id.clone()).or_insert_with(|| {
            order.push(ex.id.clone());
            DecodedRecord {
                id: ex.id.clone(),
                properties: BTreeMap::new(),
                score: 0.0,
                flags: Vec::new(),
            }
        });
        for (k, vs) in parsed.properties {
            let e = rec.properties.entry(k).or_default();
            e.extend(vs);
            e.sort();
            e.dedup();
        }
        rec.score += score;
        if unfinished && !rec.flags.iter().any(|f| f == "unfinished") {
            rec.flags.push("unfinished".into());
        }
        if parsed.malformed > 0 {
            rec.flags.push(format!("malformed:{}", parsed.malformed));
        }
    }
    Ok(order.into_iter().filter_map(|id| merged.remove(&id)).collect())
}

/// Keeps only predicted keys the gold record queried; a model can emit
/// property names nobody asked for.
pub fn restrict_to_queried(decoded: &mut [DecodedRecord], examples: &[Example]) {
    let mut queried: BTreeMap<&str, Vec<&String>> = BTreeMap::new();
    for ex in examples {
        queried.entry(ex.id.as_str()).or_default().extend(&ex.keys);
    }
    for d in decoded {
        if let Some(keys) = queried.get(d.id.as_str()) {
            let before = d.properties.len();
            d.properties.retain(|k, _| keys.contains(&k));
            let dropped = before - d.properties.len();
            if dropped > 0 {
                d.flags.push(format!("unqueried:{dropped}"));
            }
        }
    }
}
