//! Beam search over any next-token scorer, and probability-averaging ensembles.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Next-token log-probabilities for a batch of prefixes. Prefixes never
/// contain the start symbol; the scorer supplies it.
pub trait Scorer {
    fn vocab_size(&self) -> usize;
    fn eos(&self) -> u32;
    fn log_probs(&self, prefixes: &[&[u32]]) -> Result<Vec<Vec<f64>>>;
}

impl<S: Scorer + ?Sized> Scorer for &S {
    fn vocab_size(&self) -> usize {
        (**self).vocab_size()
    }
    fn eos(&self) -> u32 {
        (**self).eos()
    }
    fn log_probs(&self, prefixes: &[&[u32]]) -> Result<Vec<Vec<f64>>> {
        (**self).log_probs(prefixes)
    }
}

impl<S: Scorer + ?Sized> Scorer for Box<S> {
    fn vocab_size(&self) -> usize {
        (**self).vocab_size()
    }
    fn eos(&self) -> u32 {
        (**self).eos()
    }
    fn log_probs(&self, prefixes: &[&[u32]]) -> Result<Vec<Vec<f64>>> {
        (**self).log_probs(prefixes)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hypothesis {
    /// Generated ids, including the final EOS when finished.
    pub tokens: Vec<u32>,
    pub log_prob: f64,
    pub finished: bool,
}

impl Hypothesis {
    /// `log_prob / len^alpha`
    pub fn normalized(&self, alpha: f64) -> f64 {
        if self.tokens.is_empty() {
            return self.log_prob;
        }
        self.log_prob / (self.tokens.len() as f64).powf(alpha)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BeamConfig {
    pub width: usize,
    pub max_len: usize,
    pub length_norm: f64,
}

impl Default for BeamConfig {
    fn default() -> Self {
        Self {
            width: 8,
            max_len: 64,
            length_norm: 0.6,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BeamOutput {
    pub best: Hypothesis,
    /// Finished hypotheses, best first, at most `width` of them.
    pub nbest: Vec<Hypothesis>,
    /// No hypothesis reached EOS within `max_len`.
    pub unfinished: bool,
}

fn by_score_then_tokens(a: (f64, &[u32]), b: (f64, &[u32])) -> Ordering {
    b.0.partial_cmp(&a.0)
        .unwrap_or(Ordering::Equal)
        .then_with(|| a.1.cmp(b.1))
}

/// Beam search. Candidates are ranked by cumulative log-probability; a
/// hypothesis that emits EOS leaves the beam, which shrinks accordingly.
/// Finished hypotheses compete under `log_prob / len^alpha`. Ties break
/// toward the lexicographically smaller token sequence.
pub fn beam_search<S: Scorer + ?Sized>(scorer: &S, cfg: &BeamConfig) -> Result<BeamOutput> {
    if cfg.width == 0 {
        return Err(Error::Config("beam width must be at least 1".into()));
    }
    let v = scorer.vocab_size();
    let eos = scorer.eos();
    let mut live = vec![Hypothesis {
        tokens: Vec::new(),
        log_prob: 0.0,
        finished: false,
    }];
    let mut finished: Vec<Hypothesis> = Vec::new();

    for _ in 0..cfg.max_len {
        let slots = cfg.width - finished.len().min(cfg.width);
        if live.is_empty() || slots == 0 {
            break;
        }
        let prefixes: Vec<&[u32]> = live.iter().map(|h| h.tokens.as_slice()).collect();
        let scores = scorer.log_probs(&prefixes)?;
        let mut cands: Vec<(f64, Vec<u32>)> = Vec::with_capacity(live.len() * v);
        for (h, lp) in live.iter().zip(&scores) {
            if lp.len() != v {
                return Err(Error::Numeric(format!(
                    "scorer returned {} log-probs for vocab {v}",
                    lp.len()
                )));
            }
            for (t, &l) in lp.iter().enumerate() {
                if l == f64::NEG_INFINITY {
                    continue;
                }
                let mut toks = h.tokens.clone();
                toks.push(t as u32);
                cands.push((h.log_prob + l, toks));
            }
        }
        cands.sort_by(|a, b| by_score_then_tokens((a.0, &a.1), (b.0, &b.1)));
        cands.truncate(slots);
        live.clear();
        for (lp, toks) in cands {
            let done = toks.last() == Some(&eos);
            let h = Hypothesis {
                tokens: toks,
                log_prob: lp,
                finished: done,
            };
            if done {
                finished.push(h);
            } else {
                live.push(h);
            }
        }
    }

    let alpha = cfg.length_norm;
    let rank = |hs: &mut Vec<Hypothesis>| {
        hs.sort_by(|a, b| by_score_then_tokens((a.normalized(alpha), &a.tokens), (b.normalized(alpha), &b.tokens)));
    };
    rank(&mut finished);
    finished.truncate(cfg.width);
    if let Some(best) = finished.first().cloned() {
        return Ok(BeamOutput {
            best,
            nbest: finished,
            unfinished: false,
        });
    }
    rank(&mut live);
    let best = live.into_iter().next().unwrap_or(Hypothesis {
        tokens: Vec::new(),
        log_prob: 0.0,
        finished: false,
    });
    Ok(BeamOutput {
        best,
        nbest: Vec::new(),
        unfinished: true,
    })
}

/// Argmax decoding, lowest id on ties.
pub fn greedy<S: Scorer + ?Sized>(scorer: &S, max_len: usize) -> Result<Hypothesis> {
    let eos = scorer.eos();
    let mut h = Hypothesis {
        tokens: Vec::new(),
        log_prob: 0.0,
        finished: false,
    };
    while h.tokens.len() < max_len {
        let lp = scorer.log_probs(&[h.tokens.as_slice()])?.remove(0);
        let (t, &l) = lp.iter().enumerate().fold(
            (0, &f64::NEG_INFINITY),
            |best, cur| if cur.1 > best.1 { cur } else { best },
        );
        h.tokens.push(t as u32);
        h.log_prob += l;
        if t as u32 == eos {
            h.finished = true;
            break;
        }
    }
    Ok(h)
}

/// Sum of the scorer's log-probabilities along `tokens`.
pub fn rescore<S: Scorer + ?Sized>(scorer: &S, tokens: &[u32]) -> Result<f64> {
    let mut total = 0.0;
    for i in 0..tokens.len() {
        let lp = scorer.log_probs(&[&tokens[..i]])?.remove(0);
        total += lp[tokens[i] as usize];
    }
    Ok(total)
}

/// Averages member distributions in probability space.
pub struct EnsembleScorer<S> {
    members: Vec<S>,
}

impl<S: Scorer> EnsembleScorer<S> {
    pub fn new(members: Vec<S>) -> Result<Self> {
        let Some(first) = members.first() else {
            return Err(Error::Config("an ensemble needs at least one member".into()));
        };
        let (v, eos) = (first.vocab_size(), first.eos());
        if let Some(m) = members.iter().find(|m| m.vocab_size() != v || m.eos() != eos) {
            return Err(Error::Config(format!(
                "ensemble vocab mismatch: {v} vs {} entries",
                m.vocab_size()
            )));
        }
        Ok(Self { members })
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }
}

impl<S: Scorer> Scorer for EnsembleScorer<S> {
    fn vocab_size(&self) -> usize {
        self.members[0].vocab_size()
    }

    fn eos(&self) -> u32 {
        self.members[0].eos()
    }

    fn log_probs(&self, prefixes: &[&[u32]]) -> Result<Vec<Vec<f64>>> {
        if self.members.len() == 1 {
            return self.members[0].log_probs(prefixes);
        }
        let all = self
            .members
            .iter()
            .map(|m| m.log_probs(prefixes))
            .collect::<Result<Vec<_>>>()?;
        let k = self.members.len() as f64;
        let v = self.vocab_size();
        Ok((0..prefixes.len())
            .map(|i| {
                (0..v)
                    .map(|t| {
                        let p: f64 = all.iter().map(|m| m[i][t].exp()).sum::<f64>() / k;
                        p.ln()
                    })
                    .collect()
            })
            .collect())
    }
}

/// One line of decoder output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodedRecord {
    pub id: String,
    pub properties: std::collections::BTreeMap<String, Vec<String>>,
    pub score: f64,
    pub flags: Vec<String>,
}
