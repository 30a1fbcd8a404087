//! Unidirectional LSTM encoder-decoder without attention. The decoder starts
//! from the encoder's final states.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::nn::{log_softmax, normal, xavier, Linear};
use super::{Example, Seq2Seq};
use crate::decoding::Scorer;
use crate::error::{Error, Result};
use crate::exec::ExecMode;
use crate::tensor::{Graph, ParamHolder, ParamId, ParamStore, Real, Tensor, Var};
use crate::tokenize::Specials;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Seq2SeqConfig {
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub layers: usize,
    pub vocab: usize,
    pub max_positions: usize,
    /// Updates between validations.
    pub validation_interval: u64,
    /// Validations without improvement before stopping.
    pub patience: usize,
}

impl Seq2SeqConfig {
    pub fn desk() -> Self {
        Self {
            embed_dim: 128,
            hidden_dim: 256,
            layers: 1,
            vocab: 800,
            max_positions: 256,
            validation_interval: 200,
            patience: 5,
        }
    }

    pub fn paper() -> Self {
        Self {
            vocab: 32000,
            max_positions: 512,
            validation_interval: 10_000,
            patience: 10,
            ..Self::desk()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 || self.hidden_dim == 0 || self.layers == 0 {
            return Err(Error::Config(
                "embed_dim, hidden_dim and layers must be positive".into(),
            ));
        }
        if self.validation_interval == 0 || self.patience == 0 {
            return Err(Error::Config(
                "validation_interval and patience must be positive".into(),
            ));
        }
        if self.vocab < 5 {
            return Err(Error::Config(format!(
                "vocab {} cannot hold the special ids",
                self.vocab
            )));
        }
        Ok(())
    }
}

/// One LSTM update. `w` is `[in + hidden, 4·hidden]` with gate blocks in
/// the order input, forget, candidate, output; `b` is `[4·hidden]`.
pub fn lstm_cell_step<T: Real>(g: &mut Graph<T>, w: Var, b: Var, x: Var, h: Var, c: Var) -> Result<(Var, Var)> {
    let hd = g.value(h).last_dim();
    let xh = g.concat(&[x, h], 1)?;
    let z = g.matmul(xh, w)?;
    let z = g.add(z, b)?;
    let zi = g.slice(z, 1, 0, hd)?;
    let zf = g.slice(z, 1, hd, 2 * hd)?;
    let zg = g.slice(z, 1, 2 * hd, 3 * hd)?;
    let zo = g.slice(z, 1, 3 * hd, 4 * hd)?;
    let i = g.sigmoid(zi)?;
    let f = g.sigmoid(zf)?;
    let cand = g.tanh(zg)?;
    let o = g.sigmoid(zo)?;
    let keep = g.mul(f, c)?;
    let write = g.mul(i, cand)?;
    let c2 = g.add(keep, write)?;
    let tc = g.tanh(c2)?;
    let h2 = g.mul(o, tc)?;
    Ok((h2, c2))
}

#[derive(Debug, Clone, Copy)]
struct Cell {
    w: ParamId,
    b: ParamId,
}

pub struct Seq2SeqModel<T> {
    pub config: Seq2SeqConfig,
    pub store: ParamStore<T>,
    pub specials: Specials,
    embed: ParamId,
    encoder: Vec<Cell>,
    decoder: Vec<Cell>,
    out: Linear,
    pub exec: ExecMode,
}

type States = Vec<(Var, Var)>;

impl<T: Real> Seq2SeqModel<T> {
    pub fn new(config: Seq2SeqConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let c = &config;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let embed = store.add("embed", normal(&mut rng, &[c.vocab, c.embed_dim], 0.1))?;
        let cells = |store: &mut ParamStore<T>, prefix: &str, rng: &mut ChaCha8Rng| -> Result<Vec<Cell>> {
            (0..c.layers)
                .map(|l| {
                    let din = if l == 0 { c.embed_dim } else { c.hidden_dim };
                    let h = c.hidden_dim;
                    let w = store.add(format!("{prefix}.{l}.w"), xavier(rng, din + h, 4 * h))?;
                    // forget-gate bias starts at 1
                    let mut bias = vec![0.0; 4 * h];
                    bias[h..2 * h].iter_mut().for_each(|x| *x = 1.0);
                    let b = store.add(format!("{prefix}.{l}.b"), Tensor::from_f64(&[4 * h], &bias)?)?;
                    Ok(Cell { w, b })
                })
                .collect()
        };
        let encoder = cells(&mut store, "enc", &mut rng)?;
        let decoder = cells(&mut store, "dec", &mut rng)?;
        let out = Linear::new(&mut store, "out", c.hidden_dim, c.vocab, &mut rng)?;
        Ok(Self {
            config,
            store,
            specials: Specials::default(),
            embed,
            encoder,
            decoder,
            out,
            exec: ExecMode::default(),
        })
    }

    fn zero_states(&self, g: &mut Graph<T>, batch: usize) -> States {
        let h = self.config.hidden_dim;
        (0..self.config.layers)
            .map(|_| {
                let z = g.constant(Tensor::zeros(&[batch, h]));
                (z, z)
            })
            .collect()
    }

    /// Runs a stack over right-padded sequences. Finished rows keep their
    /// state, so the returned states are each row's state after its last
    /// token. Also returns the top-layer output of every step.
    fn run(&self, g: &mut Graph<T>, cells: &[Cell], seqs: &[&[u32]], mut states: States) -> Result<(Vec<Var>, States)> {
        let b = seqs.len();
        let hd = self.config.hidden_dim;
        let steps = seqs.iter().map(|s| s.len()).max().unwrap_or(0);
        let v = self.config.vocab as u32;
        let table = g.param(&self.store, self.embed);
        let mut tops = Vec::with_capacity(steps);
        for t in 0..steps {
            let mut ids = Vec::with_capacity(b);
            for s in seqs {
                let id = s.get(t).copied().unwrap_or(self.specials.pad);
                if id >= v {
                    return Err(Error::InvalidTensor(format!("token id {id} outside vocab {v}")));
                }
                ids.push(id as usize);
            }
            let masks = if seqs.iter().all(|s| t < s.len()) {
                None
            } else {
                let live: Vec<f64> = seqs
                    .iter()
                    .flat_map(|s| std::iter::repeat_n(if t < s.len() { 1.0 } else { 0.0 }, hd))
                    .collect();
                let dead: Vec<f64> = live.iter().map(|x| 1.0 - x).collect();
                Some((
                    g.constant(Tensor::from_f64(&[b, hd], &live)?),
                    g.constant(Tensor::from_f64(&[b, hd], &dead)?),
                ))
            };
            let mut x = g.embedding(table, &ids)?;
            for (cell, st) in cells.iter().zip(states.iter_mut()) {
                let w = g.param(&self.store, cell.w);
                let bias = g.param(&self.store, cell.b);
                let (h2, c2) = lstm_cell_step(g, w, bias, x, st.0, st.1)?;
                *st = match masks {
                    None => (h2, c2),
                    Some((live, dead)) => {
                        let blend = |g: &mut Graph<T>, new: Var, old: Var| -> Result<Var> {
                            let a = g.mul(live, new)?;
                            let o = g.mul(dead, old)?;
                            g.add(a, o)
                        };
                        (blend(g, h2, st.0)?, blend(g, c2, st.1)?)
                    }
                };
                x = st.0;
            }
            tops.push(x);
        }
        Ok((tops, states))
    }

    fn encode(&self, g: &mut Graph<T>, sources: &[&[u32]]) -> Result<States> {
        if sources.iter().any(|s| s.is_empty()) {
            return Err(Error::InvalidTensor("empty source sequence".into()));
        }
        let init = self.zero_states(g, sources.len());
        Ok(self.run(g, &self.encoder, sources, init)?.1)
    }

    /// Final encoder states for one source, as `(h, c)` per layer.
    pub fn encode_states(&self, source: &[u32]) -> Result<Vec<(Tensor<T>, Tensor<T>)>> {
        let mut g = Graph::new().with_mode(self.exec);
        let st = self.encode(&mut g, &[source])?;
        Ok(st
            .into_iter()
            .map(|(h, c)| (g.value(h).clone(), g.value(c).clone()))
            .collect())
    }
}

impl ParamHolder for Seq2SeqModel<f64> {
    fn params(&self) -> &ParamStore<f64> {
        &self.store
    }
    fn params_mut(&mut self) -> &mut ParamStore<f64> {
        &mut self.store
    }
}

impl<T: Real> Seq2Seq<T> for Seq2SeqModel<T> {
    fn store(&self) -> &ParamStore<T> {
        &self.store
    }

    fn store_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    fn exec_mode(&self) -> ExecMode {
        self.exec
    }

    fn label_smoothing(&self) -> f64 {
        0.0
    }

    /// Uses only `source`; the query is expected inside it.
    fn loss(&self, g: &mut Graph<T>, batch: &[&Example], smoothing: f64, _rng: Option<&mut ChaCha8Rng>) -> Result<Var> {
        if batch.is_empty() {
            return Err(Error::InvalidTensor("empty batch".into()));
        }
        let sources: Vec<&[u32]> = batch.iter().map(|e| e.source.as_slice()).collect();
        let states = self.encode(g, &sources)?;
        let inputs: Vec<Vec<u32>> = batch
            .iter()
            .map(|e| {
                std::iter::once(self.specials.bos)
                    .chain(e.target.iter().copied())
                    .collect()
            })
            .collect();
        let refs: Vec<&[u32]> = inputs.iter().map(Vec::as_slice).collect();
        let (tops, _) = self.run(g, &self.decoder, &refs, states)?;
        let mut labels = Vec::with_capacity(tops.len() * batch.len());
        let mut mask = Vec::with_capacity(labels.capacity());
        for t in 0..tops.len() {
            for e in batch {
                let label = match t.cmp(&e.target.len()) {
                    std::cmp::Ordering::Less => Some(e.target[t]),
                    std::cmp::Ordering::Equal => Some(self.specials.eos),
                    std::cmp::Ordering::Greater => None,
                };
                labels.push(label.unwrap_or(self.specials.pad) as usize);
                mask.push(label.is_some());
            }
        }
        let hs = if tops.len() == 1 { tops[0] } else { g.concat(&tops, 0)? };
        let logits = self.out.apply(g, &self.store, hs)?;
        g.cross_entropy_mean(logits, &labels, Some(&mask), smoothing)
    }

    fn scorer<'a>(&'a self, example: &Example) -> Result<Box<dyn Scorer + 'a>> {
        Ok(Box::new(LstmScorer {
            model: self,
            states: self.encode_states(&example.source)?,
        }))
    }
}

pub struct LstmScorer<'a, T> {
    model: &'a Seq2SeqModel<T>,
    states: Vec<(Tensor<T>, Tensor<T>)>,
}

impl<T: Real> Scorer for LstmScorer<'_, T> {
    fn vocab_size(&self) -> usize {
        self.model.config.vocab
    }

    fn eos(&self) -> u32 {
        self.model.specials.eos
    }

    fn log_probs(&self, prefixes: &[&[u32]]) -> Result<Vec<Vec<f64>>> {
        let m = self.model;
        let n = prefixes.len();
        if n == 0 {
            return Ok(Vec::new());
        }
        let mut g = Graph::new().with_mode(m.exec);
        let init: States = self
            .states
            .iter()
            .map(|(h, c)| {
                let rep = |t: &Tensor<T>| {
                    let d = t.data().repeat(n);
                    Tensor::new(vec![n, t.last_dim()], d)
                };
                Ok((g.constant(rep(h)?), g.constant(rep(c)?)))
            })
            .collect::<Result<_>>()?;
        let inputs: Vec<Vec<u32>> = prefixes
            .iter()
            .map(|p| std::iter::once(m.specials.bos).chain(p.iter().copied()).collect())
            .collect();
        let refs: Vec<&[u32]> = inputs.iter().map(Vec::as_slice).collect();
        let (_, fin) = m.run(&mut g, &m.decoder, &refs, init)?;
        let top = fin.last().expect("at least one layer").0;
        let logits = m.out.apply(&mut g, &m.store, top)?;
        let v = m.config.vocab;
        Ok(g.value(logits).to_f64_vec().chunks(v).map(log_softmax).collect())
    }
}
