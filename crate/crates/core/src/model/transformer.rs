//! Encoder-decoder Transformer with two sources. One encoder parameter stack
//! reads the article and, separately, the property names; each decoder
//! layer attends to both encodings. Embeddings are shared by the encoder,
//! the decoder and the output projection.
//!
//! Sequences are packed row-wise without padding: position-wise layers run
//! on the whole pack and attention runs per segment.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::nn::{log_softmax, normal, sinusoid, Dropout, Linear, Norm};
use super::{Example, Seq2Seq};
use crate::decoding::Scorer;
use crate::error::{Error, Result};
use crate::exec::ExecMode;
use crate::tensor::{Graph, ParamHolder, ParamId, ParamStore, Real, Tensor, Var};
use crate::tokenize::Specials;

/// Order of the two cross-attention blocks inside a decoder layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CrossOrder {
    PropertyFirst,
    ArticleFirst,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DualSourceConfig {
    pub model_dim: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    /// Encoder and decoder depth.
    pub depth: usize,
    pub vocab: usize,
    pub dropout: f64,
    pub max_positions: usize,
    pub label_smoothing: f64,
    pub cross_order: CrossOrder,
    pub positional_encoding: bool,
}

impl DualSourceConfig {
    pub fn desk() -> Self {
        Self {
            model_dim: 64,
            heads: 4,
            ffn_dim: 256,
            depth: 2,
            vocab: 800,
            dropout: 0.0,
            max_positions: 256,
            label_smoothing: 0.0,
            cross_order: CrossOrder::PropertyFirst,
            positional_encoding: true,
        }
    }

    pub fn paper() -> Self {
        Self {
            model_dim: 512,
            heads: 8,
            ffn_dim: 2048,
            depth: 4,
            vocab: 32000,
            max_positions: 512,
            ..Self::desk()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || !self.model_dim.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "model_dim {} is not divisible by heads {}",
                self.model_dim, self.heads
            )));
        }
        if self.depth == 0 {
            return Err(Error::Config("depth must be at least 1".into()));
        }
        if self.vocab < 5 {
            return Err(Error::Config(format!(
                "vocab {} cannot hold the special ids",
                self.vocab
            )));
        }
        if self.max_positions < 2 {
            return Err(Error::Config("max_positions must be at least 2".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) || !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(Error::Config("dropout and label_smoothing must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
struct Attention {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
}

impl Attention {
    fn new<T: Real>(store: &mut ParamStore<T>, name: &str, d: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        Ok(Self {
            q: Linear::new(store, &format!("{name}.q"), d, d, rng)?,
            k: Linear::new(store, &format!("{name}.k"), d, d, rng)?,
            v: Linear::new(store, &format!("{name}.v"), d, d, rng)?,
            o: Linear::new(store, &format!("{name}.o"), d, d, rng)?,
        })
    }
}

#[derive(Debug, Clone)]
struct EncoderLayer {
    attn: Attention,
    ln_attn: Norm,
    ff1: Linear,
    ff2: Linear,
    ln_ff: Norm,
}

#[derive(Debug, Clone)]
struct DecoderLayer {
    self_attn: Attention,
    ln_self: Norm,
    prop_attn: Attention,
    ln_prop: Norm,
    art_attn: Attention,
    ln_art: Norm,
    ff1: Linear,
    ff2: Linear,
    ln_ff: Norm,
}

/// Row ranges of the sequences in a pack.
#[derive(Debug, Clone, Default)]
struct Segments(Vec<(usize, usize)>);

impl Segments {
    fn from_lengths(lens: impl IntoIterator<Item = usize>) -> Self {
        let mut start = 0;
        Self(
            lens.into_iter()
                .map(|l| {
                    let s = (start, l);
                    start += l;
                    s
                })
                .collect(),
        )
    }
}

pub struct DualSourceModel<T> {
    pub config: DualSourceConfig,
    pub store: ParamStore<T>,
    pub specials: Specials,
    embed: ParamId,
    encoder: Vec<EncoderLayer>,
    /// Separate encoder copy for the property source; only used to verify
    /// that sharing sums the gradients of both passes.
    property_encoder: Option<Vec<EncoderLayer>>,
    decoder: Vec<DecoderLayer>,
    pub exec: ExecMode,
    /// Train and decode with the article replaced by a single PAD, so the
    /// model sees property names only.
    pub ablate_article: bool,
}

fn build_encoder<T: Real>(
    store: &mut ParamStore<T>,
    prefix: &str,
    c: &DualSourceConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<EncoderLayer>> {
    let d = c.model_dim;
    (0..c.depth)
        .map(|l| {
            let n = format!("{prefix}.{l}");
            Ok(EncoderLayer {
                attn: Attention::new(store, &format!("{n}.attn"), d, rng)?,
                ln_attn: Norm::new(store, &format!("{n}.ln_attn"), d)?,
                ff1: Linear::new(store, &format!("{n}.ff1"), d, c.ffn_dim, rng)?,
                ff2: Linear::new(store, &format!("{n}.ff2"), c.ffn_dim, d, rng)?,
                ln_ff: Norm::new(store, &format!("{n}.ln_ff"), d)?,
            })
        })
        .collect()
}

impl<T: Real> DualSourceModel<T> {
    pub fn new(config: DualSourceConfig, seed: u64) -> Result<Self> {
        Self::build(config, seed, false)
    }

    /// Same architecture with an independent encoder stack for the property
    /// source, initialised to the same values as the shared one.
    pub(crate) fn with_untied_encoders(config: DualSourceConfig, seed: u64) -> Result<Self> {
        Self::build(config, seed, true)
    }

    fn build(config: DualSourceConfig, seed: u64, untied: bool) -> Result<Self> {
        config.validate()?;
        let c = &config;
        let d = c.model_dim;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let embed = store.add("embed", normal(&mut rng, &[c.vocab, d], 0.02))?;
        let encoder = build_encoder(&mut store, "enc", c, &mut rng)?;
        let property_encoder = if untied {
            let copy = build_encoder(&mut store, "enc_prop", c, &mut rng)?;
            for (a, b) in encoder.iter().zip(&copy) {
                for (src, dst) in layer_params(a).into_iter().zip(layer_params(b)) {
                    let v = store.get(src).value.clone();
                    store.get_mut(dst).value = v;
                }
            }
            Some(copy)
        } else {
            None
        };
        let decoder = (0..c.depth)
            .map(|l| {
                let n = format!("dec.{l}");
                Ok(DecoderLayer {
                    self_attn: Attention::new(&mut store, &format!("{n}.self"), d, &mut rng)?,
                    ln_self: Norm::new(&mut store, &format!("{n}.ln_self"), d)?,
                    prop_attn: Attention::new(&mut store, &format!("{n}.prop"), d, &mut rng)?,
                    ln_prop: Norm::new(&mut store, &format!("{n}.ln_prop"), d)?,
                    art_attn: Attention::new(&mut store, &format!("{n}.art"), d, &mut rng)?,
                    ln_art: Norm::new(&mut store, &format!("{n}.ln_art"), d)?,
                    ff1: Linear::new(&mut store, &format!("{n}.ff1"), d, c.ffn_dim, &mut rng)?,
                    ff2: Linear::new(&mut store, &format!("{n}.ff2"), c.ffn_dim, d, &mut rng)?,
                    ln_ff: Norm::new(&mut store, &format!("{n}.ln_ff"), d)?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            config,
            store,
            specials: Specials::default(),
            embed,
            encoder,
            property_encoder,
            decoder,
            exec: ExecMode::default(),
            ablate_article: false,
        })
    }

    pub fn embedding_id(&self) -> ParamId {
        self.embed
    }

    /// Parameter names of the (shared) encoder stack.
    pub fn encoder_param_names(&self) -> Vec<String> {
        self.encoder
            .iter()
            .flat_map(layer_params)
            .map(|id| self.store.get(id).name.clone())
            .collect()
    }

    fn embed_pack(&self, g: &mut Graph<T>, seqs: &[&[u32]], drop: &mut Dropout<'_>) -> Result<(Var, Segments)> {
        let d = self.config.model_dim;
        let ids: Vec<usize> = seqs.iter().flat_map(|s| s.iter().map(|&t| t as usize)).collect();
        let table = g.param(&self.store, self.embed);
        let x = g.embedding(table, &ids)?;
        let mut x = g.scale(x, (d as f64).sqrt())?;
        if self.config.positional_encoding {
            let mut pos = Vec::with_capacity(ids.len() * d);
            for s in seqs {
                pos.extend(sinusoid(s.len(), d));
            }
            let p = g.constant(Tensor::from_f64(&[ids.len(), d], &pos)?);
            x = g.add(x, p)?;
        }
        let x = drop.apply(g, x)?;
        Ok((x, Segments::from_lengths(seqs.iter().map(|s| s.len()))))
    }

    #[allow(clippy::too_many_arguments)]
    fn attend(
        &self,
        g: &mut Graph<T>,
        a: &Attention,
        xq: Var,
        q_segs: &Segments,
        mem: Var,
        kv_segs: &Segments,
        causal: bool,
    ) -> Result<Var> {
        let s = &self.store;
        let h = self.config.heads;
        let dh = self.config.model_dim / h;
        let inv = 1.0 / (dh as f64).sqrt();
        let q = a.q.apply(g, s, xq)?;
        let k = a.k.apply(g, s, mem)?;
        let v = a.v.apply(g, s, mem)?;
        let mut rows = Vec::with_capacity(q_segs.0.len());
        for (&(qs, ql), &(ks, kl)) in q_segs.0.iter().zip(&kv_segs.0) {
            let qi = g.slice(q, 0, qs, qs + ql)?;
            let ki = g.slice(k, 0, ks, ks + kl)?;
            let vi = g.slice(v, 0, ks, ks + kl)?;
            let mask = causal.then(|| {
                let mut m = vec![0.0; ql * kl];
                for i in 0..ql {
                    for j in (i + 1)..kl {
                        m[i * kl + j] = -1e9;
                    }
                }
                m
            });
            let mut heads = Vec::with_capacity(h);
            for hd in 0..h {
                let (qh, kh, vh) = if h == 1 {
                    (qi, ki, vi)
                } else {
                    (
                        g.slice(qi, 1, hd * dh, (hd + 1) * dh)?,
                        g.slice(ki, 1, hd * dh, (hd + 1) * dh)?,
                        g.slice(vi, 1, hd * dh, (hd + 1) * dh)?,
                    )
                };
                let sc = g.matmul_nt(qh, kh)?;
                let mut sc = g.scale(sc, inv)?;
                if let Some(m) = &mask {
                    let mv = g.constant(Tensor::from_f64(&[ql, kl], m)?);
                    sc = g.add(sc, mv)?;
                }
                let p = g.softmax(sc)?;
                heads.push(g.matmul(p, vh)?);
            }
            rows.push(if h == 1 { heads[0] } else { g.concat(&heads, 1)? });
        }
        let out = if rows.len() == 1 { rows[0] } else { g.concat(&rows, 0)? };
        a.o.apply(g, s, out)
    }

    fn residual_norm(&self, g: &mut Graph<T>, x: Var, y: Var, ln: &Norm, drop: &mut Dropout<'_>) -> Result<Var> {
        let y = drop.apply(g, y)?;
        let z = g.add(x, y)?;
        ln.apply(g, &self.store, z)
    }

    fn ffn(&self, g: &mut Graph<T>, x: Var, ff1: &Linear, ff2: &Linear) -> Result<Var> {
        let h = ff1.apply(g, &self.store, x)?;
        let h = g.relu(h)?;
        ff2.apply(g, &self.store, h)
    }

    fn run_encoder(
        &self,
        g: &mut Graph<T>,
        layers: &[EncoderLayer],
        seqs: &[&[u32]],
        drop: &mut Dropout<'_>,
    ) -> Result<(Var, Segments)> {
        let (mut x, segs) = self.embed_pack(g, seqs, drop)?;
        for l in layers {
            let a = self.attend(g, &l.attn, x, &segs, x, &segs, false)?;
            x = self.residual_norm(g, x, a, &l.ln_attn, drop)?;
            let f = self.ffn(g, x, &l.ff1, &l.ff2)?;
            x = self.residual_norm(g, x, f, &l.ln_ff, drop)?;
        }
        Ok((x, segs))
    }

    /// Encodes both sources of one input with the shared encoder; returns
    /// `[len_article, d]` and `[len_property, d]` states.
    pub fn encode_pair(&self, g: &mut Graph<T>, article: &[u32], property: &[u32]) -> Result<(Var, Var)> {
        let mut off = Dropout::off();
        let (a, _) = self.run_encoder(g, &self.encoder, &[article], &mut off)?;
        let prop_layers = self.property_encoder.as_deref().unwrap_or(&self.encoder);
        let (p, _) = self.run_encoder(g, prop_layers, &[property], &mut off)?;
        Ok((a, p))
    }

    #[allow(clippy::too_many_arguments)]
    fn run_decoder(
        &self,
        g: &mut Graph<T>,
        inputs: &[&[u32]],
        art: Var,
        art_segs: &Segments,
        prop: Var,
        prop_segs: &Segments,
        drop: &mut Dropout<'_>,
    ) -> Result<Var> {
        let (mut x, segs) = self.embed_pack(g, inputs, drop)?;
        for l in &self.decoder {
            let a = self.attend(g, &l.self_attn, x, &segs, x, &segs, true)?;
            x = self.residual_norm(g, x, a, &l.ln_self, drop)?;
            let cross: [(&Attention, &Norm, Var, &Segments); 2] = match self.config.cross_order {
                CrossOrder::PropertyFirst => [
                    (&l.prop_attn, &l.ln_prop, prop, prop_segs),
                    (&l.art_attn, &l.ln_art, art, art_segs),
                ],
                CrossOrder::ArticleFirst => [
                    (&l.art_attn, &l.ln_art, art, art_segs),
                    (&l.prop_attn, &l.ln_prop, prop, prop_segs),
                ],
            };
            for (att, ln, mem, msegs) in cross {
                let a = self.attend(g, att, x, &segs, mem, msegs, false)?;
                x = self.residual_norm(g, x, a, ln, drop)?;
            }
            let f = self.ffn(g, x, &l.ff1, &l.ff2)?;
            x = self.residual_norm(g, x, f, &l.ln_ff, drop)?;
        }
        Ok(x)
    }

    fn logits(&self, g: &mut Graph<T>, h: Var) -> Result<Var> {
        let table = g.param(&self.store, self.embed);
        g.matmul_nt(h, table)
    }

    fn check_ids(&self, seqs: &[&[u32]]) -> Result<()> {
        let v = self.config.vocab as u32;
        for s in seqs {
            if s.is_empty() {
                return Err(Error::InvalidTensor("empty input sequence".into()));
            }
            if let Some(&t) = s.iter().find(|&&t| t >= v) {
                return Err(Error::InvalidTensor(format!("token id {t} outside vocab {v}")));
            }
        }
        Ok(())
    }

    /// Full teacher-forced pass; returns `[sum(target+1), vocab]` logits and
    /// the label ids.
    fn forward(
        &self,
        g: &mut Graph<T>,
        batch: &[&Example],
        ablate_article: bool,
        drop: &mut Dropout<'_>,
    ) -> Result<(Var, Vec<usize>)> {
        let pad = [self.specials.pad];
        let arts: Vec<&[u32]> = batch
            .iter()
            .map(|e| if ablate_article { &pad[..] } else { e.source.as_slice() })
            .collect();
        let props: Vec<&[u32]> = batch.iter().map(|e| e.query.as_slice()).collect();
        let dec_in: Vec<Vec<u32>> = batch
            .iter()
            .map(|e| {
                std::iter::once(self.specials.bos)
                    .chain(e.target.iter().copied())
                    .collect()
            })
            .collect();
        let dec_refs: Vec<&[u32]> = dec_in.iter().map(Vec::as_slice).collect();
        self.check_ids(&arts)?;
        self.check_ids(&props)?;
        self.check_ids(&dec_refs)?;
        let labels: Vec<usize> = batch
            .iter()
            .flat_map(|e| {
                e.target
                    .iter()
                    .map(|&t| t as usize)
                    .chain(std::iter::once(self.specials.eos as usize))
            })
            .collect();
        let (art, art_segs) = self.run_encoder(g, &self.encoder, &arts, drop)?;
        let prop_layers = self.property_encoder.as_deref().unwrap_or(&self.encoder);
        let (prop, prop_segs) = self.run_encoder(g, prop_layers, &props, drop)?;
        let h = self.run_decoder(g, &dec_refs, art, &art_segs, prop, &prop_segs, drop)?;
        Ok((self.logits(g, h)?, labels))
    }

    /// Teacher-forced logits for a batch, row-major `[tokens, vocab]`.
    pub fn teacher_forced_logits(&self, batch: &[&Example]) -> Result<Tensor<T>> {
        let mut g = Graph::new().with_mode(self.exec);
        let (l, _) = self.forward(&mut g, batch, false, &mut Dropout::off())?;
        Ok(g.value(l).clone())
    }

    /// Scorer for one input. With `ablate_article` the article is a single PAD.
    pub fn dual_scorer(&self, example: &Example, ablate_article: bool) -> Result<DualScorer<'_, T>> {
        let pad = [self.specials.pad];
        let art: &[u32] = if ablate_article { &pad } else { &example.source };
        self.check_ids(&[art, &example.query])?;
        let mut g = Graph::new().with_mode(self.exec);
        let (a, p) = self.encode_pair(&mut g, art, &example.query)?;
        Ok(DualScorer {
            model: self,
            article: g.value(a).clone(),
            property: g.value(p).clone(),
        })
    }
}

impl ParamHolder for DualSourceModel<f64> {
    fn params(&self) -> &ParamStore<f64> {
        &self.store
    }
    fn params_mut(&mut self) -> &mut ParamStore<f64> {
        &mut self.store
    }
}

fn layer_params(l: &EncoderLayer) -> Vec<ParamId> {
    let mut v = Vec::new();
    for lin in [l.attn.q, l.attn.k, l.attn.v, l.attn.o, l.ff1, l.ff2] {
        v.extend([lin.w, lin.b]);
    }
    for n in [l.ln_attn, l.ln_ff] {
        v.extend([n.gamma, n.beta]);
    }
    v
}

impl<T: Real> Seq2Seq<T> for DualSourceModel<T> {
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
        self.config.label_smoothing
    }

    fn loss(&self, g: &mut Graph<T>, batch: &[&Example], smoothing: f64, rng: Option<&mut ChaCha8Rng>) -> Result<Var> {
        if batch.is_empty() {
            return Err(Error::InvalidTensor("empty batch".into()));
        }
        if batch.iter().any(|e| e.query.is_empty()) {
            return Err(Error::Data("dual-source examples need a property query".into()));
        }
        let mut drop = Dropout {
            p: self.config.dropout,
            rng,
        };
        let (logits, labels) = self.forward(g, batch, self.ablate_article, &mut drop)?;
        g.cross_entropy_mean(logits, &labels, None, smoothing)
    }

    fn scorer<'a>(&'a self, example: &Example) -> Result<Box<dyn Scorer + 'a>> {
        Ok(Box::new(self.dual_scorer(example, self.ablate_article)?))
    }
}

/// Next-token distribution given cached encoder states.
pub struct DualScorer<'a, T> {
    model: &'a DualSourceModel<T>,
    article: Tensor<T>,
    property: Tensor<T>,
}

impl<T: Real> Scorer for DualScorer<'_, T> {
    fn vocab_size(&self) -> usize {
        self.model.config.vocab
    }

    fn eos(&self) -> u32 {
        self.model.specials.eos
    }

    fn log_probs(&self, prefixes: &[&[u32]]) -> Result<Vec<Vec<f64>>> {
        if prefixes.is_empty() {
            return Ok(Vec::new());
        }
        let m = self.model;
        let mut g = Graph::new().with_mode(m.exec);
        let art = g.constant(self.article.clone());
        let prop = g.constant(self.property.clone());
        let n = prefixes.len();
        let art_segs = Segments(vec![(0, self.article.rows()); n]);
        let prop_segs = Segments(vec![(0, self.property.rows()); n]);
        let inputs: Vec<Vec<u32>> = prefixes
            .iter()
            .map(|p| std::iter::once(m.specials.bos).chain(p.iter().copied()).collect())
            .collect();
        let refs: Vec<&[u32]> = inputs.iter().map(Vec::as_slice).collect();
        m.check_ids(&refs)?;
        let h = m.run_decoder(&mut g, &refs, art, &art_segs, prop, &prop_segs, &mut Dropout::off())?;
        let mut end = 0;
        let mut last = Vec::with_capacity(n);
        for r in &refs {
            end += r.len();
            last.push(g.slice(h, 0, end - 1, end)?);
        }
        let hl = if n == 1 { last[0] } else { g.concat(&last, 0)? };
        let logits = m.logits(&mut g, hl)?;
        let v = m.config.vocab;
        Ok(g.value(logits).to_f64_vec().chunks(v).map(log_softmax).collect())
    }
}
