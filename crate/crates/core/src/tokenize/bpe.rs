use std::collections::HashMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Prefix symbol marking the start of every space-separated word.
pub const WORD_MARKER: char = '\u{2581}';

const SPECIAL_TOKENS: [&str; 5] = ["<pad>", "<s>", "</s>", "<unk>", "<sep>"];
/// Literal word that encodes to the separator id.
pub const SEP_TOKEN: &str = SPECIAL_TOKENS[4];
const MARKER_ID: u32 = SPECIAL_TOKENS.len() as u32;
const FIRST_BYTE_ID: u32 = MARKER_ID + 1;

/// Specials, the word marker and the 256 byte symbols.
pub const BASE_VOCAB: usize = SPECIAL_TOKENS.len() + 1 + 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Specials {
    pub pad: u32,
    pub bos: u32,
    pub eos: u32,
    pub unk: u32,
    pub sep: u32,
}

impl Default for Specials {
    fn default() -> Self {
        Self {
            pad: 0,
            bos: 1,
            eos: 2,
            unk: 3,
            sep: 4,
        }
    }
}

#[derive(Clone, Serialize, Deserialize)]
struct ModelFile {
    merges: Vec<(String, String)>,
    vocab: Vec<String>,
    specials: Specials,
}

/// GPT-2 style reversible byte → printable char table.
fn byte_chars() -> [char; 256] {
    let mut table = ['\0'; 256];
    let mut extra = 0u32;
    for b in 0..=255u32 {
        let printable = (0x21..=0x7e).contains(&b) || (0xa1..=0xac).contains(&b) || (0xae..=0xff).contains(&b);
        table[b as usize] = if printable {
            char::from_u32(b).unwrap()
        } else {
            extra += 1;
            char::from_u32(255 + extra).unwrap()
        };
    }
    table
}

/// Learned merge table plus vocabulary. Immutable after training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ModelFile", into = "ModelFile")]
pub struct SubwordModel {
    merges: Vec<(String, String)>,
    vocab: Vec<String>,
    specials: Specials,
    token_to_id: HashMap<String, u32>,
    merge_rank: HashMap<(u32, u32), (usize, u32)>,
    char_to_byte: HashMap<char, u8>,
}

impl From<SubwordModel> for ModelFile {
    fn from(m: SubwordModel) -> Self {
        ModelFile {
            merges: m.merges,
            vocab: m.vocab,
            specials: m.specials,
        }
    }
}

impl TryFrom<ModelFile> for SubwordModel {
    type Error = crate::error::Error;

    fn try_from(f: ModelFile) -> Result<Self> {
        Self::from_parts(f.merges, f.vocab, f.specials)
    }
}

fn base_vocab() -> Vec<String> {
    let mut v: Vec<String> = SPECIAL_TOKENS.iter().map(|s| s.to_string()).collect();
    v.push(WORD_MARKER.to_string());
    v.extend(byte_chars().iter().map(|c| c.to_string()));
    v
}

fn word_symbols(word: &str) -> Vec<u32> {
    let mut s = Vec::with_capacity(word.len() + 1);
    s.push(MARKER_ID);
    s.extend(word.bytes().map(|b| FIRST_BYTE_ID + b as u32));
    s
}

fn apply_merge(symbols: &mut Vec<u32>, pair: (u32, u32), out: u32) {
    let mut i = 0;
    let mut w = 0;
    while i < symbols.len() {
        if i + 1 < symbols.len() && symbols[i] == pair.0 && symbols[i + 1] == pair.1 {
            symbols[w] = out;
            i += 2;
        } else {
            symbols[w] = symbols[i];
            i += 1;
        }
        w += 1;
    }
    symbols.truncate(w);
}

impl SubwordModel {
    /// Greedy BPE: repeatedly merges the most frequent adjacent pair (ties go
    /// to the lexicographically smallest pair) until `vocab_size` is reached
    /// or no pair occurs at least twice.
    pub fn train<I, S>(corpus: I, vocab_size: usize) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        if vocab_size < BASE_VOCAB {
            return Err(Error::Config(format!(
                "vocab_size {vocab_size} below the base alphabet of {BASE_VOCAB}"
            )));
        }
        let mut counts: HashMap<String, u64> = HashMap::new();
        let mut lines = 0usize;
        for line in corpus {
            lines += 1;
            let line = line.as_ref();
            if line.is_empty() {
                continue;
            }
            for piece in line.split(' ') {
                if piece != SPECIAL_TOKENS[4] {
                    *counts.entry(piece.to_string()).or_default() += 1;
                }
            }
        }
        if lines == 0 {
            return Err(Error::Data("empty tokenizer training corpus".into()));
        }
        let mut words: Vec<(String, u64)> = counts.into_iter().collect();
        words.sort_unstable();
        let mut words: Vec<(Vec<u32>, u64)> = words.iter().map(|(w, c)| (word_symbols(w), *c)).collect();

        let mut vocab = base_vocab();
        let mut token_to_id: HashMap<String, u32> =
            vocab.iter().enumerate().map(|(i, t)| (t.clone(), i as u32)).collect();
        let mut merges = Vec::new();

        while vocab.len() < vocab_size {
            let mut pairs: HashMap<(u32, u32), u64> = HashMap::new();
            for (syms, c) in &words {
                for w in syms.windows(2) {
                    *pairs.entry((w[0], w[1])).or_default() += c;
                }
            }
            let best = pairs.into_iter().filter(|&(_, c)| c >= 2).min_by(|(pa, ca), (pb, cb)| {
                cb.cmp(ca).then_with(|| {
                    let ka = (&vocab[pa.0 as usize], &vocab[pa.1 as usize]);
                    let kb = (&vocab[pb.0 as usize], &vocab[pb.1 as usize]);
                    ka.cmp(&kb)
                })
            });
            let Some((pair, _)) = best else { break };
            let (l, r) = (vocab[pair.0 as usize].clone(), vocab[pair.1 as usize].clone());
            let joined = format!("{l}{r}");
            let out = match token_to_id.get(&joined) {
                Some(&id) => id,
                None => {
                    let id = vocab.len() as u32;
                    vocab.push(joined.clone());
                    token_to_id.insert(joined, id);
                    id
                }
            };
            merges.push((l, r));
            for (syms, _) in &mut words {
                apply_merge(syms, pair, out);
            }
        }
        Self::from_parts(merges, vocab, Specials::default())
    }

    fn from_parts(merges: Vec<(String, String)>, vocab: Vec<String>, specials: Specials) -> Result<Self> {
        let base = base_vocab();
        if vocab.len() < base.len() || vocab[..base.len()] != base[..] {
            return Err(Error::Data(
                "subword vocabulary does not start with the base alphabet".into(),
            ));
        }
        if specials != Specials::default() {
            return Err(Error::Data(
                "special ids must occupy the lowest ids in fixed order".into(),
            ));
        }
        let mut token_to_id = HashMap::with_capacity(vocab.len());
        for (i, t) in vocab.iter().enumerate() {
            if token_to_id.insert(t.clone(), i as u32).is_some() {
                return Err(Error::Data(format!("duplicate vocabulary entry {t:?}")));
            }
        }
        let mut merge_rank = HashMap::with_capacity(merges.len());
        for (rank, (l, r)) in merges.iter().enumerate() {
            let lookup = |s: &str| {
                token_to_id
                    .get(s)
                    .copied()
                    .ok_or_else(|| Error::Data(format!("merge symbol {s:?} missing from vocabulary")))
            };
            let (li, ri, oi) = (lookup(l)?, lookup(r)?, lookup(&format!("{l}{r}"))?);
            merge_rank.entry((li, ri)).or_insert((rank, oi));
        }
        let char_to_byte = byte_chars().iter().enumerate().map(|(b, &c)| (c, b as u8)).collect();
        Ok(Self {
            merges,
            vocab,
            specials,
            token_to_id,
            merge_rank,
            char_to_byte,
        })
    }

    pub fn specials(&self) -> Specials {
        self.specials
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    pub fn merges(&self) -> &[(String, String)] {
        &self.merges
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.vocab.get(id as usize).map(String::as_str)
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.token_to_id.get(token).copied()
    }

    fn encode_word(&self, word: &str, out: &mut Vec<u32>) {
        let mut syms = word_symbols(word);
        loop {
            let best = syms
                .windows(2)
                .filter_map(|w| {
                    self.merge_rank
                        .get(&(w[0], w[1]))
                        .map(|&(rank, o)| (rank, (w[0], w[1]), o))
                })
                .min();
            match best {
                Some((_, pair, o)) => apply_merge(&mut syms, pair, o),
                None => break,
            }
        }
        out.extend(syms);
    }

    /// Applies the merges in learned order. Every byte has a symbol, so the
    /// result never contains UNK.
    pub fn encode(&self, text: &str, add_bos_eos: bool) -> Vec<u32> {
        let mut out = Vec::new();
        if add_bos_eos {
            out.push(self.specials.bos);
        }
        if !text.is_empty() {
            for piece in text.split(' ') {
                if piece == SEP_TOKEN {
                    out.push(self.specials.sep);
                } else {
                    self.encode_word(piece, &mut out);
                }
            }
        }
        if add_bos_eos {
            out.push(self.specials.eos);
        }
        out
    }

    /// Inverse of [`encode`](Self::encode); PAD, BOS and EOS are dropped.
    pub fn decode(&self, ids: &[u32]) -> String {
        let mut bytes = Vec::new();
        let s = self.specials;
        for &id in ids {
            if id == s.pad || id == s.bos || id == s.eos {
                continue;
            }
            if id == s.sep {
                bytes.extend_from_slice(b" <sep>");
                continue;
            }
            if id == s.unk {
                bytes.extend_from_slice(b"<unk>");
                continue;
            }
            let Some(tok) = self.vocab.get(id as usize) else {
                bytes.extend_from_slice(b"<unk>");
                continue;
            };
            for c in tok.chars() {
                if c == WORD_MARKER {
                    bytes.push(b' ');
                } else if let Some(&b) = self.char_to_byte.get(&c) {
                    bytes.push(b);
                }
            }
        }
        if bytes.first() == Some(&b' ') {
            bytes.remove(0);
        }
        String::from_utf8_lossy(&bytes).into_owned()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }
}
