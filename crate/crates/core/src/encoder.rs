//! Vocabulary, token sequences and the transformer encoder stack.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::{
    FeedForward, LayerNorm, MultiHeadAttention, ParamId, ParamStore, Rng, Session, Var,
};
use crate::scalar::Scalar;

pub const PAD: u32 = 0;
pub const CLS: u32 = 1;
pub const SEP: u32 = 2;
/// Id of the first special context token `S_1`.
pub const FIRST_SPECIAL: u32 = 3;

/// Token ↔ id map with reserved ids for `[PAD]`, `[CLS]`, `[SEP]` and the
/// special context tokens `[S1]..[Skmax]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    ids: HashMap<String, u32>,
    kmax: usize,
}

impl Vocab {
    /// Reserved tokens followed by `words`.
    pub fn new(kmax: usize, words: impl IntoIterator<Item = String>) -> Result<Self> {
        let mut tokens = vec!["[PAD]".to_string(), "[CLS]".into(), "[SEP]".into()];
        tokens.extend((1..=kmax).map(|i| format!("[S{i}]")));
        tokens.extend(words);
        Self::from_tokens(tokens, kmax)
    }

    /// `size` tokens in total; words are named `w0, w1, …`.
    pub fn synthetic(size: usize, kmax: usize) -> Result<Self> {
        let reserved = FIRST_SPECIAL as usize + kmax;
        if size <= reserved {
            return Err(Error::Config(format!(
                "vocabulary of {size} leaves no room after {reserved} reserved tokens"
            )));
        }
        Self::new(kmax, (0..size - reserved).map(|i| format!("w{i}")))
    }

    fn from_tokens(tokens: Vec<String>, kmax: usize) -> Result<Self> {
        let mut ids = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if ids.insert(t.clone(), i as u32).is_some() {
                return Err(Error::Config(format!("duplicate token {t:?}")));
            }
        }
        Ok(Self { tokens, ids, kmax })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn kmax(&self) -> usize {
        self.kmax
    }

    /// Id of the `i`-th special context token (0-based).
    pub fn special(&self, i: usize) -> Result<u32> {
        if i >= self.kmax {
            return Err(Error::Config(format!(
                "special token S{} requested but kmax is {}",
                i + 1,
                self.kmax
            )));
        }
        Ok(FIRST_SPECIAL + i as u32)
    }

    /// First id that is an ordinary word.
    pub fn first_word(&self) -> u32 {
        FIRST_SPECIAL + self.kmax as u32
    }

    pub fn num_words(&self) -> usize {
        self.len() - self.first_word() as usize
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.ids.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    /// Whitespace tokenization; unknown words are an error.
    pub fn tokenize(&self, text: &str) -> Result<Vec<u32>> {
        text.split_whitespace()
            .map(|w| self.id(w).ok_or_else(|| Error::UnknownToken(w.to_string())))
            .collect()
    }

    pub fn detokenize(&self, ids: &[u32]) -> String {
        ids.iter()
            .map(|&i| self.token(i).unwrap_or("[UNK]"))
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// `token<TAB>id` per line, ordered by id.
    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for (i, t) in self.tokens.iter().enumerate() {
            let _ = writeln!(out, "{t}\t{i}");
        }
        out
    }

    pub fn from_tsv(text: &str) -> Result<Self> {
        let mut tokens = Vec::new();
        for (line_no, line) in text.lines().enumerate() {
            if line.is_empty() {
                continue;
            }
            let (tok, id) = line
                .split_once('\t')
                .ok_or_else(|| Error::InvalidArgument(format!("vocab line {}: no tab", line_no + 1)))?;
            let id: usize = id
                .trim()
                .parse()
                .map_err(|_| Error::InvalidArgument(format!("vocab line {}: bad id", line_no + 1)))?;
            if id != tokens.len() {
                return Err(Error::InvalidArgument(format!(
                    "vocab ids must be dense and ordered; line {} has id {id}",
                    line_no + 1
                )));
            }
            tokens.push(tok.to_string());
        }
        let reserved = ["[PAD]", "[CLS]", "[SEP]"];
        if tokens.len() < 3 || tokens[..3] != reserved {
            return Err(Error::InvalidArgument("vocab must start with [PAD] [CLS] [SEP]".into()));
        }
        let kmax = tokens[3..]
            .iter()
            .enumerate()
            .take_while(|(i, t)| **t == format!("[S{}]", i + 1))
            .count();
        Self::from_tokens(tokens, kmax)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_tsv())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_tsv(&std::fs::read_to_string(path)?)
    }
}

/// Token ids with an attention mask (`true` = real token). Padding may only
/// follow real tokens.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TokenSequence {
    ids: Vec<u32>,
    mask: Vec<bool>,
}

impl TokenSequence {
    pub fn new(ids: Vec<u32>) -> Self {
        let mask = vec![true; ids.len()];
        Self { ids, mask }
    }

    pub fn with_mask(ids: Vec<u32>, mask: Vec<bool>) -> Result<Self> {
        if ids.len() != mask.len() {
            return Err(Error::shape("TokenSequence", &[ids.len()], &[mask.len()]));
        }
        let real = mask.iter().take_while(|&&m| m).count();
        if mask[real..].iter().any(|&m| m) {
            return Err(Error::InvalidArgument("padding before a real token".into()));
        }
        Ok(Self { ids, mask })
    }

    /// `[CLS] ids`.
    pub fn with_cls(ids: &[u32]) -> Self {
        let mut v = Vec::with_capacity(ids.len() + 1);
        v.push(CLS);
        v.extend_from_slice(ids);
        Self::new(v)
    }

    /// `[CLS] a [SEP] b [SEP]`.
    pub fn pair(a: &[u32], b: &[u32]) -> Self {
        let mut v = Vec::with_capacity(a.len() + b.len() + 3);
        v.push(CLS);
        v.extend_from_slice(a);
        v.push(SEP);
        v.extend_from_slice(b);
        v.push(SEP);
        Self::new(v)
    }

    pub fn ids(&self) -> &[u32] {
        &self.ids
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn real_len(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    /// Real tokens followed by `[PAD]` up to `len`.
    pub fn padded(&self, len: usize) -> Result<Self> {
        if len < self.len() {
            return Err(Error::Overlength {
                len: self.len(),
                max: len,
            });
        }
        let mut ids = self.ids.clone();
        let mut mask = self.mask.clone();
        ids.resize(len, PAD);
        mask.resize(len, false);
        Ok(Self { ids, mask })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub heads: usize,
    pub num_layers: usize,
    pub ffn_inner: usize,
    pub max_len: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            vocab_size: 1000,
            d_model: 64,
            heads: 4,
            num_layers: 4,
            ffn_inner: 256,
            max_len: 64,
        }
    }
}

/// Pre-norm block: `x + Att(LN(x))`, then `+ FFN(LN(·))`.
#[derive(Clone, Copy, Debug)]
pub struct TransformerLayer {
    pub ln_attention: LayerNorm,
    pub attention: MultiHeadAttention,
    pub ln_ffn: LayerNorm,
    pub ffn: FeedForward,
}

/// Query, key and value projections of a normalized input, shared between
/// the query path and the candidate path of an interaction layer.
pub struct Projected<'g, T: Scalar> {
    pub queries: Var<'g, T>,
    pub keys: Var<'g, T>,
    pub values: Var<'g, T>,
}

impl TransformerLayer {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        cfg: &EncoderConfig,
        rng: &mut Rng,
    ) -> Result<Self> {
        Ok(Self {
            ln_attention: LayerNorm::new(store, &format!("{name}.ln_attention"), cfg.d_model),
            attention: MultiHeadAttention::new(
                store,
                &format!("{name}.attention"),
                cfg.d_model,
                cfg.heads,
                rng,
            )?,
            ln_ffn: LayerNorm::new(store, &format!("{name}.ln_ffn"), cfg.d_model),
            ffn: FeedForward::new(store, &format!("{name}.ffn"), cfg.d_model, cfg.ffn_inner, rng),
        })
    }

    /// Layer-normalizes `x` and projects it to queries, keys and values.
    pub fn project<'g, T: Scalar>(
        &self,
        s: &Session<'g, '_, T>,
        x: Var<'g, T>,
    ) -> Result<Projected<'g, T>> {
        let h = self.ln_attention.forward(s, x)?;
        let queries = self.attention.project_queries(s, h)?;
        let (keys, values) = self.attention.project_keys_values(s, h)?;
        Ok(Projected {
            queries,
            keys,
            values,
        })
    }

    /// Residual attention and feed-forward given precomputed projections.
    pub fn finish<'g, T: Scalar>(
        &self,
        s: &Session<'g, '_, T>,
        x: Var<'g, T>,
        p: &Projected<'g, T>,
        mask: &[bool],
    ) -> Result<Var<'g, T>> {
        let mixed = self
            .attention
            .attend(s, p.queries, p.keys, p.values, Some(mask))?;
        let x = x.add(self.attention.project_output(s, mixed)?)?;
        let h = self.ln_ffn.forward(s, x)?;
        x.add(self.ffn.forward(s, h)?)
    }

    /// `x: [B, L, d]`, `mask: [B·L]` with `true` for real tokens.
    pub fn forward<'g, T: Scalar>(
        &self,
        s: &Session<'g, '_, T>,
        x: Var<'g, T>,
        mask: &[bool],
    ) -> Result<Var<'g, T>> {
        let p = self.project(s, x)?;
        self.finish(s, x, &p, mask)
    }
}

/// Hidden states of a padded batch.
#[derive(Clone, Debug)]
pub struct Encoded<'g, T: Scalar> {
    /// `[B, L, d]`.
    pub hidden: Var<'g, T>,
    /// `[B·L]`, `true` for real tokens.
    pub mask: Vec<bool>,
    pub batch: usize,
    pub len: usize,
}

impl<'g, T: Scalar> Encoded<'g, T> {
    pub fn with_hidden(&self, hidden: Var<'g, T>) -> Self {
        Self {
            hidden,
            mask: self.mask.clone(),
            batch: self.batch,
            len: self.len,
        }
    }

    /// Mean over real tokens: `[B, d]`.
    pub fn mean_pool(&self) -> Result<Var<'g, T>> {
        let weights: Vec<T> = (0..self.batch)
            .flat_map(|b| {
                let row = &self.mask[b * self.len..(b + 1) * self.len];
                let n = row.iter().filter(|&&m| m).count().max(1);
                let w = T::one() / T::from_usize(n).unwrap();
                row.iter()
                    .map(move |&m| if m { w } else { T::zero() })
                    .collect::<Vec<_>>()
            })
            .collect();
        let g = self.hidden.graph();
        let w = g.constant(crate::Tensor::new([self.batch, self.len, 1], weights)?);
        self.hidden.mul(w)?.sum_axis(1)
    }
}

/// Token + learned positional embeddings followed by a stack of
/// [`TransformerLayer`]s.
#[derive(Clone, Debug)]
pub struct Encoder {
    pub config: EncoderConfig,
    pub token_embedding: ParamId,
    pub position_embedding: ParamId,
    pub layers: Vec<TransformerLayer>,
}

impl Encoder {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        cfg: &EncoderConfig,
        rng: &mut Rng,
    ) -> Result<Self> {
        if cfg.d_model == 0 || cfg.max_len == 0 || cfg.vocab_size == 0 {
            return Err(Error::Config("encoder dimensions must be positive".into()));
        }
        let token_embedding = store.normal("embed.token", &[cfg.vocab_size, cfg.d_model], rng);
        let position_embedding = store.normal("embed.position", &[cfg.max_len, cfg.d_model], rng);
        let layers = (0..cfg.num_layers)
            .map(|i| TransformerLayer::new(store, &format!("layer{}", i + 1), cfg, rng))
            .collect::<Result<_>>()?;
        Ok(Self {
            config: cfg.clone(),
            token_embedding,
            position_embedding,
            layers,
        })
    }

    pub fn d_model(&self) -> usize {
        self.config.d_model
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    /// Token plus positional embeddings of a batch padded to its longest
    /// sequence. Padding rows are embedded too and masked downstream.
    pub fn embed<'g, T: Scalar>(
        &self,
        s: &Session<'g, '_, T>,
        batch: &[TokenSequence],
    ) -> Result<Encoded<'g, T>> {
        if batch.is_empty() {
            return Err(Error::Empty("embed batch"));
        }
        let len = batch.iter().map(TokenSequence::len).max().unwrap_or(0);
        if len == 0 {
            return Err(Error::Empty("token sequence"));
        }
        if len > self.config.max_len {
            return Err(Error::Overlength {
                len,
                max: self.config.max_len,
            });
        }
        let mut ids = Vec::with_capacity(batch.len() * len);
        let mut mask = Vec::with_capacity(batch.len() * len);
        for seq in batch {
            let padded = seq.padded(len)?;
            for &id in padded.ids() {
                if id as usize >= self.config.vocab_size {
                    return Err(Error::OutOfVocab {
                        id,
                        size: self.config.vocab_size,
                    });
                }
                ids.push(id as usize);
            }
            mask.extend_from_slice(padded.mask());
        }
        let d = self.config.d_model;
        let tok = s
            .p(self.token_embedding)
            .gather_rows(&ids)?
            .reshape(&[batch.len(), len, d])?;
        let positions: Vec<usize> = (0..len).collect();
        let pos = s.p(self.position_embedding).gather_rows(&positions)?;
        Ok(Encoded {
            hidden: tok.add(pos)?,
            mask,
            batch: batch.len(),
            len,
        })
    }

    /// Applies layers `from..to` (0-based, exclusive end).
    pub fn run_layers<'g, T: Scalar>(
        &self,
        s: &Session<'g, '_, T>,
        x: Encoded<'g, T>,
        from: usize,
        to: usize,
    ) -> Result<Encoded<'g, T>> {
        let mut hidden = x.hidden;
        for layer in &self.layers[from..to] {
            hidden = layer.forward(s, hidden, &x.mask)?;
        }
        Ok(x.with_hidden(hidden))
    }

    /// Embedding followed by the first `depth` layers.
    pub fn encode_prefix<'g, T: Scalar>(
        &self,
        s: &Session<'g, '_, T>,
        batch: &[TokenSequence],
        depth: usize,
    ) -> Result<Encoded<'g, T>> {
        if depth > self.layers.len() {
            return Err(Error::Config(format!(
                "depth {depth} exceeds {} layers",
                self.layers.len()
            )));
        }
        let x = self.embed(s, batch)?;
        self.run_layers(s, x, 0, depth)
    }

    pub fn encode<'g, T: Scalar>(
        &self,
        s: &Session<'g, '_, T>,
        batch: &[TokenSequence],
    ) -> Result<Encoded<'g, T>> {
        self.encode_prefix(s, batch, self.layers.len())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn synthetic_vocab_reserves_ids() {
        let v = Vocab::synthetic(20, 3).unwrap();
        assert_eq!(v.id("[PAD]"), Some(PAD));
        assert_eq!(v.id("[CLS]"), Some(CLS));
        assert_eq!(v.id("[SEP]"), Some(SEP));
        assert_eq!(v.special(0).unwrap(), 3);
        assert_eq!(v.special(2).unwrap(), 5);
        assert!(v.special(3).is_err());
        assert_eq!(v.first_word(), 6);
        assert_eq!(v.id("w0"), Some(6));
        assert_eq!(v.num_words(), 14);
    }

    #[test]
    fn vocab_tsv_round_trip() {
        let v = Vocab::synthetic(12, 2).unwrap();
        let text = v.to_tsv();
        assert!(text.starts_with("[PAD]\t0\n[CLS]\t1\n"));
        assert_eq!(Vocab::from_tsv(&text).unwrap(), v);
    }

    #[test]
    fn tokenize_rejects_unknown_words() {
        let v = Vocab::synthetic(12, 1).unwrap();
        assert_eq!(v.tokenize("w0  w2").unwrap(), vec![4, 6]);
        assert!(matches!(v.tokenize("w0 nope"), Err(Error::UnknownToken(_))));
    }

    #[test]
    fn sequence_mask_must_be_a_prefix() {
        assert!(TokenSequence::with_mask(vec![5, 6, 0], vec![true, true, false]).is_ok());
        assert!(TokenSequence::with_mask(vec![5, 0, 6], vec![true, false, true]).is_err());
        let s = TokenSequence::pair(&[7], &[8, 9]);
        assert_eq!(s.ids(), &[CLS, 7, SEP, 8, 9, SEP]);
        assert_eq!(s.padded(8).unwrap().real_len(), 6);
    }
}
