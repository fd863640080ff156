//! Offline candidate encoding into `k` context embeddings plus an initial
//! state vector, and the binary cache that persists them.
//!
//! Cache layout (little-endian):
//!
//! ```text
//! "MIXC" | u32 version | u64 N | u32 k | u32 d | u8 float width | u8 strategy
//! N × ( u64 candidate id | k·d floats (E0, row-major) | d floats (h0) )
//! ```

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::encoder::{Encoder, TokenSequence, FIRST_SPECIAL};
use crate::error::{Error, Result};
use crate::numcore::{Graph, MultiHeadAttention, ParamId, ParamStore, Rng, Session, Var};
use crate::scalar::Scalar;
use crate::Tensor;

pub const CACHE_MAGIC: &[u8; 4] = b"MIXC";
pub const CACHE_VERSION: u32 = 1;
pub const CACHE_HEADER_BYTES: usize = 4 + 4 + 8 + 4 + 4 + 1 + 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum StrategyKind {
    /// `k` special tokens prepended to the candidate; their outputs are E0.
    S,
    /// `k` learned codes attend over the candidate's encoder output.
    C,
}

impl StrategyKind {
    fn code(self) -> u8 {
        match self {
            StrategyKind::S => 0,
            StrategyKind::C => 1,
        }
    }

    fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(StrategyKind::S),
            1 => Ok(StrategyKind::C),
            _ => Err(Error::CacheFormat(format!("unknown strategy code {code}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PrecomputeStrategy {
    pub kind: StrategyKind,
    pub k: usize,
}

impl PrecomputeStrategy {
    pub fn validate(&self, kmax: usize) -> Result<()> {
        if self.k == 0 || self.k > kmax {
            return Err(Error::Config(format!("k = {} outside 1..={kmax}", self.k)));
        }
        Ok(())
    }
}

/// Learned codes and the single-head attention of the C strategy.
#[derive(Clone, Copy, Debug)]
pub struct ContextCodes {
    pub codes: ParamId,
    pub attention: MultiHeadAttention,
}

impl ContextCodes {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        k: usize,
        d: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        Ok(Self {
            codes: store.normal(format!("{name}.codes"), &[k, d], rng),
            attention: MultiHeadAttention::new(store, &format!("{name}.attention"), d, 1, rng)?,
        })
    }
}

/// `E0: [N, k, d]` and `h0: [N, d]` for a batch of candidates.
#[derive(Clone, Copy, Debug)]
pub struct Precomputed<'g, T: Scalar> {
    pub context: Var<'g, T>,
    pub state: Var<'g, T>,
}

fn with_state<'g, T: Scalar>(context: Var<'g, T>) -> Result<Precomputed<'g, T>> {
    Ok(Precomputed {
        state: context.mean_axis(1)?,
        context,
    })
}

/// Ids of the special tokens `S_1..S_k`.
pub fn special_ids(k: usize, kmax: usize) -> Result<Vec<u32>> {
    if k == 0 || k > kmax {
        return Err(Error::Config(format!("k = {k} outside 1..={kmax}")));
    }
    Ok((0..k as u32).map(|i| FIRST_SPECIAL + i).collect())
}

/// S strategy: encode `[S_1..S_k] ++ tokens` and keep the first `k` output rows.
pub fn precompute_s<'g, T: Scalar>(
    s: &Session<'g, '_, T>,
    encoder: &Encoder,
    candidates: &[TokenSequence],
    k: usize,
    kmax: usize,
) -> Result<Precomputed<'g, T>> {
    let specials = special_ids(k, kmax)?;
    let seqs = candidates
        .iter()
        .map(|c| {
            let real = &c.ids()[..c.real_len()];
            let mut ids = specials.clone();
            ids.extend_from_slice(real);
            if ids.len() > encoder.config.max_len {
                return Err(Error::Overlength {
                    len: ids.len(),
                    max: encoder.config.max_len,
                });
            }
            Ok(TokenSequence::new(ids))
        })
        .collect::<Result<Vec<_>>>()?;
    let out = encoder.encode(s, &seqs)?;
    with_state(out.hidden.slice(1, 0, k)?)
}

/// C strategy: `E0 = Att(codes, Y, Y)` over the candidate's last-layer output.
pub fn precompute_c<'g, T: Scalar>(
    s: &Session<'g, '_, T>,
    encoder: &Encoder,
    codes: &ContextCodes,
    candidates: &[TokenSequence],
) -> Result<Precomputed<'g, T>> {
    if candidates.iter().any(|c| c.real_len() == 0) {
        return Err(Error::Empty("candidate"));
    }
    let y = encoder.encode(s, candidates)?;
    let c = s.p(codes.codes);
    let (k, d) = (c.shape()[0], c.shape()[1]);
    let c = c.reshape(&[1, k, d])?.broadcast_to(&[y.batch, k, d])?;
    let context = codes.attention.forward(s, c, y.hidden, Some(&y.mask))?;
    with_state(context)
}

/// Strategy plus the parameters it needs.
#[derive(Clone, Copy, Debug)]
pub struct Precomputer {
    pub strategy: PrecomputeStrategy,
    pub kmax: usize,
    pub codes: Option<ContextCodes>,
}

impl Precomputer {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        strategy: PrecomputeStrategy,
        kmax: usize,
        d: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        strategy.validate(kmax)?;
        let codes = match strategy.kind {
            StrategyKind::S => None,
            StrategyKind::C => Some(ContextCodes::new(store, "context_codes", strategy.k, d, rng)?),
        };
        Ok(Self {
            strategy,
            kmax,
            codes,
        })
    }

    pub fn forward<'g, T: Scalar>(
        &self,
        s: &Session<'g, '_, T>,
        encoder: &Encoder,
        candidates: &[TokenSequence],
    ) -> Result<Precomputed<'g, T>> {
        match (self.strategy.kind, &self.codes) {
            (StrategyKind::S, _) => precompute_s(s, encoder, candidates, self.strategy.k, self.kmax),
            (StrategyKind::C, Some(codes)) => precompute_c(s, encoder, codes, candidates),
            (StrategyKind::C, None) => Err(Error::Config("C strategy without context codes".into())),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CandidateCacheEntry<T> {
    pub id: u64,
    /// `[k, d]`.
    pub context: Tensor<T>,
    /// `[d]`.
    pub state: Tensor<T>,
}

/// Pre-computed candidate rows ordered by id. Read-only once built.
#[derive(Clone, Debug)]
pub struct CandidateCache<T> {
    kind: StrategyKind,
    k: usize,
    d: usize,
    entries: Vec<CandidateCacheEntry<T>>,
    index: HashMap<u64, usize>,
}

impl<T: Scalar> PartialEq for CandidateCache<T> {
    fn eq(&self, other: &Self) -> bool {
        self.kind == other.kind && self.k == other.k && self.d == other.d && self.entries == other.entries
    }
}

impl<T: Scalar> CandidateCache<T> {
    /// Sorts entries by id and checks them against `(k, d)`.
    pub fn from_entries(
        kind: StrategyKind,
        k: usize,
        d: usize,
        mut entries: Vec<CandidateCacheEntry<T>>,
    ) -> Result<Self> {
        entries.sort_by_key(|e| e.id);
        for pair in entries.windows(2) {
            if pair[0].id == pair[1].id {
                return Err(Error::InvalidArgument(format!("duplicate candidate id {}", pair[0].id)));
            }
        }
        for e in &entries {
            if e.context.shape() != [k, d] || e.state.shape() != [d] {
                return Err(Error::shape("cache entry", e.context.shape(), &[k, d]));
            }
            if !e.context.is_finite() || !e.state.is_finite() {
                return Err(Error::InvalidArgument(format!("non-finite cache entry {}", e.id)));
            }
        }
        let index = entries.iter().enumerate().map(|(i, e)| (e.id, i)).collect();
        Ok(Self {
            kind,
            k,
            d,
            entries,
            index,
        })
    }

    /// Encodes every candidate in chunks of `chunk` without recording gradients.
    pub fn build(
        params: &ParamStore<T>,
        encoder: &Encoder,
        pre: &Precomputer,
        candidates: &[(u64, TokenSequence)],
        chunk: usize,
    ) -> Result<Self> {
        let (k, d) = (pre.strategy.k, encoder.d_model());
        let mut entries = Vec::with_capacity(candidates.len());
        for part in candidates.chunks(chunk.max(1)) {
            let g = Graph::no_grad();
            let s = Session::new(&g, params);
            let seqs: Vec<TokenSequence> = part.iter().map(|(_, c)| c.clone()).collect();
            let out = pre.forward(&s, encoder, &seqs)?;
            let context = out.context.value();
            let state = out.state.value();
            for (i, (id, _)) in part.iter().enumerate() {
                entries.push(CandidateCacheEntry {
                    id: *id,
                    context: Tensor::new([k, d], context.data()[i * k * d..(i + 1) * k * d].to_vec())?,
                    state: Tensor::new([d], state.row(i).to_vec())?,
                });
            }
        }
        Self::from_entries(pre.strategy.kind, k, d, entries)
    }

    pub fn kind(&self) -> StrategyKind {
        self.kind
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[CandidateCacheEntry<T>] {
        &self.entries
    }

    pub fn get(&self, id: u64) -> Option<&CandidateCacheEntry<T>> {
        self.index.get(&id).map(|&i| &self.entries[i])
    }

    /// Rows for `ids` in the given order: `([N, k, d], [N, d])`.
    pub fn lookup(&self, ids: &[u64]) -> Result<(Tensor<T>, Tensor<T>)> {
        let mut context = Vec::with_capacity(ids.len() * self.k * self.d);
        let mut state = Vec::with_capacity(ids.len() * self.d);
        for &id in ids {
            let e = self.get(id).ok_or(Error::UnknownCandidate(id))?;
            context.extend_from_slice(e.context.data());
            state.extend_from_slice(e.state.data());
        }
        Ok((
            Tensor::new([ids.len(), self.k, self.d], context)?,
            Tensor::new([ids.len(), self.d], state)?,
        ))
    }

    /// Exact serialized size for a cache of this shape.
    pub fn file_size(n: usize, k: usize, d: usize, width: usize) -> usize {
        CACHE_HEADER_BYTES + n * (8 + width * (k * d + d))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(Self::file_size(self.len(), self.k, self.d, T::BYTES));
        out.extend_from_slice(CACHE_MAGIC);
        out.extend_from_slice(&CACHE_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u64).to_le_bytes());
        out.extend_from_slice(&(self.k as u32).to_le_bytes());
        out.extend_from_slice(&(self.d as u32).to_le_bytes());
        out.push(T::BYTES as u8);
        out.push(self.kind.code());
        for e in &self.entries {
            out.extend_from_slice(&e.id.to_le_bytes());
            for &x in e.context.data().iter().chain(e.state.data()) {
                x.write_le(&mut out);
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let fail = |msg: String| Error::CacheFormat(msg);
        if bytes.len() < CACHE_HEADER_BYTES {
            return Err(fail(format!("truncated header ({} bytes)", bytes.len())));
        }
        if &bytes[..4] != CACHE_MAGIC {
            return Err(fail("bad magic".into()));
        }
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
        let version = u32_at(4);
        if version != CACHE_VERSION {
            return Err(fail(format!("unsupported version {version}")));
        }
        let n = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let k = u32_at(16) as usize;
        let d = u32_at(20) as usize;
        let width = bytes[24] as usize;
        if width != T::BYTES {
            return Err(fail(format!("float width {width} does not match {}", T::NAME)));
        }
        let kind = StrategyKind::from_code(bytes[25])?;
        let expected = n
            .checked_mul(8 + width * (k * d + d))
            .and_then(|b| b.checked_add(CACHE_HEADER_BYTES))
            .ok_or_else(|| fail("header sizes overflow".into()))?;
        if bytes.len() != expected {
            return Err(fail(format!("expected {expected} bytes, found {}", bytes.len())));
        }
        let mut pos = CACHE_HEADER_BYTES;
        let read_floats = |count: usize, pos: &mut usize| {
            let v: Vec<T> = (0..count)
                .map(|i| T::read_le(&bytes[*pos + i * width..]))
                .collect();
            *pos += count * width;
            v
        };
        let mut entries = Vec::with_capacity(n);
        let mut last = None;
        for _ in 0..n {
            let id = u64::from_le_bytes(bytes[pos..pos + 8].try_into().unwrap());
            pos += 8;
            if last.is_some_and(|l| id <= l) {
                return Err(fail(format!("ids not strictly increasing at {id}")));
            }
            last = Some(id);
            let context = Tensor::new([k, d], read_floats(k * d, &mut pos))?;
            let state = Tensor::new([d], read_floats(d, &mut pos))?;
            entries.push(CandidateCacheEntry { id, context, state });
        }
        Self::from_entries(kind, k, d, entries)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }

    /// FNV-1a over the serialized form.
    pub fn checksum(&self) -> u64 {
        self.to_bytes().iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| {
            (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
        })
    }
}
