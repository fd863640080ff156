//! Synthetic corpora and their line-delimited JSON form.
//!
//! Ranking queries carry one key word; the positive candidate repeats it and
//! every negative carries a different key. Filler words never act as keys.
//! The token-overlap variant draws keys from a large rare pool, so matching
//! depends on exact co-occurrence of words seen only a few times. In the
//! classification task the label follows from which key a candidate holds:
//! the query's key (entailment), its fixed partner (contradiction) or an
//! unrelated key (neutral).

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::encoder::{TokenSequence, Vocab};
use crate::error::{Error, Result};
use crate::numcore::Rng;

pub const ENTAILMENT: usize = 0;
pub const NEUTRAL: usize = 1;
pub const CONTRADICTION: usize = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CorpusTask {
    Ranking,
    Classification,
    TokenOverlap,
}

impl CorpusTask {
    pub fn parse(name: &str) -> Result<Self> {
        match name.replace('_', "-").as_str() {
            "ranking" => Ok(CorpusTask::Ranking),
            "classification" => Ok(CorpusTask::Classification),
            "token-overlap" => Ok(CorpusTask::TokenOverlap),
            _ => Err(Error::Config(format!("unknown task {name:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Candidate {
    pub id: u64,
    pub text: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Record {
    pub query_id: u64,
    pub query: String,
    pub candidates: Vec<Candidate>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub positive_ids: Vec<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<usize>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Corpus {
    pub records: Vec<Record>,
}

impl Corpus {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn is_classification(&self) -> bool {
        self.records.first().is_some_and(|r| r.label.is_some())
    }

    /// Every record is either labelled with one candidate or has exactly one
    /// positive among its candidates; a candidate id always maps to one text.
    pub fn validate(&self) -> Result<()> {
        if self.records.is_empty() {
            return Err(Error::Empty("corpus"));
        }
        let classification = self.is_classification();
        let mut texts: BTreeMap<u64, &str> = BTreeMap::new();
        for r in &self.records {
            let bad = |msg: &str| Error::InvalidArgument(format!("query {}: {msg}", r.query_id));
            if r.candidates.is_empty() {
                return Err(bad("no candidates"));
            }
            if classification {
                if r.label.is_none() || r.candidates.len() != 1 {
                    return Err(bad("classification records need one candidate and a label"));
                }
            } else {
                if r.positive_ids.len() != 1 {
                    return Err(bad("ranking records need exactly one positive"));
                }
                if !r.candidates.iter().any(|c| c.id == r.positive_ids[0]) {
                    return Err(bad("positive id is not a candidate"));
                }
            }
            let mut seen = HashSet::new();
            for c in &r.candidates {
                if !seen.insert(c.id) {
                    return Err(bad("duplicate candidate id"));
                }
                if let Some(prev) = texts.insert(c.id, &c.text) {
                    if prev != c.text {
                        return Err(bad("candidate id reused for a different text"));
                    }
                }
            }
        }
        Ok(())
    }

    /// Distinct candidates ordered by id.
    pub fn candidates(&self) -> Vec<Candidate> {
        let mut map = BTreeMap::new();
        for r in &self.records {
            for c in &r.candidates {
                map.entry(c.id).or_insert_with(|| c.text.clone());
            }
        }
        map.into_iter().map(|(id, text)| Candidate { id, text }).collect()
    }

    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        Self::read(text.as_bytes())
    }

    pub fn read(reader: impl std::io::Read) -> Result<Self> {
        let mut records = Vec::new();
        for line in BufReader::new(reader).lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            records.push(serde_json::from_str(&line)?);
        }
        Ok(Self { records })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path)?;
        f.write_all(self.to_jsonl()?.as_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read(fs::File::open(path)?)
    }

    pub fn tokenize(&self, vocab: &Vocab) -> Result<Vec<TokenizedRecord>> {
        self.records
            .iter()
            .map(|r| {
                Ok(TokenizedRecord {
                    query_id: r.query_id,
                    query: TokenSequence::new(vocab.tokenize(&r.query)?),
                    candidates: r
                        .candidates
                        .iter()
                        .map(|c| Ok((c.id, TokenSequence::new(vocab.tokenize(&c.text)?))))
                        .collect::<Result<_>>()?,
                    positives: r.positive_ids.clone(),
                    label: r.label,
                })
            })
            .collect()
    }
}

/// A record with word ids in place of text.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenizedRecord {
    pub query_id: u64,
    pub query: TokenSequence,
    pub candidates: Vec<(u64, TokenSequence)>,
    pub positives: Vec<u64>,
    pub label: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenConfig {
    pub task: CorpusTask,
    pub queries: usize,
    pub candidates: usize,
    pub query_len: usize,
    pub candidate_len: usize,
    /// Size of the key pool; ignored by the token-overlap task, whose keys are
    /// every non-filler word.
    pub keys: usize,
    /// Filler pool size for the token-overlap task.
    pub common_words: usize,
    pub vocab_size: usize,
    pub kmax: usize,
    pub seed: u64,
    /// Added to every query id; candidate ids derive from query ids.
    pub first_query_id: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            task: CorpusTask::Ranking,
            queries: 1000,
            candidates: 10,
            query_len: 8,
            candidate_len: 10,
            keys: 200,
            common_words: 100,
            vocab_size: 1000,
            kmax: 4,
            seed: 0,
            first_query_id: 0,
        }
    }
}

/// Word pools as vocabulary word indices.
struct Pools {
    keys: Vec<usize>,
    fillers: Vec<usize>,
}

impl GenConfig {
    fn pools(&self, vocab: &Vocab) -> Result<Pools> {
        let words = vocab.num_words();
        let (keys, fillers) = match self.task {
            CorpusTask::TokenOverlap => {
                if self.common_words < 2 || self.common_words + 2 > words {
                    return Err(Error::Config(format!(
                        "{} common words do not fit {words} vocabulary words",
                        self.common_words
                    )));
                }
                ((self.common_words..words).collect(), (0..self.common_words).collect())
            }
            _ => {
                let min_keys = if self.task == CorpusTask::Classification { 4 } else { 2 };
                if self.keys < min_keys || self.keys + 2 > words {
                    return Err(Error::Config(format!(
                        "{} keys do not fit {words} vocabulary words",
                        self.keys
                    )));
                }
                ((0..self.keys).collect(), (self.keys..words).collect())
            }
        };
        Ok(Pools { keys, fillers })
    }

    fn validate(&self) -> Result<()> {
        if self.query_len < 1 || self.candidate_len < 1 {
            return Err(Error::Config("sequence lengths must be positive".into()));
        }
        if self.task != CorpusTask::Classification && self.candidates < 2 {
            return Err(Error::Config("ranking needs at least 2 candidates per query".into()));
        }
        Ok(())
    }
}

fn sentence(vocab: &Vocab, words: &[usize]) -> String {
    words
        .iter()
        .map(|&w| vocab.token(vocab.first_word() + w as u32).expect("word index in range"))
        .collect::<Vec<_>>()
        .join(" ")
}

/// `len − 1` fillers with `key` at a random position.
fn with_key(rng: &mut Rng, pools: &Pools, len: usize, key: usize) -> Vec<usize> {
    let mut words: Vec<usize> = (0..len - 1).map(|_| pools.fillers[rng.below(pools.fillers.len())]).collect();
    words.insert(rng.below(len), key);
    words
}

/// Another key, different from `avoid`.
fn other_key(rng: &mut Rng, pools: &Pools, avoid: &[usize]) -> usize {
    loop {
        let k = pools.keys[rng.below(pools.keys.len())];
        if !avoid.contains(&k) {
            return k;
        }
    }
}

/// Partner of a key in the classification task (pairs `2i ↔ 2i+1`).
pub fn partner(key_index: usize) -> usize {
    key_index ^ 1
}

/// Generates a corpus fully determined by `cfg`.
pub fn gen_synthetic(cfg: &GenConfig) -> Result<Corpus> {
    cfg.validate()?;
    let vocab = Vocab::synthetic(cfg.vocab_size, cfg.kmax)?;
    let mut pools = cfg.pools(&vocab)?;
    if cfg.task == CorpusTask::Classification && pools.keys.len() % 2 == 1 {
        pools.keys.pop();
    }
    let mut rng = Rng::seed(cfg.seed);
    let mut records = Vec::with_capacity(cfg.queries);
    for q in 0..cfg.queries {
        let query_id = cfg.first_query_id + q as u64;
        let key_slot = rng.below(pools.keys.len());
        let key = pools.keys[key_slot];
        let query = sentence(&vocab, &with_key(&mut rng, &pools, cfg.query_len, key));
        let record = if cfg.task == CorpusTask::Classification {
            let label = rng.below(3);
            let partner_key = pools.keys[partner(key_slot)];
            let cand_key = match label {
                ENTAILMENT => key,
                CONTRADICTION => partner_key,
                _ => other_key(&mut rng, &pools, &[key, partner_key]),
            };
            Record {
                query_id,
                query,
                candidates: vec![Candidate {
                    id: query_id,
                    text: sentence(&vocab, &with_key(&mut rng, &pools, cfg.candidate_len, cand_key)),
                }],
                positive_ids: Vec::new(),
                label: Some(label),
            }
        } else {
            let positive_slot = rng.below(cfg.candidates);
            let base = query_id * cfg.candidates as u64;
            let candidates = (0..cfg.candidates)
                .map(|j| {
                    let k = if j == positive_slot {
                        key
                    } else {
                        other_key(&mut rng, &pools, &[key])
                    };
                    Candidate {
                        id: base + j as u64,
                        text: sentence(&vocab, &with_key(&mut rng, &pools, cfg.candidate_len, k)),
                    }
                })
                .collect();
            Record {
                query_id,
                query,
                candidates,
                positive_ids: vec![base + positive_slot as u64],
                label: None,
            }
        };
        records.push(record);
    }
    Ok(Corpus { records })
}
