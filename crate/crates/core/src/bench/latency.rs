//! Wall-clock scoring benchmark: one query against `N` candidates whose
//! representations are computed before timing starts.

use std::fmt::Write as _;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::encoder::{EncoderConfig, TokenSequence, FIRST_SPECIAL};
use crate::error::{Error, Result};
use crate::model::{Layout, Model, ModelConfig, ModelKind};
use crate::numcore::Rng;
use crate::precompute::CandidateCache;
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchConfig {
    pub models: Vec<ModelKind>,
    pub n_list: Vec<usize>,
    /// Timed runs per (model, N); the median is reported.
    pub reps: usize,
    pub warmups: usize,
    /// Queries scored per run.
    pub queries: usize,
    pub query_len: usize,
    pub candidate_len: usize,
    pub encoder: EncoderConfig,
    pub kmax: usize,
    /// Candidates per graph for the cross-encoder, bounding memory.
    pub cross_chunk: usize,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            models: vec![ModelKind::Cross, ModelKind::Dual, ModelKind::MixA, ModelKind::MixB, ModelKind::MixC],
            n_list: vec![10, 100, 1000],
            reps: 5,
            warmups: 2,
            queries: 10,
            query_len: 32,
            candidate_len: 32,
            encoder: EncoderConfig {
                max_len: 128,
                ..EncoderConfig::default()
            },
            kmax: 4,
            cross_chunk: 100,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub model: ModelKind,
    pub n: usize,
    pub median_ms: f64,
    pub runs_ms: Vec<f64>,
    /// Multiply-accumulates of one run (all queries).
    pub macs: u64,
    pub speedup_vs_cross: Option<f64>,
    /// Pre-computed candidate storage: cache file size for MixEncoder,
    /// in-memory representation size otherwise.
    pub cache_bytes: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub config: BenchConfig,
    pub rows: Vec<BenchRow>,
}

impl BenchReport {
    pub fn row(&self, model: ModelKind, n: usize) -> Option<&BenchRow> {
        self.rows.iter().find(|r| r.model == model && r.n == n)
    }

    pub fn table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<8} {:>6} {:>12} {:>14} {:>10} {:>12}",
            "model", "N", "median ms", "MACs", "speedup", "cache bytes"
        );
        for r in &self.rows {
            let speedup = r.speedup_vs_cross.map_or("-".to_string(), |s| format!("{s:.1}x"));
            let _ = writeln!(
                out,
                "{:<8} {:>6} {:>12.3} {:>14} {:>10} {:>12}",
                r.model.name(),
                r.n,
                r.median_ms,
                r.macs,
                speedup,
                r.cache_bytes
            );
        }
        out
    }
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

fn random_words(rng: &mut Rng, len: usize, first_word: u32, vocab: usize) -> TokenSequence {
    let span = vocab - first_word as usize;
    TokenSequence::new((0..len).map(|_| first_word + rng.below(span) as u32).collect())
}

/// Times every model at every `N`. Candidate representations (the cache for
/// MixEncoder) are built before timing; tokenization is never timed.
pub fn bench_latency<T: Scalar>(cfg: &BenchConfig) -> Result<BenchReport> {
    if cfg.reps < 5 {
        return Err(Error::InvalidArgument(format!("reps must be at least 5, got {}", cfg.reps)));
    }
    if cfg.warmups < 2 {
        return Err(Error::InvalidArgument(format!("warmups must be at least 2, got {}", cfg.warmups)));
    }
    if cfg.queries == 0 || cfg.n_list.is_empty() || cfg.models.is_empty() {
        return Err(Error::InvalidArgument("nothing to benchmark".into()));
    }
    let first_word = FIRST_SPECIAL + cfg.kmax as u32;
    if first_word as usize >= cfg.encoder.vocab_size {
        return Err(Error::Config("vocabulary too small".into()));
    }
    let mut rng = Rng::seed(cfg.seed);
    let queries: Vec<TokenSequence> = (0..cfg.queries)
        .map(|_| random_words(&mut rng, cfg.query_len, first_word, cfg.encoder.vocab_size))
        .collect();
    let max_n = *cfg.n_list.iter().max().unwrap();
    let candidates: Vec<TokenSequence> = (0..max_n)
        .map(|_| random_words(&mut rng, cfg.candidate_len, first_word, cfg.encoder.vocab_size))
        .collect();

    let mut rows = Vec::new();
    for &kind in &cfg.models {
        let model = Model::<T>::new(
            ModelConfig {
                kind,
                encoder: cfg.encoder.clone(),
                kmax: cfg.kmax,
                ..ModelConfig::default()
            },
            cfg.seed,
        )?;
        for &n in &cfg.n_list {
            let cands = &candidates[..n];
            let (frozen, cache_bytes) = if let Some(m) = model.mix() {
                let items: Vec<(u64, TokenSequence)> =
                    cands.iter().enumerate().map(|(i, c)| (i as u64, c.clone())).collect();
                let cache = model.build_cache(&items, 100)?;
                let ids: Vec<u64> = (0..n as u64).collect();
                let bytes = CandidateCache::<T>::file_size(n, m.precomputer.strategy.k, model.encoder.d_model(), T::BYTES);
                (crate::model::FrozenReps::from_cache(&cache, &ids)?, bytes)
            } else {
                let f = model.freeze_candidates(cands, 100)?;
                let bytes = f.bytes();
                (f, bytes)
            };
            // Only the cross-encoder is chunked; chunking any other model would
            // re-encode the query once per chunk.
            let chunk = if kind == ModelKind::Cross { cfg.cross_chunk } else { n };
            let mut macs = 0;
            let mut run = || -> Result<f64> {
                let start = Instant::now();
                let mut total = 0;
                for q in &queries {
                    let (_, flops) = model.score_frozen(std::slice::from_ref(q), &frozen, Layout::Shared, chunk)?;
                    total += flops.total_macs();
                }
                macs = total;
                Ok(start.elapsed().as_secs_f64() * 1e3)
            };
            for _ in 0..cfg.warmups {
                run()?;
            }
            let runs_ms = (0..cfg.reps).map(|_| run()).collect::<Result<Vec<_>>>()?;
            rows.push(BenchRow {
                model: kind,
                n,
                median_ms: median(&runs_ms),
                runs_ms,
                macs,
                speedup_vs_cross: None,
                cache_bytes,
            });
        }
    }
    let cross: Vec<(usize, f64)> = rows
        .iter()
        .filter(|r| r.model == ModelKind::Cross)
        .map(|r| (r.n, r.median_ms))
        .collect();
    for r in &mut rows {
        if let Some(&(_, c)) = cross.iter().find(|(n, _)| *n == r.n) {
            r.speedup_vs_cross = Some(c / r.median_ms);
        }
    }
    Ok(BenchReport {
        config: cfg.clone(),
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn median_of_odd_and_even() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
    }

    #[test]
    fn too_few_reps_rejected() {
        let cfg = BenchConfig {
            reps: 4,
            ..BenchConfig::default()
        };
        assert!(bench_latency::<f32>(&cfg).is_err());
        let cfg = BenchConfig {
            warmups: 1,
            ..BenchConfig::default()
        };
        assert!(bench_latency::<f32>(&cfg).is_err());
    }

    #[test]
    fn query_is_encoded_once_whatever_the_candidate_count() {
        let cfg = BenchConfig {
            models: vec![ModelKind::Cross, ModelKind::Dual, ModelKind::MixA],
            n_list: vec![3, 9],
            queries: 1,
            query_len: 4,
            candidate_len: 4,
            encoder: EncoderConfig {
                vocab_size: 50,
                d_model: 8,
                heads: 2,
                num_layers: 2,
                ffn_inner: 8,
                max_len: 16,
            },
            cross_chunk: 2,
            ..BenchConfig::default()
        };
        let r = bench_latency::<f32>(&cfg).unwrap();
        let macs = |k, n| r.row(k, n).unwrap().macs;
        assert_eq!(macs(ModelKind::Dual, 3), macs(ModelKind::Dual, 9));
        assert_eq!(macs(ModelKind::Cross, 9), 3 * macs(ModelKind::Cross, 3));
        let interaction = macs(ModelKind::MixA, 9) - macs(ModelKind::MixA, 3);
        assert_eq!(macs(ModelKind::MixA, 3) - interaction / 2, macs(ModelKind::Dual, 3));
        assert!(r.table().lines().count() == 7);
    }
}
