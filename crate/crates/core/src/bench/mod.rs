//! Corpus generation, evaluation metrics, the closed-form cost model and the
//! latency benchmark.

pub mod corpus;
pub mod cost;
pub mod latency;
pub mod metrics;

pub use corpus::{gen_synthetic, Corpus, CorpusTask, GenConfig, Record, TokenizedRecord};
pub use cost::{cost_eval, Cost, CostInputs, CostKind};
pub use latency::{bench_latency, BenchConfig, BenchReport, BenchRow};
pub use metrics::{evaluate, ranking_metrics, score_records, MetricMap};

use std::collections::BTreeMap;

use crate::encoder::TokenSequence;
use crate::error::Result;
use crate::model::{Layout, Model};
use crate::numcore::{FlopCounter, Phase};
use crate::scalar::Scalar;

/// Online MACs of scoring `queries` against `candidates` whose
/// representations were computed beforehand.
pub fn flop_count<T: Scalar>(
    model: &Model<T>,
    queries: &[TokenSequence],
    candidates: &[TokenSequence],
) -> Result<FlopCounter> {
    let frozen = model.freeze_candidates(candidates, 256)?;
    let (_, flops) = model.score_frozen(queries, &frozen, Layout::Shared, candidates.len())?;
    Ok(flops)
}

/// MACs grouped as query encoding, candidate interaction and head.
pub fn flop_partition(flops: &FlopCounter) -> BTreeMap<&'static str, u64> {
    BTreeMap::from([
        ("query-encoding", flops.phase_macs(Phase::QueryEncoding)),
        ("candidate-interaction", flops.candidate_interaction_macs()),
        ("head", flops.phase_macs(Phase::Head)),
        ("other", flops.phase_macs(Phase::Other) + flops.phase_macs(Phase::CandidateEncoding)),
    ])
}
