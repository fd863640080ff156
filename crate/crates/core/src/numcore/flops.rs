//! Matmul FLOP instrumentation.
//!
//! Every forward matmul on a [`Graph`](super::Graph) adds its
//! multiply-accumulate count to the bucket named by the graph's current
//! [`Phase`] and [`Role`]. Backward passes are not counted.

use std::collections::BTreeMap;
use std::fmt;

use serde::Serialize;

/// Which part of the scoring pipeline a matmul belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub enum Phase {
    Other,
    /// Token-level encoding of the query (transformer layers and the query
    /// path of interaction layers).
    QueryEncoding,
    /// Offline encoding of candidates, or joint pair encoding for the
    /// cross-encoder.
    CandidateEncoding,
    /// Candidate-to-query cross-attention over context embeddings.
    CrossAttention,
    /// Per-candidate query-state extraction and gated fusion.
    QueryState,
    /// Scoring and classification heads.
    Head,
}

impl Phase {
    /// Whether the phase scales with the number of candidates inside an
    /// interaction layer.
    pub fn is_candidate_interaction(self) -> bool {
        matches!(self, Phase::CrossAttention | Phase::QueryState)
    }
}

/// What a matmul computes inside its phase.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub enum Role {
    Other,
    QueryProjection,
    KeyValueProjection,
    OutputProjection,
    AttentionScores,
    AttentionMix,
    FeedForward,
    Gate,
}

/// Multiply-accumulate counts keyed by (phase, role).
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct FlopCounter {
    macs: BTreeMap<(Phase, Role), u64>,
}

impl FlopCounter {
    pub fn add(&mut self, phase: Phase, role: Role, macs: u64) {
        *self.macs.entry((phase, role)).or_default() += macs;
    }

    pub fn macs(&self, phase: Phase, role: Role) -> u64 {
        self.macs.get(&(phase, role)).copied().unwrap_or(0)
    }

    pub fn phase_macs(&self, phase: Phase) -> u64 {
        self.macs
            .iter()
            .filter(|((p, _), _)| *p == phase)
            .map(|(_, v)| v)
            .sum()
    }

    pub fn total_macs(&self) -> u64 {
        self.macs.values().sum()
    }

    /// FLOPs counting one multiply and one add per MAC.
    pub fn total_flops(&self) -> u64 {
        2 * self.total_macs()
    }

    pub fn candidate_interaction_macs(&self) -> u64 {
        self.macs
            .iter()
            .filter(|((p, _), _)| p.is_candidate_interaction())
            .map(|(_, v)| v)
            .sum()
    }

    /// Cost of a phase under the attention-module accounting of the
    /// complexity table: attention-score products plus one `d×d` projection
    /// per attending row (the query projection). Key/value/output projections,
    /// the value mix and feed-forward blocks are dropped there as constant
    /// factors.
    pub fn attention_module_macs(&self, phase: Phase) -> u64 {
        self.macs(phase, Role::AttentionScores) + self.macs(phase, Role::QueryProjection)
    }

    pub fn merge(&mut self, other: &FlopCounter) {
        for (&(p, r), &v) in &other.macs {
            self.add(p, r, v);
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (Phase, Role, u64)> + '_ {
        self.macs.iter().map(|(&(p, r), &v)| (p, r, v))
    }

    /// Per-phase MAC totals, for reporting.
    pub fn by_phase(&self) -> BTreeMap<Phase, u64> {
        let mut out = BTreeMap::new();
        for (&(p, _), &v) in &self.macs {
            *out.entry(p).or_default() += v;
        }
        out
    }
}

impl fmt::Display for FlopCounter {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (phase, macs) in self.by_phase() {
            writeln!(f, "{phase:?}: {macs} MACs")?;
        }
        Ok(())
    }
}
