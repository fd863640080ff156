//! Ranking and classification metrics, and model evaluation over a corpus.

use std::collections::BTreeMap;

use crate::bench::corpus::TokenizedRecord;
use crate::encoder::TokenSequence;
use crate::error::{Error, Result};
use crate::model::{Layout, Model};
use crate::numcore::Graph;
use crate::precompute::CandidateCache;
use crate::scalar::Scalar;

pub type MetricMap = BTreeMap<String, f64>;

/// 1-based rank of the best-ranked positive. Candidates are ordered by score
/// descending, ties by id ascending.
pub fn rank_of_first_positive(scores: &[(u64, f64)], positives: &[u64]) -> Option<usize> {
    let mut order: Vec<&(u64, f64)> = scores.iter().collect();
    order.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    order.iter().position(|(id, _)| positives.contains(id)).map(|p| p + 1)
}

/// `mrr`, `r1` (fraction ranked first) and `queries`.
pub fn ranking_metrics(queries: &[(Vec<(u64, f64)>, Vec<u64>)]) -> Result<MetricMap> {
    if queries.is_empty() {
        return Err(Error::Empty("evaluation set"));
    }
    let mut rr = 0.0;
    let mut top1 = 0usize;
    for (scores, positives) in queries {
        if let Some(rank) = rank_of_first_positive(scores, positives) {
            rr += 1.0 / rank as f64;
            top1 += (rank == 1) as usize;
        }
    }
    let n = queries.len() as f64;
    Ok(MetricMap::from([
        ("mrr".to_string(), rr / n),
        ("r1".to_string(), top1 as f64 / n),
        ("queries".to_string(), n),
    ]))
}

/// Index of the largest logit, ties to the lowest index.
pub fn argmax(logits: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in logits.iter().enumerate() {
        if x > logits[best] {
            best = i;
        }
    }
    best
}

pub fn accuracy(predictions: &[(Vec<f64>, usize)]) -> Result<MetricMap> {
    if predictions.is_empty() {
        return Err(Error::Empty("evaluation set"));
    }
    let correct = predictions.iter().filter(|(l, y)| argmax(l) == *y).count();
    Ok(MetricMap::from([
        ("accuracy".to_string(), correct as f64 / predictions.len() as f64),
        ("queries".to_string(), predictions.len() as f64),
    ]))
}

/// Per-record candidate scores, batching up to `batch` queries with equal
/// candidate counts into one grouped pass. With a cache, MixEncoder rows
/// come from it instead of being encoded.
pub fn score_records<T: Scalar>(
    model: &Model<T>,
    records: &[TokenizedRecord],
    cache: Option<&CandidateCache<T>>,
    batch: usize,
) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(records.len());
    let mut start = 0;
    while start < records.len() {
        let n = records[start].candidates.len();
        let mut end = start + 1;
        while end < records.len() && end - start < batch.max(1) && records[end].candidates.len() == n {
            end += 1;
        }
        let chunk = &records[start..end];
        let g = Graph::no_grad();
        let s = model.session(&g);
        let queries: Vec<TokenSequence> = chunk.iter().map(|r| r.query.clone()).collect();
        let reps = match cache {
            Some(c) => {
                let ids: Vec<u64> = chunk.iter().flat_map(|r| r.candidates.iter().map(|c| c.0)).collect();
                model.cached_reps(&s, c, &ids)?
            }
            None => {
                let cands: Vec<TokenSequence> =
                    chunk.iter().flat_map(|r| r.candidates.iter().map(|c| c.1.clone())).collect();
                model.candidate_reps(&s, &cands)?
            }
        };
        let scores = model.score(&s, &queries, &reps, Layout::Grouped)?.value();
        for row in scores.data().chunks(n) {
            out.push(row.iter().map(|x| x.to_f64_lossy()).collect());
        }
        start = end;
    }
    Ok(out)
}

/// Class logits per record.
pub fn classify_records<T: Scalar>(model: &Model<T>, records: &[TokenizedRecord], batch: usize) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(records.len());
    for chunk in records.chunks(batch.max(1)) {
        let g = Graph::no_grad();
        let s = model.session(&g);
        let queries: Vec<TokenSequence> = chunk.iter().map(|r| r.query.clone()).collect();
        let cands: Vec<TokenSequence> = chunk
            .iter()
            .map(|r| {
                r.candidates
                    .first()
                    .map(|c| c.1.clone())
                    .ok_or(Error::Empty("candidate set"))
            })
            .collect::<Result<_>>()?;
        let logits = model.classify(&s, &queries, &cands)?.value();
        let c = logits.last_dim();
        for row in logits.data().chunks(c) {
            out.push(row.iter().map(|x| x.to_f64_lossy()).collect());
        }
    }
    Ok(out)
}

/// Ranking metrics or accuracy, depending on whether records are labelled.
pub fn evaluate<T: Scalar>(
    model: &Model<T>,
    records: &[TokenizedRecord],
    cache: Option<&CandidateCache<T>>,
    batch: usize,
) -> Result<MetricMap> {
    if records.is_empty() {
        return Err(Error::Empty("evaluation set"));
    }
    if records[0].label.is_some() {
        let logits = classify_records(model, records, batch)?;
        let labelled: Vec<(Vec<f64>, usize)> = logits
            .into_iter()
            .zip(records)
            .map(|(l, r)| (l, r.label.unwrap_or(usize::MAX)))
            .collect();
        return accuracy(&labelled);
    }
    let scores = score_records(model, records, cache, batch)?;
    let ranked: Vec<(Vec<(u64, f64)>, Vec<u64>)> = scores
        .into_iter()
        .zip(records)
        .map(|(s, r)| (r.candidates.iter().map(|c| c.0).zip(s).collect(), r.positives.clone()))
        .collect();
    ranking_metrics(&ranked)
}
