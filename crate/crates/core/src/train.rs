//! Adam training with in-batch negatives for ranking and cross-entropy for
//! classification, a JSONL metrics log and the binary checkpoint format.

use std::collections::{BTreeMap, HashSet};
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::bench::corpus::TokenizedRecord;
use crate::bench::metrics::{evaluate, MetricMap};
use crate::encoder::TokenSequence;
use crate::error::{Error, Result};
use crate::heads::in_batch_negative_loss;
use crate::model::{Layout, Model, ModelConfig, ModelKind, TaskKind};
use crate::numcore::{Graph, ParamStore, Rng};
use crate::scalar::Scalar;
use crate::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"MIXK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Defaults to 64 for ranking, 16 for classification and 8 for the
    /// cross-encoder, whose in-batch score matrix needs `B²` joint encodes.
    pub batch_size: Option<usize>,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Fraction of all steps spent on linear warmup; the rest decays linearly.
    pub warmup_fraction: f64,
    /// Global gradient-norm clip.
    pub max_grad_norm: Option<f64>,
    pub max_steps: Option<usize>,
    pub eval_batch: usize,
    /// Stop after an evaluation where every listed metric reaches its value.
    pub stop_when: BTreeMap<String, f64>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: None,
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            warmup_fraction: 0.05,
            max_grad_norm: Some(1.0),
            max_steps: None,
            eval_batch: 64,
            stop_when: BTreeMap::new(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn batch_size_for(&self, config: &ModelConfig) -> usize {
        self.batch_size.unwrap_or(match (config.task, config.kind) {
            (TaskKind::Classification { .. }, _) => 16,
            (_, ModelKind::Cross) => 8,
            _ => 64,
        })
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad("lr must be finite and non-negative");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("Adam betas must lie in [0, 1)");
        }
        if !(self.eps > 0.0) {
            return bad("eps must be positive");
        }
        if !(0.0..=1.0).contains(&self.warmup_fraction) {
            return bad("warmup_fraction must lie in [0, 1]");
        }
        if self.batch_size == Some(0) || self.eval_batch == 0 {
            return bad("batch sizes must be positive");
        }
        Ok(())
    }
}

/// Learning rate at 0-based `step` of `total`: linear warmup, then linear
/// decay to zero.
pub fn lr_at(cfg: &TrainConfig, step: usize, total: usize) -> f64 {
    let total = total.max(1) as f64;
    let warmup = (cfg.warmup_fraction * total).ceil();
    let t = step as f64 + 1.0;
    if t <= warmup {
        cfg.lr * t / warmup
    } else {
        cfg.lr * ((total - t + 1.0) / (total - warmup + 1.0)).max(0.0)
    }
}

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam<T: Scalar> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub steps: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(params: &ParamStore<T>, beta1: f64, beta2: f64, eps: f64) -> Self {
        let zeros = || params.iter().map(|(_, _, t)| vec![T::zero(); t.numel()]).collect();
        Self {
            beta1,
            beta2,
            eps,
            steps: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    /// One update; parameters without a gradient are left alone.
    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &[Option<Tensor<T>>], lr: f64) {
        self.steps += 1;
        let c1 = 1.0 - self.beta1.powi(self.steps as i32);
        let c2 = 1.0 - self.beta2.powi(self.steps as i32);
        let (b1, b2) = (T::from_f64_lossy(self.beta1), T::from_f64_lossy(self.beta2));
        let step = T::from_f64_lossy(lr / c1);
        let c2 = T::from_f64_lossy(c2);
        let eps = T::from_f64_lossy(self.eps);
        let ids: Vec<_> = params.ids().collect();
        for (i, id) in ids.into_iter().enumerate() {
            let Some(g) = grads.get(i).and_then(Option::as_ref) else { continue };
            if lr == 0.0 {
                continue;
            }
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let w = params.get_mut(id).data_mut();
            for j in 0..w.len() {
                let gj = g.data()[j];
                m[j] = b1 * m[j] + (T::one() - b1) * gj;
                v[j] = b2 * v[j] + (T::one() - b2) * gj * gj;
                w[j] -= step * m[j] / ((v[j] / c2).sqrt() + eps);
            }
        }
    }
}

/// Scales gradients in place so their global L2 norm is at most `max`.
/// Returns the norm before clipping.
pub fn clip_grad_norm<T: Scalar>(grads: &mut [Option<Tensor<T>>], max: f64) -> f64 {
    let norm = grads
        .iter()
        .flatten()
        .flat_map(|g| g.data().iter())
        .map(|x| x.to_f64_lossy().powi(2))
        .sum::<f64>()
        .sqrt();
    if norm > max && norm > 0.0 {
        let s = T::from_f64_lossy(max / norm);
        for g in grads.iter_mut().flatten() {
            for x in g.data_mut() {
                *x *= s;
            }
        }
    }
    norm
}

/// Ranking examples are (query, positive) pairs whose negatives are the other
/// positives of the batch; classification examples carry a label.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TrainExample {
    pub query: TokenSequence,
    pub candidate_id: u64,
    pub candidate: TokenSequence,
    pub label: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TrainBatch {
    pub examples: Vec<TrainExample>,
}

impl TrainBatch {
    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    fn parts(&self) -> (Vec<TokenSequence>, Vec<TokenSequence>) {
        self.examples
            .iter()
            .map(|e| (e.query.clone(), e.candidate.clone()))
            .unzip()
    }
}

/// Training examples from tokenized records: the first positive for
/// ranking, the first candidate and its label for classification.
pub fn examples_from_records(records: &[TokenizedRecord], task: TaskKind) -> Result<Vec<TrainExample>> {
    records
        .iter()
        .map(|r| {
            let (id, cand) = match task {
                TaskKind::Ranking => {
                    let pos = r
                        .positives
                        .first()
                        .ok_or_else(|| Error::Config(format!("query {} has no positive", r.query_id)))?;
                    r.candidates
                        .iter()
                        .find(|c| c.0 == *pos)
                        .ok_or(Error::UnknownCandidate(*pos))?
                }
                TaskKind::Classification { num_classes } => {
                    let c = r.candidates.first().ok_or(Error::Empty("candidate set"))?;
                    match r.label {
                        Some(l) if l < num_classes => c,
                        _ => return Err(Error::Config(format!("query {} lacks a valid label", r.query_id))),
                    }
                }
            };
            Ok(TrainExample {
                query: r.query.clone(),
                candidate_id: *id,
                candidate: cand.clone(),
                label: if matches!(task, TaskKind::Ranking) { None } else { r.label },
            })
        })
        .collect()
}

/// Splits shuffled examples into batches of `size`. Ranking batches never
/// repeat a candidate id; a clashing example moves to the next batch.
/// Ranking batches smaller than 2 are dropped.
pub fn make_batches(examples: &[TrainExample], size: usize, ranking: bool, rng: &mut Rng) -> Vec<TrainBatch> {
    let mut order: Vec<usize> = (0..examples.len()).collect();
    rng.shuffle(&mut order);
    let mut batches = Vec::new();
    let mut pending: Vec<usize> = Vec::new();
    let mut queue = order.into_iter();
    loop {
        let mut current = Vec::new();
        let mut seen = HashSet::new();
        let mut carry = Vec::new();
        for i in pending.drain(..).chain(queue.by_ref()) {
            if ranking && !seen.insert(examples[i].candidate_id) {
                carry.push(i);
                continue;
            }
            current.push(i);
            if current.len() == size {
                break;
            }
        }
        pending = carry;
        if current.is_empty() {
            break;
        }
        let done = current.len() < size && pending.is_empty();
        if !ranking || current.len() >= 2 {
            batches.push(TrainBatch {
                examples: current.iter().map(|&i| examples[i].clone()).collect(),
            });
        }
        if done {
            break;
        }
    }
    batches
}

/// Loss and parameter gradients of one batch.
pub fn batch_gradients<T: Scalar>(model: &Model<T>, batch: &TrainBatch) -> Result<(f64, Vec<Option<Tensor<T>>>)> {
    let g = Graph::new();
    let s = model.session(&g);
    let (queries, cands) = batch.parts();
    let loss = match model.config.task {
        TaskKind::Ranking => {
            let scores = model.score_candidates(&s, &queries, &cands, Layout::Shared)?;
            in_batch_negative_loss(scores)?
        }
        TaskKind::Classification { .. } => {
            let labels: Vec<usize> = batch.examples.iter().map(|e| e.label.unwrap_or(0)).collect();
            model.classify(&s, &queries, &cands)?.cross_entropy(&labels)?
        }
    };
    let value = loss.value().item().to_f64_lossy();
    g.backward(loss)?;
    Ok((value, s.grads()))
}

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum LogRecord {
    Step {
        step: usize,
        epoch: usize,
        loss: f64,
        lr: f64,
    },
    Eval {
        step: usize,
        epoch: usize,
        metric: String,
        value: f64,
    },
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainReport {
    pub losses: Vec<f64>,
    pub evals: Vec<(usize, MetricMap)>,
    pub steps: usize,
    pub epochs: usize,
    pub stopped_early: bool,
}

impl TrainReport {
    pub fn final_metrics(&self) -> Option<&MetricMap> {
        self.evals.last().map(|e| &e.1)
    }
}

fn write_log(log: &mut Option<&mut dyn Write>, rec: &LogRecord) -> Result<()> {
    if let Some(w) = log.as_mut() {
        serde_json::to_writer(&mut **w, rec)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

/// Trains `model` in place. With an evaluation set, metrics are computed and
/// logged after every epoch. Deterministic for a fixed model and seed.
pub fn train<T: Scalar>(
    model: &mut Model<T>,
    train_records: &[TokenizedRecord],
    eval_records: Option<&[TokenizedRecord]>,
    cfg: &TrainConfig,
    mut log: Option<&mut dyn Write>,
) -> Result<TrainReport> {
    cfg.validate()?;
    let task = model.config.task;
    let ranking = matches!(task, TaskKind::Ranking);
    let examples = examples_from_records(train_records, task)?;
    if examples.is_empty() {
        return Err(Error::Empty("training set"));
    }
    let size = cfg.batch_size_for(&model.config);
    if ranking && size < 2 {
        return Err(Error::InvalidArgument(format!("in-batch negatives need B >= 2, got {size}")));
    }
    let mut rng = Rng::seed(cfg.seed).split(10);
    let mut epoch_batches = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        epoch_batches.push(make_batches(&examples, size, ranking, &mut rng));
    }
    let mut total: usize = epoch_batches.iter().map(Vec::len).sum();
    if let Some(m) = cfg.max_steps {
        total = total.min(m);
    }
    let mut adam = Adam::new(&model.params, cfg.beta1, cfg.beta2, cfg.eps);
    let mut report = TrainReport::default();
    'epochs: for (epoch, batches) in epoch_batches.into_iter().enumerate() {
        for batch in &batches {
            if report.steps >= total {
                break 'epochs;
            }
            let (loss, mut grads) = batch_gradients(model, batch)?;
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss {
                    step: report.steps,
                    loss,
                });
            }
            if let Some(max) = cfg.max_grad_norm {
                clip_grad_norm(&mut grads, max);
            }
            let lr = lr_at(cfg, report.steps, total);
            adam.step(&mut model.params, &grads, lr);
            write_log(
                &mut log,
                &LogRecord::Step {
                    step: report.steps,
                    epoch,
                    loss,
                    lr,
                },
            )?;
            report.losses.push(loss);
            report.steps += 1;
        }
        report.epochs = epoch + 1;
        if let Some(eval) = eval_records {
            let metrics = evaluate(model, eval, None, cfg.eval_batch)?;
            for (metric, &value) in &metrics {
                write_log(
                    &mut log,
                    &LogRecord::Eval {
                        step: report.steps,
                        epoch,
                        metric: metric.clone(),
                        value,
                    },
                )?;
            }
            let done = !cfg.stop_when.is_empty()
                && cfg
                    .stop_when
                    .iter()
                    .all(|(k, v)| metrics.get(k).is_some_and(|m| m >= v));
            report.evals.push((report.steps, metrics));
            if done {
                report.stopped_early = epoch + 1 < cfg.epochs;
                break;
            }
        }
    }
    Ok(report)
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Checkpoint(format!("{v} does not fit in u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

/// Checkpoint bytes: magic, version, model config as JSON, then every
/// parameter as (name, rank, dims, f32 data), all little-endian.
pub fn checkpoint_bytes<T: Scalar>(model: &Model<T>) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    let config = serde_json::to_vec(&model.config)?;
    put_u32(&mut out, config.len())?;
    out.extend_from_slice(&config);
    put_u32(&mut out, model.params.len())?;
    for (_, name, t) in model.params.iter() {
        put_u32(&mut out, name.len())?;
        out.extend_from_slice(name.as_bytes());
        put_u32(&mut out, t.rank())?;
        for &d in t.shape() {
            put_u32(&mut out, d)?;
        }
        for &x in t.data() {
            out.extend_from_slice(&(x.to_f64_lossy() as f32).to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }
}

pub fn model_from_checkpoint<T: Scalar>(bytes: &[u8]) -> Result<Model<T>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = r.u32()? as u32;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let len = r.u32()?;
    let config: ModelConfig = serde_json::from_slice(r.take(len)?)?;
    let mut model = Model::<T>::new(config, 0)?;
    let count = r.u32()?;
    if count != model.params.len() {
        return Err(Error::Checkpoint(format!(
            "expected {} parameters, found {count}",
            model.params.len()
        )));
    }
    let mut seen = HashSet::new();
    for _ in 0..count {
        let len = r.u32()?;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::Checkpoint("parameter name is not UTF-8".into()))?
            .to_string();
        let rank = r.u32()?;
        let shape = (0..rank).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
        let numel: usize = shape.iter().product();
        let raw = r.take(numel.checked_mul(4).ok_or_else(|| Error::Checkpoint("oversized tensor".into()))?)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| T::from_f64_lossy(f32::from_le_bytes(c.try_into().unwrap()) as f64))
            .collect();
        let id = model
            .params
            .find(&name)
            .ok_or_else(|| Error::Checkpoint(format!("unknown parameter {name}")))?;
        if !seen.insert(id) {
            return Err(Error::Checkpoint(format!("duplicate parameter {name}")));
        }
        model
            .params
            .set(id, Tensor::new(shape, data)?)
            .map_err(|e| Error::Checkpoint(format!("{name}: {e}")))?;
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint("trailing bytes".into()));
    }
    Ok(model)
}

pub fn save_checkpoint<T: Scalar>(model: &Model<T>, path: &Path) -> Result<()> {
    std::fs::write(path, checkpoint_bytes(model)?)?;
    Ok(())
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<Model<T>> {
    model_from_checkpoint(&std::fs::read(path)?)
}
