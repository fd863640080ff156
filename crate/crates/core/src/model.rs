//! Model configuration and the scoring models: MixEncoder and the dual,
//! cross, poly and MaxSim baselines on a shared transformer backbone.
//!
//! Models consume word-id sequences without special tokens; each model adds
//! its own framing (`[CLS]` for pooled encoders, `[S_1..S_k]` for
//! pre-computation, `[CLS] q [SEP] c [SEP]` for the cross-encoder).

use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::encoder::{Encoded, Encoder, EncoderConfig, TokenSequence};
use crate::error::{Error, Result};
use crate::heads::{
    dual_score, maxsim_score, poly_score, rank_score, AblationFlags, ClassifierHead, Eq6Head, PolyCodes, ScoreHead,
};
use crate::interaction::{run_schedule, variant_preset, InteractionLayer, LayerSchedule, ScheduleOutput, Variant};
use crate::numcore::{FlopCounter, Graph, Linear, ParamStore, Phase, Rng, Session, Var};
use crate::precompute::{CandidateCache, PrecomputeStrategy, Precomputed, Precomputer, StrategyKind};
use crate::scalar::Scalar;
use crate::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    MixA,
    MixB,
    MixC,
    Dual,
    Cross,
    Poly,
    #[serde(rename = "maxsim")]
    MaxSim,
}

impl ModelKind {
    pub const ALL: [ModelKind; 7] = [
        ModelKind::MixA,
        ModelKind::MixB,
        ModelKind::MixC,
        ModelKind::Dual,
        ModelKind::Cross,
        ModelKind::Poly,
        ModelKind::MaxSim,
    ];

    pub fn parse(name: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == name)
            .ok_or_else(|| Error::Config(format!("unknown model {name:?}")))
    }

    pub fn name(self) -> &'static str {
        match self {
            ModelKind::MixA => "mix-a",
            ModelKind::MixB => "mix-b",
            ModelKind::MixC => "mix-c",
            ModelKind::Dual => "dual",
            ModelKind::Cross => "cross",
            ModelKind::Poly => "poly",
            ModelKind::MaxSim => "maxsim",
        }
    }

    pub fn variant(self) -> Option<Variant> {
        match self {
            ModelKind::MixA => Some(Variant::A),
            ModelKind::MixB => Some(Variant::B),
            ModelKind::MixC => Some(Variant::C),
            _ => None,
        }
    }

    pub fn is_mix(self) -> bool {
        self.variant().is_some()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum TaskKind {
    Ranking,
    Classification { num_classes: usize },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub kind: ModelKind,
    pub task: TaskKind,
    pub encoder: EncoderConfig,
    /// Special tokens reserved in the vocabulary for the S strategy.
    pub kmax: usize,
    pub strategy: StrategyKind,
    /// Overrides the variant's context-embedding count.
    pub k: Option<usize>,
    /// Overrides the variant's interaction positions (1-based).
    pub interaction_layers: Option<Vec<usize>>,
    pub interaction_ffn_inner: Option<usize>,
    pub poly_codes: usize,
    pub ablation: AblationFlags,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            kind: ModelKind::MixA,
            task: TaskKind::Ranking,
            encoder: EncoderConfig::default(),
            kmax: 4,
            strategy: StrategyKind::S,
            k: None,
            interaction_layers: None,
            interaction_ffn_inner: None,
            poly_codes: 16,
            ablation: AblationFlags::default(),
        }
    }
}

impl ModelConfig {
    pub fn new(kind: ModelKind) -> Self {
        Self {
            kind,
            ..Self::default()
        }
    }

    /// Interaction schedule and `k` for MixEncoder kinds.
    pub fn schedule(&self) -> Result<(LayerSchedule, usize)> {
        let variant = self
            .kind
            .variant()
            .ok_or_else(|| Error::Config(format!("{} has no interaction schedule", self.kind.name())))?;
        let (mut schedule, mut k) = variant_preset(variant, self.encoder.num_layers)?;
        if let Some(positions) = &self.interaction_layers {
            schedule = LayerSchedule::new(self.encoder.num_layers, positions.iter().copied())?;
        }
        if let Some(kk) = self.k {
            k = kk;
        }
        Ok((schedule, k))
    }

    pub fn validate(&self) -> Result<()> {
        self.ablation.validate()?;
        if self.encoder.d_model % self.encoder.heads.max(1) != 0 || self.encoder.heads == 0 {
            return Err(Error::Config(format!(
                "d_model {} not divisible by {} heads",
                self.encoder.d_model, self.encoder.heads
            )));
        }
        if crate::encoder::FIRST_SPECIAL as usize + self.kmax >= self.encoder.vocab_size {
            return Err(Error::Config("vocabulary too small for the reserved tokens".into()));
        }
        if let TaskKind::Classification { num_classes } = self.task {
            if num_classes < 2 {
                return Err(Error::Config("classification needs at least 2 classes".into()));
            }
            if matches!(self.kind, ModelKind::Poly | ModelKind::MaxSim) {
                return Err(Error::Config(format!(
                    "{} supports ranking only",
                    self.kind.name()
                )));
            }
        }
        if self.kind == ModelKind::Poly && self.poly_codes == 0 {
            return Err(Error::Config("poly needs at least one code".into()));
        }
        if self.kind.is_mix() {
            let (_, k) = self.schedule()?;
            PrecomputeStrategy {
                kind: self.strategy,
                k,
            }
            .validate(self.kmax)?;
        }
        Ok(())
    }

    fn classes(&self) -> Option<usize> {
        match self.task {
            TaskKind::Ranking => None,
            TaskKind::Classification { num_classes } => Some(num_classes),
        }
    }
}

/// Parameters specific to MixEncoder.
#[derive(Clone, Debug)]
pub struct MixParts {
    pub precomputer: Precomputer,
    pub schedule: LayerSchedule,
    pub layers: Vec<InteractionLayer>,
    pub eq6: Eq6Head,
    /// `h0 → e` replacement used when E is ablated.
    pub state_projection: Linear,
    pub classifier: Option<ClassifierHead>,
}

#[derive(Clone, Debug)]
pub enum Architecture {
    Mix(MixParts),
    Dual { classifier: Option<ClassifierHead> },
    Cross { head: ScoreHead },
    Poly { codes: PolyCodes },
    MaxSim,
}

/// Candidate representations ready for scoring.
#[derive(Clone, Debug)]
pub enum CandidateReps<'g, T: Scalar> {
    /// Pre-computed context embeddings and states.
    Context(Precomputed<'g, T>),
    /// Pooled vectors `[N, d]`.
    Vector(Var<'g, T>),
    /// Token states `[N, t, d]` with mask.
    Tokens(Encoded<'g, T>),
    /// Raw word sequences, encoded jointly with the query.
    Text(Vec<TokenSequence>),
}

impl<'g, T: Scalar> CandidateReps<'g, T> {
    pub fn len(&self) -> usize {
        match self {
            CandidateReps::Context(p) => p.context.shape()[0],
            CandidateReps::Vector(v) => v.shape()[0],
            CandidateReps::Tokens(e) => e.batch,
            CandidateReps::Text(t) => t.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Candidate representations detached from any graph, so repeated scoring
/// re-uses them without copying.
#[derive(Clone, Debug)]
pub enum FrozenReps<T> {
    Context { context: Rc<Tensor<T>>, state: Rc<Tensor<T>> },
    Vector(Rc<Tensor<T>>),
    Tokens { hidden: Rc<Tensor<T>>, mask: Vec<bool> },
    Text(Vec<TokenSequence>),
}

impl<T: Scalar> FrozenReps<T> {
    pub fn len(&self) -> usize {
        match self {
            FrozenReps::Context { context, .. } => context.shape()[0],
            FrozenReps::Vector(v) => v.shape()[0],
            FrozenReps::Tokens { hidden, .. } => hidden.shape()[0],
            FrozenReps::Text(t) => t.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Bytes held by the representation tensors.
    pub fn bytes(&self) -> usize {
        match self {
            FrozenReps::Context { context, state } => (context.numel() + state.numel()) * T::BYTES,
            FrozenReps::Vector(v) => v.numel() * T::BYTES,
            FrozenReps::Tokens { hidden, .. } => hidden.numel() * T::BYTES,
            FrozenReps::Text(_) => 0,
        }
    }

    /// Rows `start..start + len`.
    fn slice(&self, start: usize, len: usize) -> Result<Self> {
        let rows = |t: &Tensor<T>| -> Result<Rc<Tensor<T>>> {
            let per: usize = t.shape()[1..].iter().product();
            let mut shape = t.shape().to_vec();
            shape[0] = len;
            Ok(Rc::new(Tensor::new(shape, t.data()[start * per..(start + len) * per].to_vec())?))
        };
        Ok(match self {
            FrozenReps::Context { context, state } => FrozenReps::Context {
                context: rows(context)?,
                state: rows(state)?,
            },
            FrozenReps::Vector(v) => FrozenReps::Vector(rows(v)?),
            FrozenReps::Tokens { hidden, mask } => {
                let t = hidden.shape()[1];
                FrozenReps::Tokens {
                    hidden: rows(hidden)?,
                    mask: mask[start * t..(start + len) * t].to_vec(),
                }
            }
            FrozenReps::Text(texts) => FrozenReps::Text(texts[start..start + len].to_vec()),
        })
    }

    /// Constant leaves on `g`.
    pub fn thaw<'g>(&self, g: &'g Graph<T>) -> CandidateReps<'g, T> {
        match self {
            FrozenReps::Context { context, state } => CandidateReps::Context(Precomputed {
                context: g.leaf_rc(context.clone(), false),
                state: g.leaf_rc(state.clone(), false),
            }),
            FrozenReps::Vector(v) => CandidateReps::Vector(g.leaf_rc(v.clone(), false)),
            FrozenReps::Tokens { hidden, mask } => {
                let shape = hidden.shape();
                CandidateReps::Tokens(Encoded {
                    hidden: g.leaf_rc(hidden.clone(), false),
                    mask: mask.clone(),
                    batch: shape[0],
                    len: shape[1],
                })
            }
            FrozenReps::Text(t) => CandidateReps::Text(t.clone()),
        }
    }

    /// Cached MixEncoder rows for `ids`.
    pub fn from_cache(cache: &CandidateCache<T>, ids: &[u64]) -> Result<Self> {
        let (context, state) = cache.lookup(ids)?;
        Ok(FrozenReps::Context {
            context: Rc::new(context),
            state: Rc::new(state),
        })
    }
}

fn concat_rows<T: Scalar>(parts: &[Rc<Tensor<T>>]) -> Result<Rc<Tensor<T>>> {
    let mut shape = parts[0].shape().to_vec();
    shape[0] = parts.iter().map(|p| p.shape()[0]).sum();
    let data = parts.iter().flat_map(|p| p.data().iter().copied()).collect();
    Ok(Rc::new(Tensor::new(shape, data)?))
}

/// How candidate rows map onto queries.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Layout {
    /// Every query is scored against all rows.
    Shared,
    /// Query `b` owns rows `b·N..(b+1)·N`.
    Grouped,
}

/// `[R, rest..]` → `[B, N, rest..]`.
fn group<'g, T: Scalar>(v: Var<'g, T>, batch: usize, layout: Layout) -> Result<Var<'g, T>> {
    let shape = v.shape();
    let rows = shape[0];
    let rest = &shape[1..];
    match layout {
        Layout::Shared => {
            let mut one = vec![1, rows];
            one.extend_from_slice(rest);
            let mut full = vec![batch, rows];
            full.extend_from_slice(rest);
            v.reshape(&one)?.broadcast_to(&full)
        }
        Layout::Grouped => {
            if batch == 0 || rows % batch != 0 {
                return Err(Error::shape("grouped candidates", &shape, &[batch]));
            }
            let mut out = vec![batch, rows / batch];
            out.extend_from_slice(rest);
            v.reshape(&out)
        }
    }
}

fn group_mask(mask: &[bool], rows: usize, batch: usize, layout: Layout) -> Vec<bool> {
    match layout {
        Layout::Shared => mask.repeat(batch),
        Layout::Grouped => {
            debug_assert_eq!(rows % batch, 0);
            mask.to_vec()
        }
    }
}

fn with_cls(seqs: &[TokenSequence]) -> Vec<TokenSequence> {
    seqs.iter()
        .map(|s| TokenSequence::with_cls(&s.ids()[..s.real_len()]))
        .collect()
}

/// A scoring model: configuration, parameters and architecture.
#[derive(Clone, Debug)]
pub struct Model<T: Scalar> {
    pub config: ModelConfig,
    pub params: ParamStore<T>,
    pub encoder: Encoder,
    pub arch: Architecture,
}

impl<T: Scalar> Model<T> {
    /// Initializes every parameter from `seed`. Each component draws from its
    /// own stream, so optional heads never perturb the backbone.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let root = Rng::seed(seed);
        let mut params = ParamStore::new();
        let encoder = Encoder::new(&mut params, &config.encoder, &mut root.split(1))?;
        let d = config.encoder.d_model;
        let classes = config.classes();
        let arch = match config.kind {
            kind if kind.is_mix() => {
                let (schedule, k) = config.schedule()?;
                let strategy = PrecomputeStrategy {
                    kind: config.strategy,
                    k,
                };
                let precomputer = Precomputer::new(&mut params, strategy, config.kmax, d, &mut root.split(2))?;
                let inner = config.interaction_ffn_inner.unwrap_or(config.encoder.ffn_inner);
                let mut rng = root.split(3);
                let layers = schedule
                    .positions()
                    .map(|p| InteractionLayer::new(&mut params, &format!("interaction{p}"), d, inner, &mut rng))
                    .collect();
                let mut rng = root.split(4);
                let eq6 = Eq6Head::new(&mut params, "head.eq6", d, &mut rng);
                let state_projection = Linear::new(&mut params, "head.state_projection", d, d, &mut rng);
                let classifier = classes.map(|c| ClassifierHead::new(&mut params, "head.classifier", d, c, &mut rng));
                Architecture::Mix(MixParts {
                    precomputer,
                    schedule,
                    layers,
                    eq6,
                    state_projection,
                    classifier,
                })
            }
            ModelKind::Dual => Architecture::Dual {
                classifier: classes.map(|c| ClassifierHead::new(&mut params, "head.classifier", d, c, &mut root.split(4))),
            },
            ModelKind::Cross => Architecture::Cross {
                head: ScoreHead::new(&mut params, "head.score", d, classes.unwrap_or(1), &mut root.split(4)),
            },
            ModelKind::Poly => Architecture::Poly {
                codes: PolyCodes::new(&mut params, "head.poly_codes", config.poly_codes, d, &mut root.split(4)),
            },
            ModelKind::MaxSim => Architecture::MaxSim,
            _ => unreachable!(),
        };
        Ok(Self {
            config,
            params,
            encoder,
            arch,
        })
    }

    pub fn kind(&self) -> ModelKind {
        self.config.kind
    }

    pub fn mix(&self) -> Option<&MixParts> {
        match &self.arch {
            Architecture::Mix(m) => Some(m),
            _ => None,
        }
    }

    pub fn session<'g, 'p>(&'p self, graph: &'g crate::Graph<T>) -> Session<'g, 'p, T> {
        Session::new(graph, &self.params)
    }

    /// Plain encoding of `[CLS] query`.
    pub fn encode_queries<'g>(&self, s: &Session<'g, '_, T>, queries: &[TokenSequence]) -> Result<Encoded<'g, T>> {
        s.graph()
            .in_phase(Phase::QueryEncoding, || self.encoder.encode(s, &with_cls(queries)))
    }

    /// Candidate-side work that does not depend on the query.
    pub fn candidate_reps<'g>(
        &self,
        s: &Session<'g, '_, T>,
        candidates: &[TokenSequence],
    ) -> Result<CandidateReps<'g, T>> {
        if candidates.is_empty() {
            return Err(Error::Empty("candidate set"));
        }
        s.graph().in_phase(Phase::CandidateEncoding, || match &self.arch {
            Architecture::Mix(m) => Ok(CandidateReps::Context(m.precomputer.forward(s, &self.encoder, candidates)?)),
            Architecture::Dual { .. } | Architecture::Poly { .. } => {
                Ok(CandidateReps::Vector(self.encoder.encode(s, &with_cls(candidates))?.mean_pool()?))
            }
            Architecture::MaxSim => Ok(CandidateReps::Tokens(self.encoder.encode(s, &with_cls(candidates))?)),
            Architecture::Cross { .. } => Ok(CandidateReps::Text(candidates.to_vec())),
        })
    }

    /// Cached rows as graph constants.
    pub fn cached_reps<'g>(
        &self,
        s: &Session<'g, '_, T>,
        cache: &CandidateCache<T>,
        ids: &[u64],
    ) -> Result<CandidateReps<'g, T>> {
        let m = self
            .mix()
            .ok_or_else(|| Error::Config(format!("{} does not use a candidate cache", self.kind().name())))?;
        if cache.k() != m.precomputer.strategy.k || cache.d() != self.encoder.d_model() {
            return Err(Error::Config(format!(
                "cache (k={}, d={}) does not match model (k={}, d={})",
                cache.k(),
                cache.d(),
                m.precomputer.strategy.k,
                self.encoder.d_model()
            )));
        }
        let (context, state) = cache.lookup(ids)?;
        Ok(CandidateReps::Context(Precomputed {
            context: s.constant(context),
            state: s.constant(state),
        }))
    }

    /// Full MixEncoder pass: returns the final `(q, E, H)` and grouped `h0`.
    pub fn mix_forward<'g>(
        &self,
        s: &Session<'g, '_, T>,
        queries: &[TokenSequence],
        reps: &Precomputed<'g, T>,
        layout: Layout,
    ) -> Result<(ScheduleOutput<'g, T>, Var<'g, T>)> {
        let m = self
            .mix()
            .ok_or_else(|| Error::Config(format!("{} is not a MixEncoder", self.kind().name())))?;
        let b = queries.len();
        let context = group(reps.context, b, layout)?;
        let h0 = group(reps.state, b, layout)?;
        let out = run_schedule(
            s,
            &self.encoder,
            &m.layers,
            &m.schedule,
            &with_cls(queries),
            context,
            h0,
            self.config.ablation.needs_state(),
        )?;
        Ok((out, h0))
    }

    /// Relevance scores `[B, N]`.
    pub fn score<'g>(
        &self,
        s: &Session<'g, '_, T>,
        queries: &[TokenSequence],
        reps: &CandidateReps<'g, T>,
        layout: Layout,
    ) -> Result<Var<'g, T>> {
        if queries.is_empty() {
            return Err(Error::Empty("query batch"));
        }
        if reps.is_empty() {
            return Err(Error::Empty("candidate set"));
        }
        let b = queries.len();
        let g = s.graph();
        match (&self.arch, reps) {
            (Architecture::Mix(m), CandidateReps::Context(p)) => {
                let (out, h0) = self.mix_forward(s, queries, p, layout)?;
                let flags = self.config.ablation;
                g.in_phase(Phase::Head, || {
                    if flags.eq6_only {
                        return m.eq6.forward(s, out.context);
                    }
                    let e = out.context.mean_axis(2)?;
                    if !flags.use_h {
                        return dual_score(out.query.mean_pool()?, e);
                    }
                    if !flags.use_e {
                        return rank_score(out.state, m.state_projection.forward(s, h0)?);
                    }
                    rank_score(out.state, e)
                })
            }
            (Architecture::Dual { .. }, CandidateReps::Vector(c)) => {
                let q = self.encode_queries(s, queries)?.mean_pool()?;
                let c = group(*c, b, layout)?;
                g.in_phase(Phase::Head, || dual_score(q, c))
            }
            (Architecture::Poly { codes }, CandidateReps::Vector(c)) => {
                let y = self.encode_queries(s, queries)?;
                let c = group(*c, b, layout)?;
                g.in_phase(Phase::Head, || poly_score(codes.context(s, &y)?, c))
            }
            (Architecture::MaxSim, CandidateReps::Tokens(c)) => {
                let q = self.encode_queries(s, queries)?;
                let hidden = group(c.hidden, b, layout)?;
                let mask = group_mask(&c.mask, c.batch, b, layout);
                g.in_phase(Phase::Head, || maxsim_score(q.hidden, &q.mask, hidden, &mask))
            }
            (Architecture::Cross { head }, CandidateReps::Text(cands)) => {
                let n = match layout {
                    Layout::Shared => cands.len(),
                    Layout::Grouped => {
                        if cands.len() % b != 0 {
                            return Err(Error::shape("grouped candidates", &[cands.len()], &[b]));
                        }
                        cands.len() / b
                    }
                };
                let mut pairs = Vec::with_capacity(b * n);
                for (bi, q) in queries.iter().enumerate() {
                    let q = &q.ids()[..q.real_len()];
                    for j in 0..n {
                        let c = match layout {
                            Layout::Shared => &cands[j],
                            Layout::Grouped => &cands[bi * n + j],
                        };
                        pairs.push(TokenSequence::pair(q, &c.ids()[..c.real_len()]));
                    }
                }
                let cls = self.encode_pairs(s, &pairs)?;
                head.forward(s, cls)?.reshape(&[b, n])
            }
            _ => Err(Error::Config(format!(
                "candidate representation does not match {}",
                self.kind().name()
            ))),
        }
    }

    /// CLS rows `[P, d]` of jointly encoded pairs.
    fn encode_pairs<'g>(&self, s: &Session<'g, '_, T>, pairs: &[TokenSequence]) -> Result<Var<'g, T>> {
        let d = self.encoder.d_model();
        s.graph().in_phase(Phase::CrossAttention, || {
            let enc = self.encoder.encode(s, pairs)?;
            enc.hidden.slice(1, 0, 1)?.reshape(&[pairs.len(), d])
        })
    }

    /// Encodes candidates inline and scores them.
    pub fn score_candidates<'g>(
        &self,
        s: &Session<'g, '_, T>,
        queries: &[TokenSequence],
        candidates: &[TokenSequence],
        layout: Layout,
    ) -> Result<Var<'g, T>> {
        let reps = self.candidate_reps(s, candidates)?;
        self.score(s, queries, &reps, layout)
    }

    /// Class logits `[B, C]` for one candidate per query.
    pub fn classify<'g>(
        &self,
        s: &Session<'g, '_, T>,
        queries: &[TokenSequence],
        candidates: &[TokenSequence],
    ) -> Result<Var<'g, T>> {
        if queries.len() != candidates.len() {
            return Err(Error::shape("classify", &[queries.len()], &[candidates.len()]));
        }
        let classes = self
            .config
            .classes()
            .ok_or_else(|| Error::Config("model was built for ranking".into()))?;
        let b = queries.len();
        let g = s.graph();
        match &self.arch {
            Architecture::Mix(m) => {
                let reps = self.candidate_reps(s, candidates)?;
                let CandidateReps::Context(p) = reps else { unreachable!() };
                let (out, h0) = self.mix_forward(s, queries, &p, Layout::Grouped)?;
                let flags = self.config.ablation;
                let d = self.encoder.d_model();
                g.in_phase(Phase::Head, || {
                    let h = if flags.use_h && !flags.eq6_only {
                        out.state.reshape(&[b, d])?
                    } else {
                        out.query.mean_pool()?
                    };
                    let e = if flags.use_e {
                        out.context.mean_axis(2)?.reshape(&[b, d])?
                    } else {
                        m.state_projection.forward(s, h0)?.reshape(&[b, d])?
                    };
                    m.classifier.expect("classification model has a classifier").forward(s, h, e)
                })
            }
            Architecture::Dual { classifier } => {
                let q = self.encode_queries(s, queries)?.mean_pool()?;
                let CandidateReps::Vector(c) = self.candidate_reps(s, candidates)? else { unreachable!() };
                g.in_phase(Phase::Head, || {
                    classifier.expect("classification model has a classifier").forward(s, q, c)
                })
            }
            Architecture::Cross { head } => {
                let pairs: Vec<TokenSequence> = queries
                    .iter()
                    .zip(candidates)
                    .map(|(q, c)| TokenSequence::pair(&q.ids()[..q.real_len()], &c.ids()[..c.real_len()]))
                    .collect();
                let cls = self.encode_pairs(s, &pairs)?;
                head.forward(s, cls)?.reshape(&[b, classes])
            }
            _ => Err(Error::Config(format!("{} supports ranking only", self.kind().name()))),
        }
    }

    /// Candidate representations computed `chunk` rows at a time without
    /// gradients. Token states are padded to the longest candidate.
    pub fn freeze_candidates(&self, candidates: &[TokenSequence], chunk: usize) -> Result<FrozenReps<T>> {
        if candidates.is_empty() {
            return Err(Error::Empty("candidate set"));
        }
        if let Architecture::Cross { .. } = self.arch {
            return Ok(FrozenReps::Text(candidates.to_vec()));
        }
        let longest = candidates.iter().map(TokenSequence::real_len).max().unwrap_or(0);
        let mut a = Vec::new();
        let mut b = Vec::new();
        let mut mask = Vec::new();
        for part in candidates.chunks(chunk.max(1)) {
            let g = Graph::no_grad();
            let s = self.session(&g);
            if let Architecture::MaxSim = self.arch {
                // Padded to a common length so chunks stack.
                let padded: Vec<TokenSequence> = with_cls(part)
                    .iter()
                    .map(|c| c.padded(longest + 1))
                    .collect::<Result<_>>()?;
                let enc = g.in_phase(Phase::CandidateEncoding, || self.encoder.encode(&s, &padded))?;
                a.push(enc.hidden.value());
                mask.extend_from_slice(&enc.mask);
                continue;
            }
            match self.candidate_reps(&s, part)? {
                CandidateReps::Context(p) => {
                    a.push(p.context.value());
                    b.push(p.state.value());
                }
                CandidateReps::Vector(v) => a.push(v.value()),
                CandidateReps::Tokens(_) | CandidateReps::Text(_) => unreachable!(),
            }
        }
        Ok(match &self.arch {
            Architecture::Mix(_) => FrozenReps::Context {
                context: concat_rows(&a)?,
                state: concat_rows(&b)?,
            },
            Architecture::MaxSim => FrozenReps::Tokens {
                hidden: concat_rows(&a)?,
                mask,
            },
            _ => FrozenReps::Vector(concat_rows(&a)?),
        })
    }

    /// Scores against frozen candidates without gradients, `chunk` candidates
    /// per graph (shared layout only; grouped scoring uses one graph).
    /// Returns `[B, N]` scores and the MACs spent.
    pub fn score_frozen(
        &self,
        queries: &[TokenSequence],
        frozen: &FrozenReps<T>,
        layout: Layout,
        chunk: usize,
    ) -> Result<(Tensor<T>, FlopCounter)> {
        let n = frozen.len();
        let b = queries.len();
        let chunk = if layout == Layout::Shared { chunk.max(1).min(n.max(1)) } else { n };
        let mut flops = FlopCounter::default();
        let mut columns: Vec<Tensor<T>> = Vec::new();
        let mut start = 0;
        while start < n {
            let len = chunk.min(n - start);
            let part = if len == n { frozen.clone() } else { frozen.slice(start, len)? };
            let g = Graph::no_grad();
            let s = self.session(&g);
            let reps = part.thaw(&g);
            let scores = self.score(&s, queries, &reps, layout)?.value();
            flops.merge(&g.flops());
            columns.push((*scores).clone());
            start += len;
        }
        if columns.len() == 1 {
            return Ok((columns.pop().unwrap(), flops));
        }
        let mut data = Vec::with_capacity(b * n);
        for row in 0..b {
            for c in &columns {
                let w = c.shape()[1];
                data.extend_from_slice(&c.data()[row * w..(row + 1) * w]);
            }
        }
        Ok((Tensor::new([b, n], data)?, flops))
    }

    /// Builds the candidate cache for a MixEncoder.
    pub fn build_cache(&self, candidates: &[(u64, TokenSequence)], chunk: usize) -> Result<CandidateCache<T>> {
        let m = self
            .mix()
            .ok_or_else(|| Error::Config(format!("{} does not use a candidate cache", self.kind().name())))?;
        CandidateCache::build(&self.params, &self.encoder, &m.precomputer, candidates, chunk)
    }
}
