//! Interaction layers and the schedule that mixes them with ordinary
//! transformer layers.
//!
//! An interaction layer at encoder position `i` keeps that position's
//! transformer weights for the query path and adds a candidate path: every
//! candidate's `k` context embeddings attend over `[own keys; query keys]`,
//! and a per-candidate query state is extracted from the query and fused
//! with the previous state through an update gate. The query path never
//! reads candidate data, so the query is encoded once however many
//! candidates it is scored against.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::encoder::{Encoded, Encoder, TransformerLayer};
use crate::error::{Error, Result};
use crate::numcore::{concat, FeedForward, LayerNorm, Linear, ParamStore, Phase, Rng, Role, Session, Var};
use crate::scalar::{lit, Scalar};

/// Which encoder positions (1-based) are interaction layers.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSchedule {
    num_layers: usize,
    positions: BTreeSet<usize>,
}

impl LayerSchedule {
    pub fn new(num_layers: usize, positions: impl IntoIterator<Item = usize>) -> Result<Self> {
        let positions: BTreeSet<usize> = positions.into_iter().collect();
        if positions.is_empty() {
            return Err(Error::Config("a schedule needs at least one interaction layer".into()));
        }
        if let Some(&p) = positions.iter().find(|&&p| p == 0 || p > num_layers) {
            return Err(Error::Config(format!(
                "interaction position {p} outside layers 1..={num_layers}"
            )));
        }
        Ok(Self {
            num_layers,
            positions,
        })
    }

    /// Interaction layers at positions `from..=num_layers`.
    pub fn top(num_layers: usize, count: usize) -> Result<Self> {
        if count == 0 || count > num_layers {
            return Err(Error::Config(format!(
                "cannot place {count} interaction layers in {num_layers} layers"
            )));
        }
        Self::new(num_layers, num_layers + 1 - count..=num_layers)
    }

    pub fn num_layers(&self) -> usize {
        self.num_layers
    }

    pub fn positions(&self) -> impl Iterator<Item = usize> + '_ {
        self.positions.iter().copied()
    }

    pub fn num_interaction(&self) -> usize {
        self.positions.len()
    }

    pub fn is_interaction(&self, position: usize) -> bool {
        self.positions.contains(&position)
    }

    pub fn first(&self) -> usize {
        *self.positions.iter().next().unwrap()
    }
}

impl fmt::Display for LayerSchedule {
    /// `{L1, I2^1, L3, L4, I5^2}`.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut j = 0;
        let parts: Vec<String> = (1..=self.num_layers)
            .map(|i| {
                if self.is_interaction(i) {
                    j += 1;
                    format!("I{i}^{j}")
                } else {
                    format!("L{i}")
                }
            })
            .collect();
        write!(f, "{{{}}}", parts.join(", "))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Variant {
    A,
    B,
    C,
}

impl Variant {
    pub fn parse(name: &str) -> Result<Self> {
        match name.trim_start_matches("mix-").to_ascii_lowercase().as_str() {
            "a" => Ok(Variant::A),
            "b" => Ok(Variant::B),
            "c" => Ok(Variant::C),
            _ => Err(Error::Config(format!("unknown variant {name:?}"))),
        }
    }
}

/// Published variants on a `num_layers`-deep stack: `a` replaces the last
/// layer (k = 1), `b` the last three (k = 1), `c` the last three with k = 2.
pub fn variant_preset(variant: Variant, num_layers: usize) -> Result<(LayerSchedule, usize)> {
    match variant {
        Variant::A => Ok((LayerSchedule::top(num_layers, 1)?, 1)),
        Variant::B | Variant::C if num_layers < 3 => Err(Error::Config(format!(
            "variant {variant:?} needs at least 3 layers, got {num_layers}"
        ))),
        Variant::B => Ok((LayerSchedule::top(num_layers, 3)?, 1)),
        Variant::C => Ok((LayerSchedule::top(num_layers, 3)?, 2)),
    }
}

/// `(q, E, H)` flowing between layers.
#[derive(Clone, Debug)]
pub struct InteractionState<'g, T: Scalar> {
    /// Query token states, `[B, m, d]` with mask.
    pub query: Encoded<'g, T>,
    /// Context embeddings, `[B, N, k, d]`.
    pub context: Var<'g, T>,
    /// Per-candidate query states, `[B, N, d]`.
    pub state: Var<'g, T>,
}

impl<'g, T: Scalar> InteractionState<'g, T> {
    fn dims(&self) -> Result<(usize, usize, usize, usize)> {
        let e = self.context.shape();
        let h = self.state.shape();
        if e.len() != 4 || h.len() != 3 || e[0] != h[0] || e[1] != h[1] || e[3] != h[2] {
            return Err(Error::shape("interaction state", &e, &h));
        }
        if e[0] != self.query.batch {
            return Err(Error::shape("interaction state", &e, &[self.query.batch]));
        }
        Ok((e[0], e[1], e[2], e[3]))
    }
}

/// Parameters an interaction layer adds on top of the transformer layer it
/// replaces. The query/key/value/output projections are shared with that
/// layer.
#[derive(Clone, Copy, Debug)]
pub struct InteractionLayer {
    pub ln_context: LayerNorm,
    pub ln_context_ffn: LayerNorm,
    pub context_ffn: FeedForward,
    pub ln_pool: LayerNorm,
    /// Pooled context embeddings → per-candidate attention query `Q*`.
    pub state_query: Linear,
    pub ln_state_ffn: LayerNorm,
    pub state_ffn: FeedForward,
    /// `[H*; H] → d` update gate.
    pub gate: Linear,
}

impl InteractionLayer {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        d: usize,
        ffn_inner: usize,
        rng: &mut Rng,
    ) -> Self {
        Self {
            ln_context: LayerNorm::new(store, &format!("{name}.ln_context"), d),
            ln_context_ffn: LayerNorm::new(store, &format!("{name}.ln_context_ffn"), d),
            context_ffn: FeedForward::new(store, &format!("{name}.context_ffn"), d, ffn_inner, rng),
            ln_pool: LayerNorm::new(store, &format!("{name}.ln_pool"), d),
            state_query: Linear::new(store, &format!("{name}.state_query"), d, d, rng),
            ln_state_ffn: LayerNorm::new(store, &format!("{name}.ln_state_ffn"), d),
            state_ffn: FeedForward::new(store, &format!("{name}.state_ffn"), d, ffn_inner, rng),
            gate: Linear::new(store, &format!("{name}.gate"), 2 * d, d, rng),
        }
    }

    /// One interaction step. With `update_state = false` the query-state
    /// path is skipped and `H` passes through unchanged.
    pub fn forward<'g, T: Scalar>(
        &self,
        s: &Session<'g, '_, T>,
        base: &TransformerLayer,
        state: InteractionState<'g, T>,
        update_state: bool,
    ) -> Result<InteractionState<'g, T>> {
        let (b, n, k, d) = state.dims()?;
        if n == 0 {
            return Err(Error::Empty("candidate set"));
        }
        let g = s.graph();
        let qmask = &state.query.mask;
        let m = state.query.len;
        for row in qmask.chunks(m) {
            if !row.iter().any(|&x| x) {
                return Err(Error::Empty("query mask has no real token"));
            }
        }

        // Query self-attention: exactly the replaced transformer layer.
        let (projected, q_out) = g.in_phase(Phase::QueryEncoding, || {
            let p = base.project(s, state.query.hidden)?;
            let out = base.finish(s, state.query.hidden, &p, qmask)?;
            Ok::<_, Error>((p, out))
        })?;

        let context = g.in_phase(Phase::CrossAttention, || {
            self.cross_attention(s, base, &state, &projected.keys, &projected.values, (b, n, k, d))
        })?;

        let h_out = if update_state {
            g.in_phase(Phase::QueryState, || {
                self.query_state(s, base, &state, &projected.keys, &projected.values)
            })?
        } else {
            state.state
        };

        Ok(InteractionState {
            query: state.query.with_hidden(q_out),
            context,
            state: h_out,
        })
    }

    /// `E_out = E + Att(Q′, [K′; K], [V′; V])`, then the feed-forward block.
    fn cross_attention<'g, T: Scalar>(
        &self,
        s: &Session<'g, '_, T>,
        base: &TransformerLayer,
        state: &InteractionState<'g, T>,
        keys: &Var<'g, T>,
        values: &Var<'g, T>,
        (b, n, k, d): (usize, usize, usize, usize),
    ) -> Result<Var<'g, T>> {
        let g = s.graph();
        let att = &base.attention;
        let heads = att.heads;
        let dh = d / heads;
        let m = state.query.len;

        let e = state.context;
        let normed = self.ln_context.forward(s, e)?;
        let q_c = att.project_queries(s, normed)?; // [B, N, k, d]
        let (k_c, v_c) = att.project_keys_values(s, normed)?;

        // Scores against the candidate's own keys: [B·N, h, k, k].
        let split_own = |x: Var<'g, T>| att.split_heads(x.reshape(&[b * n, k, d])?);
        let qh_own = split_own(q_c)?;
        let kh_own = split_own(k_c)?;
        let vh_own = split_own(v_c)?;
        let own = g.in_role(Role::AttentionScores, || qh_own.matmul(kh_own.transpose()?))?;

        // Scores against the query keys: [B, h, N·k, m] → [B·N, h, k, m].
        let qh_all = att.split_heads(q_c.reshape(&[b, n * k, d])?)?;
        let kh_q = att.split_heads(*keys)?;
        let vh_q = att.split_heads(*values)?;
        let cross = g.in_role(Role::AttentionScores, || qh_all.matmul(kh_q.transpose()?))?;
        let cross = cross
            .reshape(&[b, heads, n, k, m])?
            .permute(&[0, 2, 1, 3, 4])?
            .reshape(&[b * n, heads, k, m])?;

        let scale = T::one() / lit::<T>((dh as f64).sqrt());
        let scores = concat(&[own, cross], 3)?.scale(scale);
        let mut mask = Vec::with_capacity(b * n * heads * k * (k + m));
        for bi in 0..b {
            let qm = &state.query.mask[bi * m..(bi + 1) * m];
            for _ in 0..n * heads * k {
                mask.extend(std::iter::repeat(true).take(k));
                mask.extend_from_slice(qm);
            }
        }
        let probs = scores.softmax_last(Some(&mask))?;

        let p_own = probs.slice(3, 0, k)?;
        let p_cross = probs
            .slice(3, k, m)?
            .reshape(&[b, n, heads, k, m])?
            .permute(&[0, 2, 1, 3, 4])?
            .reshape(&[b, heads, n * k, m])?;
        let mixed_own = g.in_role(Role::AttentionMix, || p_own.matmul(vh_own))?;
        let mixed_cross = g.in_role(Role::AttentionMix, || p_cross.matmul(vh_q))?;
        let mixed_cross = mixed_cross
            .reshape(&[b, heads, n, k, dh])?
            .permute(&[0, 2, 1, 3, 4])?
            .reshape(&[b * n, heads, k, dh])?;
        let mixed = att
            .merge_heads(mixed_own.add(mixed_cross)?)?
            .reshape(&[b, n, k, d])?;
        let e1 = e.add(att.project_output(s, mixed)?)?;
        let h = self.ln_context_ffn.forward(s, e1)?;
        e1.add(self.context_ffn.forward(s, h)?)
    }

    /// `H* = FFN(Att(Q*, K, V))` with `Q* = Lin(LN(mean_k E))`, fused with
    /// the previous state by the update gate.
    fn query_state<'g, T: Scalar>(
        &self,
        s: &Session<'g, '_, T>,
        base: &TransformerLayer,
        state: &InteractionState<'g, T>,
        keys: &Var<'g, T>,
        values: &Var<'g, T>,
    ) -> Result<Var<'g, T>> {
        let g = s.graph();
        let att = &base.attention;
        let pooled = state.context.mean_axis(2)?; // [B, N, d]
        let normed = self.ln_pool.forward(s, pooled)?;
        let q_star = g.in_role(Role::QueryProjection, || self.state_query.forward(s, normed))?;
        let mixed = att.attend(s, q_star, *keys, *values, Some(&state.query.mask))?;
        let u = q_star.add(att.project_output(s, mixed)?)?;
        let h = self.ln_state_ffn.forward(s, u)?;
        let h_star = u.add(self.state_ffn.forward(s, h)?)?;
        gate(s, &self.gate, h_star, state.state)
    }
}

/// `z = σ(Lin([h*; h_prev]))`, `z ⊙ h* + (1 − z) ⊙ h_prev`.
pub fn gate<'g, T: Scalar>(
    s: &Session<'g, '_, T>,
    lin: &Linear,
    h_star: Var<'g, T>,
    h_prev: Var<'g, T>,
) -> Result<Var<'g, T>> {
    let (a, b) = (h_star.shape(), h_prev.shape());
    if a != b || a.is_empty() {
        return Err(Error::shape("gate", &a, &b));
    }
    let axis = a.len() - 1;
    let cat = concat(&[h_star, h_prev], axis)?;
    let z = s
        .graph()
        .in_role(Role::Gate, || lin.forward(s, cat))?
        .sigmoid();
    z.mul(h_star)?.add(z.one_minus().mul(h_prev)?)
}

/// Final `(q, E, H)` after a full schedule.
#[derive(Clone, Debug)]
pub struct ScheduleOutput<'g, T: Scalar> {
    pub query: Encoded<'g, T>,
    pub context: Var<'g, T>,
    pub state: Var<'g, T>,
}

/// Runs the encoder over `queries` with interaction layers at the scheduled
/// positions. `context` is `[B, N, k, d]` and `state` `[B, N, d]`, one
/// candidate set per query. Interaction layer `j` (in order of appearance)
/// uses `layers[j]`.
pub fn run_schedule<'g, T: Scalar>(
    s: &Session<'g, '_, T>,
    encoder: &Encoder,
    layers: &[InteractionLayer],
    schedule: &LayerSchedule,
    queries: &[crate::encoder::TokenSequence],
    context: Var<'g, T>,
    state: Var<'g, T>,
    update_state: bool,
) -> Result<ScheduleOutput<'g, T>> {
    if schedule.num_layers() != encoder.num_layers() || layers.len() != schedule.num_interaction() {
        return Err(Error::Config(format!(
            "schedule {schedule} does not fit a {}-layer encoder with {} interaction layers",
            encoder.num_layers(),
            layers.len()
        )));
    }
    let e = context.shape();
    let h = state.shape();
    let d = encoder.d_model();
    if e.len() != 4 || e[3] != d || h.len() != 3 || h[2] != d || e[0] != queries.len() {
        return Err(Error::Config(format!(
            "context {e:?} / state {h:?} do not match model width {d} and {} queries",
            queries.len()
        )));
    }
    let g = s.graph();
    let mut query = g.in_phase(Phase::QueryEncoding, || encoder.embed(s, queries))?;
    let mut context = context;
    let mut state = state;
    let mut j = 0;
    for (i, layer) in encoder.layers.iter().enumerate() {
        if schedule.is_interaction(i + 1) {
            let out = layers[j].forward(
                s,
                layer,
                InteractionState {
                    query,
                    context,
                    state,
                },
                update_state,
            )?;
            query = out.query;
            context = out.context;
            state = out.state;
            j += 1;
        } else {
            let hidden = g.in_phase(Phase::QueryEncoding, || layer.forward(s, query.hidden, &query.mask))?;
            query = query.with_hidden(hidden);
        }
    }
    Ok(ScheduleOutput {
        query,
        context,
        state,
    })
}
