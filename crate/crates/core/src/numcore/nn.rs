//! Parameterized building blocks: affine maps, layer norm, feed-forward and
//! multi-head attention.

use super::flops::Role;
use super::graph::Var;
use super::params::{ParamId, ParamStore, Session};
use super::rng::Rng;
use crate::error::{Error, Result};
use crate::scalar::{lit, Scalar};

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Affine map `x·W + b` with `W: in×out`.
///
/// This is the plain linear projection; standard layer normalization is
/// [`LayerNorm`].
#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        input: usize,
        output: usize,
        rng: &mut Rng,
    ) -> Self {
        Self {
            weight: store.normal(format!("{name}.weight"), &[input, output], rng),
            bias: store.zeros(format!("{name}.bias"), &[output]),
        }
    }

    pub fn forward<'g, T: Scalar>(&self, s: &Session<'g, '_, T>, x: Var<'g, T>) -> Result<Var<'g, T>> {
        x.matmul(s.p(self.weight))?.add(s.p(self.bias))
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, d: usize) -> Self {
        Self {
            gamma: store.ones(format!("{name}.gamma"), &[d]),
            beta: store.zeros(format!("{name}.beta"), &[d]),
        }
    }

    pub fn forward<'g, T: Scalar>(&self, s: &Session<'g, '_, T>, x: Var<'g, T>) -> Result<Var<'g, T>> {
        x.layer_norm(s.p(self.gamma), s.p(self.beta), LAYER_NORM_EPS)
    }
}

/// `linear → gelu → linear` with a configurable inner width.
#[derive(Clone, Copy, Debug)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        d: usize,
        inner: usize,
        rng: &mut Rng,
    ) -> Self {
        Self {
            up: Linear::new(store, &format!("{name}.up"), d, inner, rng),
            down: Linear::new(store, &format!("{name}.down"), inner, d, rng),
        }
    }

    pub fn forward<'g, T: Scalar>(&self, s: &Session<'g, '_, T>, x: Var<'g, T>) -> Result<Var<'g, T>> {
        s.graph().in_role(Role::FeedForward, || {
            let h = self.up.forward(s, x)?.gelu();
            self.down.forward(s, h)
        })
    }
}

/// Multi-head scaled dot-product attention with separate Q/K/V/output
/// projections.
#[derive(Clone, Copy, Debug)]
pub struct MultiHeadAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub heads: usize,
    pub d: usize,
}

impl MultiHeadAttention {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        d: usize,
        heads: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        if heads == 0 || d % heads != 0 {
            return Err(Error::Config(format!(
                "model width {d} is not divisible by {heads} attention heads"
            )));
        }
        Ok(Self {
            query: Linear::new(store, &format!("{name}.query"), d, d, rng),
            key: Linear::new(store, &format!("{name}.key"), d, d, rng),
            value: Linear::new(store, &format!("{name}.value"), d, d, rng),
            output: Linear::new(store, &format!("{name}.output"), d, d, rng),
            heads,
            d,
        })
    }

    pub fn project_queries<'g, T: Scalar>(
        &self,
        s: &Session<'g, '_, T>,
        x: Var<'g, T>,
    ) -> Result<Var<'g, T>> {
        s.graph()
            .in_role(Role::QueryProjection, || self.query.forward(s, x))
    }

    pub fn project_keys_values<'g, T: Scalar>(
        &self,
        s: &Session<'g, '_, T>,
        x: Var<'g, T>,
    ) -> Result<(Var<'g, T>, Var<'g, T>)> {
        s.graph().in_role(Role::KeyValueProjection, || {
            Ok((self.key.forward(s, x)?, self.value.forward(s, x)?))
        })
    }

    pub fn project_output<'g, T: Scalar>(
        &self,
        s: &Session<'g, '_, T>,
        x: Var<'g, T>,
    ) -> Result<Var<'g, T>> {
        s.graph()
            .in_role(Role::OutputProjection, || self.output.forward(s, x))
    }

    /// `[.., rows, d]` → `[.., heads, rows, d/heads]`.
    pub fn split_heads<'g, T: Scalar>(&self, x: Var<'g, T>) -> Result<Var<'g, T>> {
        let mut shape = x.shape();
        let r = shape.len();
        if r < 2 || shape[r - 1] != self.d {
            return Err(Error::shape("split_heads", &shape, &[self.d]));
        }
        shape[r - 1] = self.heads;
        shape.push(self.d / self.heads);
        let x = x.reshape(&shape)?;
        let mut axes: Vec<usize> = (0..r - 2).collect();
        axes.extend([r - 1, r - 2, r]);
        x.permute(&axes)
    }

    /// Inverse of [`split_heads`](Self::split_heads).
    pub fn merge_heads<'g, T: Scalar>(&self, x: Var<'g, T>) -> Result<Var<'g, T>> {
        let shape = x.shape();
        let r = shape.len();
        if r < 3 {
            return Err(Error::shape("merge_heads", &shape, &[]));
        }
        let mut axes: Vec<usize> = (0..r - 3).collect();
        axes.extend([r - 2, r - 3, r - 1]);
        let x = x.permute(&axes)?;
        let mut out = shape[..r - 3].to_vec();
        out.extend([shape[r - 2], self.d]);
        x.reshape(&out)
    }

    /// Scaled dot-product attention over already-projected inputs:
    /// `q: [.., a, d]`, `k, v: [.., b, d]` with matching leading axes.
    /// `key_mask` holds one flag per key row (`[.., b]`, `true` = attend).
    /// Returns the merged heads `[.., a, d]` before the output projection.
    pub fn attend<'g, T: Scalar>(
        &self,
        s: &Session<'g, '_, T>,
        q: Var<'g, T>,
        k: Var<'g, T>,
        v: Var<'g, T>,
        key_mask: Option<&[bool]>,
    ) -> Result<Var<'g, T>> {
        let g = s.graph();
        let qh = self.split_heads(q)?;
        let kh = self.split_heads(k)?;
        let vh = self.split_heads(v)?;
        let scale = T::one() / lit::<T>(((self.d / self.heads) as f64).sqrt());
        let scores = g.in_role(Role::AttentionScores, || qh.matmul(kh.transpose()?))?;
        let scores = scores.scale(scale);
        let mask = match key_mask {
            Some(m) => Some(expand_key_mask(m, &scores.shape())?),
            None => None,
        };
        let probs = scores.softmax_last(mask.as_deref())?;
        let mixed = g.in_role(Role::AttentionMix, || probs.matmul(vh))?;
        self.merge_heads(mixed)
    }

    /// Full attention: project `x_query` to queries and `x_kv` to keys and
    /// values, attend, and apply the output projection.
    pub fn forward<'g, T: Scalar>(
        &self,
        s: &Session<'g, '_, T>,
        x_query: Var<'g, T>,
        x_kv: Var<'g, T>,
        key_mask: Option<&[bool]>,
    ) -> Result<Var<'g, T>> {
        let q = self.project_queries(s, x_query)?;
        let (k, v) = self.project_keys_values(s, x_kv)?;
        let mixed = self.attend(s, q, k, v, key_mask)?;
        self.project_output(s, mixed)
    }
}

/// Expands a per-key mask `[lead.., b]` to the score shape
/// `[lead.., heads, a, b]`.
pub fn expand_key_mask(mask: &[bool], score_shape: &[usize]) -> Result<Vec<bool>> {
    let r = score_shape.len();
    let b = score_shape[r - 1];
    let per_lead = score_shape[r - 3] * score_shape[r - 2];
    let lead: usize = score_shape[..r - 3].iter().product();
    if mask.len() != lead * b {
        return Err(Error::shape("key mask", score_shape, &[mask.len()]));
    }
    let mut out = Vec::with_capacity(lead * per_lead * b);
    for l in 0..lead {
        let row = &mask[l * b..(l + 1) * b];
        for _ in 0..per_lead {
            out.extend_from_slice(row);
        }
    }
    Ok(out)
}
