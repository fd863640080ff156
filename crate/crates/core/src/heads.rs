//! Task heads, the E-only scorer, baseline similarity functions and the
//! in-batch negative loss.
//!
//! Batched scorers work on grouped candidates: `[B, N, ..]` holds the `N`
//! candidates of query `b`. Sharing one candidate list across a batch is a
//! broadcast of that list.

use serde::{Deserialize, Serialize};

use crate::encoder::Encoded;
use crate::error::{Error, Result};
use crate::numcore::{concat, Linear, ParamId, ParamStore, Phase, Rng, Session, Var};
use crate::scalar::Scalar;
use crate::Tensor;

/// Ablation switches. `use_h = false` skips the query-state path and scores
/// with the pooled query; `use_e = false` replaces `e` by a learned
/// projection of the cached `h0`; `eq6_only` scores with `Lin(Avg(E))`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AblationFlags {
    pub use_h: bool,
    pub use_e: bool,
    pub eq6_only: bool,
}

impl Default for AblationFlags {
    fn default() -> Self {
        Self {
            use_h: true,
            use_e: true,
            eq6_only: false,
        }
    }
}

impl AblationFlags {
    pub const ORIGINAL: Self = Self {
        use_h: true,
        use_e: true,
        eq6_only: false,
    };
    pub const WITHOUT_H: Self = Self {
        use_h: false,
        use_e: true,
        eq6_only: false,
    };
    pub const WITHOUT_E: Self = Self {
        use_h: true,
        use_e: false,
        eq6_only: false,
    };
    pub const EQ6_ONLY: Self = Self {
        use_h: true,
        use_e: true,
        eq6_only: true,
    };

    pub fn validate(&self) -> Result<()> {
        if self.eq6_only && !self.use_e {
            return Err(Error::Config("E-only scoring needs E".into()));
        }
        if !self.use_h && !self.use_e {
            return Err(Error::Config("at least one of H and E must be used".into()));
        }
        Ok(())
    }

    /// Whether interaction layers must update the query states.
    pub fn needs_state(&self) -> bool {
        self.use_h && !self.eq6_only
    }

    pub fn name(&self) -> &'static str {
        match (self.use_h, self.use_e, self.eq6_only) {
            (_, _, true) => "eq6",
            (false, _, _) => "without-h",
            (_, false, _) => "without-e",
            _ => "original",
        }
    }
}

/// `logits = FFN([h; e; |h − e|])`.
#[derive(Clone, Copy, Debug)]
pub struct ClassifierHead {
    pub hidden: Linear,
    pub out: Linear,
}

impl ClassifierHead {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, d: usize, classes: usize, rng: &mut Rng) -> Self {
        Self {
            hidden: Linear::new(store, &format!("{name}.hidden"), 3 * d, d, rng),
            out: Linear::new(store, &format!("{name}.out"), d, classes, rng),
        }
    }

    pub fn forward<'g, T: Scalar>(&self, s: &Session<'g, '_, T>, h: Var<'g, T>, e: Var<'g, T>) -> Result<Var<'g, T>> {
        let (hs, es) = (h.shape(), e.shape());
        if hs != es || hs.is_empty() {
            return Err(Error::shape("classify", &hs, &es));
        }
        let features = concat(&[h, e, h.sub(e)?.abs()], hs.len() - 1)?;
        self.out.forward(s, self.hidden.forward(s, features)?.gelu())
    }
}

/// Row-wise dot products over the last axis.
pub fn rank_score<'g, T: Scalar>(h: Var<'g, T>, e: Var<'g, T>) -> Result<Var<'g, T>> {
    let (hs, es) = (h.shape(), e.shape());
    if hs != es || hs.is_empty() {
        return Err(Error::shape("rank_score", &hs, &es));
    }
    h.mul(e)?.sum_axis(hs.len() - 1)
}

/// `s = Lin(Avg(E))` over `E: [.., k, d]`, giving `[..]`.
#[derive(Clone, Copy, Debug)]
pub struct Eq6Head {
    pub lin: Linear,
}

impl Eq6Head {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, d: usize, rng: &mut Rng) -> Self {
        Self {
            lin: Linear::new(store, name, d, 1, rng),
        }
    }

    pub fn forward<'g, T: Scalar>(&self, s: &Session<'g, '_, T>, context: Var<'g, T>) -> Result<Var<'g, T>> {
        let shape = context.shape();
        if shape.len() < 2 {
            return Err(Error::shape("eq6_score", &shape, &[]));
        }
        let avg = context.mean_axis(shape.len() - 2)?;
        let out = self.lin.forward(s, avg)?;
        out.reshape(&shape[..shape.len() - 2])
    }
}

/// Mean cross-entropy of each row against its diagonal entry.
pub fn in_batch_negative_loss<'g, T: Scalar>(scores: Var<'g, T>) -> Result<Var<'g, T>> {
    let shape = scores.shape();
    if shape.len() != 2 || shape[0] != shape[1] {
        return Err(Error::shape("in_batch_negative_loss", &shape, &[]));
    }
    if shape[0] < 2 {
        return Err(Error::InvalidArgument(format!(
            "in-batch negatives need B >= 2, got {}",
            shape[0]
        )));
    }
    let targets: Vec<usize> = (0..shape[0]).collect();
    scores.cross_entropy(&targets)
}

/// Query-side dot product against grouped candidates:
/// `q: [B, d]`, `c: [B, N, d]` → `[B, N]`.
pub fn dual_score<'g, T: Scalar>(q: Var<'g, T>, c: Var<'g, T>) -> Result<Var<'g, T>> {
    let (qs, cs) = (q.shape(), c.shape());
    if qs.len() != 2 || cs.len() != 3 || qs[0] != cs[0] || qs[1] != cs[2] {
        return Err(Error::shape("dual_score", &qs, &cs));
    }
    q.reshape(&[qs[0], 1, qs[1]])?.mul(c)?.sum_axis(2)
}

/// Learned poly codes that compress a query into `c` context vectors.
#[derive(Clone, Copy, Debug)]
pub struct PolyCodes {
    pub codes: ParamId,
}

impl PolyCodes {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, count: usize, d: usize, rng: &mut Rng) -> Self {
        Self {
            codes: store.normal(name, &[count, d], rng),
        }
    }

    /// `softmax(codes · Yᵀ) · Y` per query: `[B, c, d]`.
    pub fn context<'g, T: Scalar>(&self, s: &Session<'g, '_, T>, y: &Encoded<'g, T>) -> Result<Var<'g, T>> {
        let codes = s.p(self.codes);
        let (c, d) = (codes.shape()[0], codes.shape()[1]);
        let codes = codes.reshape(&[1, c, d])?.broadcast_to(&[y.batch, c, d])?;
        let logits = codes.matmul(y.hidden.transpose()?)?;
        let mask: Vec<bool> = (0..y.batch)
            .flat_map(|b| {
                let row = &y.mask[b * y.len..(b + 1) * y.len];
                std::iter::repeat(row).take(c).flatten().copied()
            })
            .collect();
        logits.softmax_last(Some(&mask))?.matmul(y.hidden)
    }
}

/// Each candidate vector attends over the query's context vectors and is
/// scored against the attended vector: `ctx: [B, c, d]`, `cand: [B, N, d]`.
pub fn poly_score<'g, T: Scalar>(ctx: Var<'g, T>, cand: Var<'g, T>) -> Result<Var<'g, T>> {
    let (xs, cs) = (ctx.shape(), cand.shape());
    if xs.len() != 3 || cs.len() != 3 || xs[0] != cs[0] || xs[2] != cs[2] {
        return Err(Error::shape("poly_score", &xs, &cs));
    }
    let weights = cand.matmul(ctx.transpose()?)?.softmax_last(None)?; // [B, N, c]
    let attended = weights.matmul(ctx)?;
    attended.mul(cand)?.sum_axis(2)
}

/// Sum over real query tokens of the best cosine similarity to any real
/// candidate token. `q: [B, m, d]`, `c: [B, N, t, d]` → `[B, N]`.
pub fn maxsim_score<'g, T: Scalar>(
    q: Var<'g, T>,
    q_mask: &[bool],
    c: Var<'g, T>,
    c_mask: &[bool],
) -> Result<Var<'g, T>> {
    let (qs, cs) = (q.shape(), c.shape());
    if qs.len() != 3 || cs.len() != 4 || qs[0] != cs[0] || qs[2] != cs[3] {
        return Err(Error::shape("maxsim_score", &qs, &cs));
    }
    let (b, m, d) = (qs[0], qs[1], qs[2]);
    let (n, t) = (cs[1], cs[2]);
    if q_mask.len() != b * m || c_mask.len() != b * n * t {
        return Err(Error::shape("maxsim mask", &[b * m, b * n * t], &[q_mask.len(), c_mask.len()]));
    }
    if c_mask.chunks(t).any(|row| !row.iter().any(|&x| x)) {
        return Err(Error::Empty("candidate tokens"));
    }
    let g = q.graph();
    let qn = q.l2_normalize_last();
    let cn = c.l2_normalize_last().reshape(&[b, n * t, d])?;
    let sims = qn
        .matmul(cn.transpose()?)?
        .reshape(&[b, m, n, t])?
        .permute(&[0, 2, 1, 3])?; // [B, N, m, t]
    // Cosines lie in [-1, 1]; a bias of -4 keeps padded tokens below every real one.
    let bias: Vec<T> = c_mask
        .iter()
        .map(|&x| if x { T::zero() } else { T::from_f64_lossy(-4.0) })
        .collect();
    let bias = g.constant(Tensor::new([b, n, 1, t], bias)?);
    let best = sims.add(bias)?.max_last()?; // [B, N, m]
    let weights: Vec<T> = q_mask.iter().map(|&x| if x { T::one() } else { T::zero() }).collect();
    let weights = g.constant(Tensor::new([b, 1, m], weights)?);
    best.mul(weights)?.sum_axis(2)
}

/// Scalar relevance on a pooled pair representation (cross-encoder CLS row).
#[derive(Clone, Copy, Debug)]
pub struct ScoreHead {
    pub lin: Linear,
}

impl ScoreHead {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, d: usize, outputs: usize, rng: &mut Rng) -> Self {
        Self {
            lin: Linear::new(store, name, d, outputs, rng),
        }
    }

    pub fn forward<'g, T: Scalar>(&self, s: &Session<'g, '_, T>, x: Var<'g, T>) -> Result<Var<'g, T>> {
        s.graph().in_phase(Phase::Head, || self.lin.forward(s, x))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ablation_flag_validation() {
        assert!(AblationFlags::ORIGINAL.validate().is_ok());
        assert!(AblationFlags::WITHOUT_H.validate().is_ok());
        assert!(AblationFlags::WITHOUT_E.validate().is_ok());
        assert!(AblationFlags::EQ6_ONLY.validate().is_ok());
        let bad = AblationFlags {
            use_h: true,
            use_e: false,
            eq6_only: true,
        };
        assert!(bad.validate().is_err());
        let none = AblationFlags {
            use_h: false,
            use_e: false,
            eq6_only: false,
        };
        assert!(none.validate().is_err());
    }

    #[test]
    fn ablation_names() {
        assert_eq!(AblationFlags::ORIGINAL.name(), "original");
        assert_eq!(AblationFlags::WITHOUT_H.name(), "without-h");
        assert_eq!(AblationFlags::WITHOUT_E.name(), "without-e");
        assert_eq!(AblationFlags::EQ6_ONLY.name(), "eq6");
        assert!(!AblationFlags::EQ6_ONLY.needs_state());
    }
}
