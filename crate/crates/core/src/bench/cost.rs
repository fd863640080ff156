//! Closed-form attention-module cost of each architecture.
//!
//! `h` is the hidden size, `q` and `d` the query and candidate lengths, `k`
//! the number of context embeddings and `nc` the candidates per query.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CostKind {
    Dual,
    Cross,
    Mix,
}

impl CostKind {
    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "dual" => Ok(CostKind::Dual),
            "cross" => Ok(CostKind::Cross),
            n if n == "mix" || n.starts_with("mix-") => Ok(CostKind::Mix),
            _ => Err(Error::Config(format!("no cost model for {name:?}"))),
        }
    }

    /// The online-cost expression.
    pub fn online_expression(self) -> &'static str {
        match self {
            CostKind::Dual => "hq^2 + h^2q",
            CostKind::Cross => "N_c(h(q+d)^2 + h^2(q+d))",
            CostKind::Mix => "hq^2 + h^2q + N_c(k + q + h)hk",
        }
    }

    pub fn precompute_expression(self) -> &'static str {
        match self {
            CostKind::Dual | CostKind::Mix => "hd^2 + h^2d",
            CostKind::Cross => "0",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostInputs {
    pub h: u64,
    pub q: u64,
    pub d: u64,
    pub k: u64,
    pub nc: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Cost {
    pub kind: CostKind,
    pub inputs: CostInputs,
    pub precompute: u128,
    pub online: u128,
}

impl fmt::Display for Cost {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let CostInputs { h, q, d, k, nc } = self.inputs;
        writeln!(f, "model: {:?} (h={h}, q={q}, d={d}, k={k}, N_c={nc})", self.kind)?;
        writeln!(f, "pre-computation: {} = {}", self.kind.precompute_expression(), self.precompute)?;
        write!(f, "online: {} = {}", self.kind.online_expression(), self.online)
    }
}

/// Evaluates the pre-computation and online cost. `nc = 0` is allowed; the
/// other inputs must be positive (`k` only for MixEncoder).
pub fn cost_eval(kind: CostKind, inputs: CostInputs) -> Result<Cost> {
    let CostInputs { h, q, d, k, nc } = inputs;
    if h == 0 || q == 0 || d == 0 || (kind == CostKind::Mix && k == 0) {
        return Err(Error::InvalidArgument(format!("cost inputs must be positive: {inputs:?}")));
    }
    let (h, q, d, k, nc) = (h as u128, q as u128, d as u128, k as u128, nc as u128);
    let encode = |len: u128| h * len * len + h * h * len;
    let (precompute, online) = match kind {
        CostKind::Dual => (encode(d), encode(q)),
        CostKind::Cross => (0, nc * encode(q + d)),
        CostKind::Mix => (encode(d), encode(q) + nc * (k + q + h) * h * k),
    };
    Ok(Cost {
        kind,
        inputs,
        precompute,
        online,
    })
}
