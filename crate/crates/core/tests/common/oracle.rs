//! Loop oracles for every primitive the models use.

use super::Mat;

pub fn matmul(a: &Mat, b: &Mat) -> Mat {
    let (m, p, n) = (a.len(), b.len(), b[0].len());
    let mut out = vec![vec![0.0; n]; m];
    for i in 0..m {
        for j in 0..n {
            let mut s = 0.0;
            for t in 0..p {
                s += a[i][t] * b[t][j];
            }
            out[i][j] = s;
        }
    }
    out
}

pub fn transpose(a: &Mat) -> Mat {
    (0..a[0].len())
        .map(|j| a.iter().map(|r| r[j]).collect())
        .collect()
}

pub fn softmax(row: &[f64], mask: Option<&[bool]>) -> Vec<f64> {
    let keep = |j: usize| mask.map_or(true, |m| m[j]);
    let max = (0..row.len())
        .filter(|&j| keep(j))
        .map(|j| row[j])
        .fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = (0..row.len())
        .map(|j| if keep(j) { (row[j] - max).exp() } else { 0.0 })
        .collect();
    let sum: f64 = exps.iter().sum();
    exps.iter().map(|e| e / sum).collect()
}

pub fn linear(x: &Mat, w: &Mat, b: &[f64]) -> Mat {
    matmul(x, w)
        .into_iter()
        .map(|r| r.iter().zip(b).map(|(v, bb)| v + bb).collect())
        .collect()
}

pub fn gelu(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (c * (x + 0.044715 * x.powi(3))).tanh())
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn layer_norm(x: &Mat, gamma: &[f64], beta: &[f64]) -> Mat {
    x.iter()
        .map(|r| {
            let n = r.len() as f64;
            let mean = r.iter().sum::<f64>() / n;
            let var = r.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            r.iter()
                .enumerate()
                .map(|(j, v)| (v - mean) / (var + 1e-5).sqrt() * gamma[j] + beta[j])
                .collect()
        })
        .collect()
}

pub struct LinearW {
    pub w: Mat,
    pub b: Vec<f64>,
}

pub struct FfnW {
    pub up: LinearW,
    pub down: LinearW,
}

pub fn ffn(x: &Mat, f: &FfnW) -> Mat {
    let h: Mat = linear(x, &f.up.w, &f.up.b)
        .into_iter()
        .map(|r| r.into_iter().map(gelu).collect())
        .collect();
    linear(&h, &f.down.w, &f.down.b)
}

pub struct MhaW {
    pub q: LinearW,
    pub k: LinearW,
    pub v: LinearW,
    pub o: LinearW,
    pub heads: usize,
}

/// Attention over already-projected rows, per head, concatenated.
pub fn attend(q: &Mat, k: &Mat, v: &Mat, heads: usize, key_mask: Option<&[bool]>) -> Mat {
    let d = q[0].len();
    let dh = d / heads;
    let mut out = vec![vec![0.0; d]; q.len()];
    for h in 0..heads {
        for i in 0..q.len() {
            let scores: Vec<f64> = (0..k.len())
                .map(|j| {
                    (0..dh).map(|t| q[i][h * dh + t] * k[j][h * dh + t]).sum::<f64>()
                        / (dh as f64).sqrt()
                })
                .collect();
            let p = softmax(&scores, key_mask);
            for t in 0..dh {
                out[i][h * dh + t] = (0..k.len()).map(|j| p[j] * v[j][h * dh + t]).sum();
            }
        }
    }
    out
}

pub fn mha(xq: &Mat, xkv: &Mat, w: &MhaW, key_mask: Option<&[bool]>) -> Mat {
    let q = linear(xq, &w.q.w, &w.q.b);
    let k = linear(xkv, &w.k.w, &w.k.b);
    let v = linear(xkv, &w.v.w, &w.v.b);
    let a = attend(&q, &k, &v, w.heads, key_mask);
    linear(&a, &w.o.w, &w.o.b)
}

pub fn add(a: &Mat, b: &Mat) -> Mat {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.iter().zip(y).map(|(p, q)| p + q).collect())
        .collect()
}

pub struct BlockW {
    pub ln1: (Vec<f64>, Vec<f64>),
    pub att: MhaW,
    pub ln2: (Vec<f64>, Vec<f64>),
    pub ffn: FfnW,
}

/// Pre-norm transformer block.
pub fn block(x: &Mat, w: &BlockW, mask: Option<&[bool]>) -> Mat {
    let a = layer_norm(x, &w.ln1.0, &w.ln1.1);
    let x1 = add(x, &mha(&a, &a, &w.att, mask));
    let b = layer_norm(&x1, &w.ln2.0, &w.ln2.1);
    add(&x1, &ffn(&b, &w.ffn))
}

/// Update-gate fusion: `z = σ([h*; h]·W + b)`, `z⊙h* + (1−z)⊙h`.
pub fn gate(h_star: &[f64], h_prev: &[f64], w: &LinearW) -> Vec<f64> {
    let cat: Vec<f64> = h_star.iter().chain(h_prev).copied().collect();
    let z = linear(&vec![cat], &w.w, &w.b).remove(0);
    (0..h_star.len())
        .map(|j| {
            let zj = sigmoid(z[j]);
            zj * h_star[j] + (1.0 - zj) * h_prev[j]
        })
        .collect()
}

pub fn mean_rows(x: &Mat) -> Vec<f64> {
    let n = x.len() as f64;
    (0..x[0].len())
        .map(|j| x.iter().map(|r| r[j]).sum::<f64>() / n)
        .collect()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn normalize(a: &[f64]) -> Vec<f64> {
    let n = dot(a, a).sqrt();
    a.iter().map(|x| x / n).collect()
}

pub fn maxsim(query: &Mat, cand: &Mat) -> f64 {
    query
        .iter()
        .map(|q| {
            let qn = normalize(q);
            cand.iter()
                .map(|c| dot(&qn, &normalize(c)))
                .fold(f64::NEG_INFINITY, f64::max)
        })
        .sum()
}

/// Candidate vector attends over query context vectors; the attended
/// vector is dotted with the candidate.
pub fn poly(ctx: &Mat, cand: &[f64]) -> f64 {
    let scores: Vec<f64> = ctx.iter().map(|c| dot(c, cand)).collect();
    let p = softmax(&scores, None);
    let attended: Vec<f64> = (0..cand.len())
        .map(|j| ctx.iter().zip(&p).map(|(c, w)| w * c[j]).sum())
        .collect();
    dot(&attended, cand)
}

/// Mean over rows of `logsumexp(row) − row[i]`.
pub fn in_batch_ce(scores: &Mat) -> f64 {
    let b = scores.len();
    (0..b)
        .map(|i| {
            let row = &scores[i];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|s| (s - max).exp()).sum::<f64>().ln();
            lse - row[i]
        })
        .sum::<f64>()
        / b as f64
}
