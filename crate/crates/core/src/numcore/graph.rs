//! Reverse-mode differentiation over a recorded op graph.
//!
//! A [`Graph`] owns every intermediate value of one forward pass. Ops are
//! appended in execution order, so node ids are already a topological order
//! and [`Graph::backward`] is a single reverse sweep.

use std::cell::{Cell, Ref, RefCell};
use std::fmt;
use std::rc::Rc;

use super::flops::{FlopCounter, Phase, Role};
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::scalar::{lit, Scalar};

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;
const NORM_EPS: f64 = 1e-12;

pub struct Graph<T: Scalar> {
    nodes: RefCell<Vec<Node<T>>>,
    grads: RefCell<Option<Vec<Option<Tensor<T>>>>>,
    grad_enabled: bool,
    phase: Cell<Phase>,
    role: Cell<Role>,
    flops: RefCell<FlopCounter>,
}

struct Node<T> {
    value: Rc<Tensor<T>>,
    requires_grad: bool,
    op: Op<T>,
}

#[derive(Clone, Debug)]
enum Bcast {
    Same,
    /// Input repeats with period equal to its element count.
    Suffix(usize),
    Map(Vec<usize>),
}

impl Bcast {
    #[inline]
    fn idx(&self, i: usize) -> usize {
        match self {
            Bcast::Same => i,
            Bcast::Suffix(n) => i % n,
            Bcast::Map(m) => m[i],
        }
    }

    /// Calls `f(i, idx(i))` for `i in 0..n` without a per-element dispatch.
    #[inline(always)]
    fn each(&self, n: usize, mut f: impl FnMut(usize, usize)) {
        match self {
            Bcast::Same => (0..n).for_each(|i| f(i, i)),
            Bcast::Suffix(p) => {
                for base in (0..n).step_by(*p) {
                    for j in 0..*p {
                        f(base + j, j);
                    }
                }
            }
            Bcast::Map(m) => m[..n].iter().enumerate().for_each(|(i, &j)| f(i, j)),
        }
    }
}

/// Calls `f(i, ia.idx(i), ib.idx(i))`, dispatching once when either side is
/// not broadcast.
#[inline(always)]
fn each_pair(ia: &Bcast, ib: &Bcast, n: usize, mut f: impl FnMut(usize, usize, usize)) {
    match (ia, ib) {
        (Bcast::Same, other) => other.each(n, |i, j| f(i, i, j)),
        (other, Bcast::Same) => other.each(n, |i, j| f(i, j, i)),
        _ => (0..n).for_each(|i| f(i, ia.idx(i), ib.idx(i))),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum UnaryKind {
    Gelu,
    Sigmoid,
    Abs,
}

enum Op<T> {
    Leaf,
    MatMul {
        a: usize,
        b: usize,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        shared_rhs: bool,
    },
    Binary {
        kind: BinaryKind,
        a: usize,
        b: usize,
        ia: Bcast,
        ib: Bcast,
    },
    Scale {
        a: usize,
        c: T,
    },
    AddScalar {
        a: usize,
    },
    Unary {
        kind: UnaryKind,
        a: usize,
    },
    SumAll {
        a: usize,
    },
    SumAxis {
        a: usize,
        outer: usize,
        len: usize,
        inner: usize,
    },
    MaxLast {
        a: usize,
        len: usize,
        argmax: Vec<usize>,
    },
    Softmax {
        a: usize,
    },
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Reshape {
        a: usize,
    },
    Permute {
        a: usize,
        axes: Vec<usize>,
    },
    Concat {
        parts: Vec<usize>,
        outer: usize,
        widths: Vec<usize>,
    },
    Slice {
        a: usize,
        outer: usize,
        len: usize,
        start: usize,
        width: usize,
    },
    Gather {
        table: usize,
        ids: Vec<usize>,
    },
    BroadcastTo {
        a: usize,
        map: Bcast,
    },
    CrossEntropy {
        logits: usize,
        targets: Vec<usize>,
        probs: Vec<T>,
    },
    L2Normalize {
        a: usize,
        norms: Vec<T>,
    },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul { .. } => "matmul",
            Op::Binary { .. } => "binary",
            Op::Scale { .. } => "scale",
            Op::AddScalar { .. } => "add_scalar",
            Op::Unary { .. } => "unary",
            Op::SumAll { .. } => "sum_all",
            Op::SumAxis { .. } => "sum_axis",
            Op::MaxLast { .. } => "max_last",
            Op::Softmax { .. } => "softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Reshape { .. } => "reshape",
            Op::Permute { .. } => "permute",
            Op::Concat { .. } => "concat",
            Op::Slice { .. } => "slice",
            Op::Gather { .. } => "gather",
            Op::BroadcastTo { .. } => "broadcast_to",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::L2Normalize { .. } => "l2_normalize",
        }
    }
}

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g, T: Scalar> {
    g: &'g Graph<T>,
    id: usize,
}

impl<T: Scalar> fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    /// A graph that records backward information.
    pub fn new() -> Self {
        Self::with_grad(true)
    }

    /// A graph for inference: leaves never require grad and no backward
    /// information is kept.
    pub fn no_grad() -> Self {
        Self::with_grad(false)
    }

    fn with_grad(grad_enabled: bool) -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            grads: RefCell::new(None),
            grad_enabled,
            phase: Cell::new(Phase::Other),
            role: Cell::new(Role::Other),
            flops: RefCell::new(FlopCounter::default()),
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Adds an input value. `requires_grad` is ignored on no-grad graphs.
    pub fn leaf(&self, value: Tensor<T>, requires_grad: bool) -> Var<'_, T> {
        self.leaf_rc(Rc::new(value), requires_grad)
    }

    pub fn leaf_rc(&self, value: Rc<Tensor<T>>, requires_grad: bool) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            requires_grad: requires_grad && self.grad_enabled,
            op: Op::Leaf,
        });
        Var {
            g: self,
            id: nodes.len() - 1,
        }
    }

    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.leaf(value, false)
    }

    pub fn phase(&self) -> Phase {
        self.phase.get()
    }

    /// Runs `f` with matmuls attributed to `phase`.
    pub fn in_phase<R>(&self, phase: Phase, f: impl FnOnce() -> R) -> R {
        let prev = self.phase.replace(phase);
        let out = f();
        self.phase.set(prev);
        out
    }

    /// Runs `f` with matmuls attributed to `role` within the current phase.
    pub fn in_role<R>(&self, role: Role, f: impl FnOnce() -> R) -> R {
        let prev = self.role.replace(role);
        let out = f();
        self.role.set(prev);
        out
    }

    pub fn flops(&self) -> FlopCounter {
        self.flops.borrow().clone()
    }

    fn push(&self, value: Tensor<T>, op: Op<T>, parents: &[usize]) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        let requires_grad = self.grad_enabled && parents.iter().any(|&p| nodes[p].requires_grad);
        let op = if requires_grad { op } else { Op::Leaf };
        nodes.push(Node {
            value: Rc::new(value),
            requires_grad,
            op,
        });
        Var {
            g: self,
            id: nodes.len() - 1,
        }
    }

    fn value(&self, id: usize) -> Rc<Tensor<T>> {
        self.nodes.borrow()[id].value.clone()
    }

    /// Backpropagates from a scalar `loss`, populating gradients of every
    /// node that requires them. May run once per graph.
    pub fn backward(&self, loss: Var<'_, T>) -> Result<()> {
        if self.grads.borrow().is_some() {
            return Err(Error::BackwardTwice);
        }
        let nodes = self.nodes.borrow();
        let loss_value = &nodes[loss.id].value;
        if loss_value.numel() != 1 {
            return Err(Error::NonScalarLoss(loss_value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..nodes.len()).map(|_| None).collect();
        if nodes[loss.id].requires_grad {
            grads[loss.id] = Some(Tensor::full(loss_value.shape().to_vec(), T::one()));
        }
        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            backprop_node(&nodes, id, &g, &mut grads);
            grads[id] = Some(g);
        }
        drop(nodes);
        *self.grads.borrow_mut() = Some(grads);
        Ok(())
    }

    pub fn grad(&self, var: Var<'_, T>) -> Option<Tensor<T>> {
        self.grads
            .borrow()
            .as_ref()
            .and_then(|g| g[var.id].clone())
    }
}

fn backprop_node<T: Scalar>(
    nodes: &[Node<T>],
    id: usize,
    g: &Tensor<T>,
    grads: &mut [Option<Tensor<T>>],
) {
    let node = &nodes[id];
    let gd = g.data();
    let mut acc = |pid: usize, f: &mut dyn FnMut(&mut [T])| {
        if !nodes[pid].requires_grad {
            return;
        }
        let slot =
            grads[pid].get_or_insert_with(|| Tensor::zeros(nodes[pid].value.shape().to_vec()));
        f(slot.data_mut());
    };
    match &node.op {
        Op::Leaf => {}
        &Op::MatMul {
            a,
            b,
            batch,
            m,
            k,
            n,
            shared_rhs,
        } => {
            let av = nodes[a].value.clone();
            let bv = nodes[b].value.clone();
            if shared_rhs {
                let rows = batch * m;
                acc(a, &mut |ga| {
                    T::gemm(rows, n, k, gd, (n, 1), bv.data(), (1, n), T::one(), ga)
                });
                acc(b, &mut |gb| {
                    T::gemm(k, rows, n, av.data(), (1, k), gd, (n, 1), T::one(), gb)
                });
            } else {
                acc(a, &mut |ga| {
                    for s in 0..batch {
                        T::gemm(
                            m,
                            n,
                            k,
                            &gd[s * m * n..],
                            (n, 1),
                            &bv.data()[s * k * n..],
                            (1, n),
                            T::one(),
                            &mut ga[s * m * k..(s + 1) * m * k],
                        );
                    }
                });
                acc(b, &mut |gb| {
                    for s in 0..batch {
                        T::gemm(
                            k,
                            m,
                            n,
                            &av.data()[s * m * k..],
                            (1, k),
                            &gd[s * m * n..],
                            (n, 1),
                            T::one(),
                            &mut gb[s * k * n..(s + 1) * k * n],
                        );
                    }
                });
            }
        }
        Op::Binary { kind, a, b, ia, ib } => {
            let av = nodes[*a].value.clone();
            let bv = nodes[*b].value.clone();
            let (ad, bd) = (av.data(), bv.data());
            let n = gd.len();
            match kind {
                BinaryKind::Add => {
                    acc(*a, &mut |ga| ia.each(n, |i, j| ga[j] += gd[i]));
                    acc(*b, &mut |gb| ib.each(n, |i, j| gb[j] += gd[i]));
                }
                BinaryKind::Sub => {
                    acc(*a, &mut |ga| ia.each(n, |i, j| ga[j] += gd[i]));
                    acc(*b, &mut |gb| ib.each(n, |i, j| gb[j] -= gd[i]));
                }
                BinaryKind::Mul => {
                    acc(*a, &mut |ga| each_pair(ia, ib, n, |i, ja, jb| ga[ja] += gd[i] * bd[jb]));
                    acc(*b, &mut |gb| each_pair(ia, ib, n, |i, ja, jb| gb[jb] += gd[i] * ad[ja]));
                }
                BinaryKind::Div => {
                    acc(*a, &mut |ga| each_pair(ia, ib, n, |i, ja, jb| ga[ja] += gd[i] / bd[jb]));
                    acc(*b, &mut |gb| {
                        each_pair(ia, ib, n, |i, ja, jb| {
                            let bv = bd[jb];
                            gb[jb] -= gd[i] * ad[ja] / (bv * bv);
                        })
                    });
                }
            }
        }
        &Op::Scale { a, c } => acc(a, &mut |ga| {
            for (x, &gi) in ga.iter_mut().zip(gd) {
                *x += gi * c;
            }
        }),
        &Op::AddScalar { a } => acc(a, &mut |ga| {
            for (x, &gi) in ga.iter_mut().zip(gd) {
                *x += gi;
            }
        }),
        &Op::Unary { kind, a } => {
            let xv = nodes[a].value.clone();
            let yv = node.value.clone();
            acc(a, &mut |ga| {
                for (i, x) in ga.iter_mut().enumerate() {
                    let xi = xv.data()[i];
                    let d = match kind {
                        UnaryKind::Gelu => gelu_grad(xi),
                        UnaryKind::Sigmoid => {
                            let y = yv.data()[i];
                            y * (T::one() - y)
                        }
                        UnaryKind::Abs => {
                            if xi > T::zero() {
                                T::one()
                            } else if xi < T::zero() {
                                -T::one()
                            } else {
                                T::zero()
                            }
                        }
                    };
                    *x += gd[i] * d;
                }
            });
        }
        &Op::SumAll { a } => acc(a, &mut |ga| {
            let gi = gd[0];
            for x in ga.iter_mut() {
                *x += gi;
            }
        }),
        &Op::SumAxis {
            a,
            outer,
            len,
            inner,
        } => acc(a, &mut |ga| {
            for o in 0..outer {
                for l in 0..len {
                    let dst = &mut ga[(o * len + l) * inner..(o * len + l + 1) * inner];
                    let src = &gd[o * inner..(o + 1) * inner];
                    for (x, &gi) in dst.iter_mut().zip(src) {
                        *x += gi;
                    }
                }
            }
        }),
        Op::MaxLast { a, len, argmax } => acc(*a, &mut |ga| {
            for (r, &j) in argmax.iter().enumerate() {
                ga[r * len + j] += gd[r];
            }
        }),
        &Op::Softmax { a } => {
            let y = node.value.clone();
            let w = y.last_dim();
            acc(a, &mut |ga| {
                for r in 0..y.numel() / w {
                    let yr = &y.data()[r * w..(r + 1) * w];
                    let gr = &gd[r * w..(r + 1) * w];
                    let dot: T = yr.iter().zip(gr).map(|(&yy, &gg)| yy * gg).sum();
                    for j in 0..w {
                        ga[r * w + j] += yr[j] * (gr[j] - dot);
                    }
                }
            });
        }
        Op::LayerNorm {
            x,
            gamma,
            beta,
            xhat,
            rstd,
        } => {
            let gam = nodes[*gamma].value.clone();
            let d = gam.numel();
            let rows = xhat.len() / d;
            acc(*gamma, &mut |gg| {
                for r in 0..rows {
                    for j in 0..d {
                        gg[j] += gd[r * d + j] * xhat[r * d + j];
                    }
                }
            });
            acc(*beta, &mut |gb| {
                for r in 0..rows {
                    for j in 0..d {
                        gb[j] += gd[r * d + j];
                    }
                }
            });
            acc(*x, &mut |gx| {
                let dn = lit::<T>(d as f64);
                let mut dxhat = vec![T::zero(); d];
                for r in 0..rows {
                    let mut mean_d = T::zero();
                    let mut mean_dx = T::zero();
                    for j in 0..d {
                        dxhat[j] = gd[r * d + j] * gam.data()[j];
                        mean_d += dxhat[j];
                        mean_dx += dxhat[j] * xhat[r * d + j];
                    }
                    mean_d /= dn;
                    mean_dx /= dn;
                    for j in 0..d {
                        gx[r * d + j] +=
                            rstd[r] * (dxhat[j] - mean_d - xhat[r * d + j] * mean_dx);
                    }
                }
            });
        }
        &Op::Reshape { a } => acc(a, &mut |ga| {
            for (x, &gi) in ga.iter_mut().zip(gd) {
                *x += gi;
            }
        }),
        Op::Permute { a, axes } => {
            let mut inverse = vec![0; axes.len()];
            for (i, &ax) in axes.iter().enumerate() {
                inverse[ax] = i;
            }
            let back = permute_data(gd, g.shape(), &inverse);
            acc(*a, &mut |ga| {
                for (x, &gi) in ga.iter_mut().zip(&back) {
                    *x += gi;
                }
            });
        }
        Op::Concat {
            parts,
            outer,
            widths,
        } => {
            let total: usize = widths.iter().sum();
            let mut offset = 0;
            for (&p, &w) in parts.iter().zip(widths) {
                acc(p, &mut |gp| {
                    for o in 0..*outer {
                        let src = &gd[o * total + offset..o * total + offset + w];
                        for (x, &gi) in gp[o * w..(o + 1) * w].iter_mut().zip(src) {
                            *x += gi;
                        }
                    }
                });
                offset += w;
            }
        }
        &Op::Slice {
            a,
            outer,
            len,
            start,
            width,
        } => acc(a, &mut |ga| {
            for o in 0..outer {
                let dst = &mut ga[o * len + start..o * len + start + width];
                for (x, &gi) in dst.iter_mut().zip(&gd[o * width..(o + 1) * width]) {
                    *x += gi;
                }
            }
        }),
        Op::Gather { table, ids } => {
            let d = g.last_dim();
            acc(*table, &mut |gt| {
                for (r, &id) in ids.iter().enumerate() {
                    for j in 0..d {
                        gt[id * d + j] += gd[r * d + j];
                    }
                }
            });
        }
        Op::BroadcastTo { a, map } => acc(*a, &mut |ga| {
            for (i, &gi) in gd.iter().enumerate() {
                ga[map.idx(i)] += gi;
            }
        }),
        Op::CrossEntropy {
            logits,
            targets,
            probs,
        } => {
            let b = targets.len();
            let c = probs.len() / b;
            let scale = gd[0] / lit::<T>(b as f64);
            acc(*logits, &mut |gl| {
                for (r, &t) in targets.iter().enumerate() {
                    for j in 0..c {
                        let onehot = if j == t { T::one() } else { T::zero() };
                        gl[r * c + j] += scale * (probs[r * c + j] - onehot);
                    }
                }
            });
        }
        Op::L2Normalize { a, norms } => {
            let y = node.value.clone();
            let w = y.last_dim();
            let eps = lit::<T>(NORM_EPS);
            acc(*a, &mut |ga| {
                for (r, &nrm) in norms.iter().enumerate() {
                    let yr = &y.data()[r * w..(r + 1) * w];
                    let gr = &gd[r * w..(r + 1) * w];
                    if nrm > eps {
                        let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                        for j in 0..w {
                            ga[r * w + j] += (gr[j] - yr[j] * dot) / nrm;
                        }
                    } else {
                        for j in 0..w {
                            ga[r * w + j] += gr[j] / eps;
                        }
                    }
                }
            });
        }
    }
}

/// `tanh` through one `exp`; libm's `tanhf` dominates GELU-heavy graphs.
#[inline]
fn tanh<T: Scalar>(x: T) -> T {
    let limit = lit::<T>(20.0);
    if x > limit {
        return T::one();
    }
    if x < -limit {
        return -T::one();
    }
    if x.abs() < lit::<T>(1e-3) {
        // Avoids cancellation in `e - 1`.
        let x2 = x * x;
        return x * (T::one() - x2 / lit::<T>(3.0) + lit::<T>(2.0 / 15.0) * x2 * x2);
    }
    let e = (x + x).exp();
    (e - T::one()) / (e + T::one())
}

fn gelu<T: Scalar>(x: T) -> T {
    let c = lit::<T>(GELU_C);
    let a = lit::<T>(GELU_A);
    let half = lit::<T>(0.5);
    half * x * (T::one() + tanh(c * (x + a * x * x * x)))
}

fn gelu_grad<T: Scalar>(x: T) -> T {
    let c = lit::<T>(GELU_C);
    let a = lit::<T>(GELU_A);
    let half = lit::<T>(0.5);
    let t = tanh(c * (x + a * x * x * x));
    half * (T::one() + t)
        + half * x * (T::one() - t * t) * c * (T::one() + lit::<T>(3.0) * a * x * x)
}

fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

fn broadcast_map(out: &[usize], input: &[usize]) -> Bcast {
    if out == input {
        return Bcast::Same;
    }
    let trimmed: &[usize] = {
        let lead = input.iter().take_while(|&&d| d == 1).count();
        &input[lead..]
    };
    if trimmed.len() <= out.len() && out[out.len() - trimmed.len()..] == *trimmed {
        return Bcast::Suffix(trimmed.iter().product::<usize>().max(1));
    }
    let rank = out.len();
    let pad = rank - input.len();
    let mut in_strides = vec![0usize; rank];
    let mut stride = 1;
    for i in (0..input.len()).rev() {
        in_strides[i + pad] = if input[i] == 1 { 0 } else { stride };
        stride *= input[i];
    }
    let numel: usize = out.iter().product();
    let mut map = Vec::with_capacity(numel);
    let mut index = vec![0usize; rank];
    let mut flat = 0usize;
    for _ in 0..numel {
        map.push(flat);
        for ax in (0..rank).rev() {
            index[ax] += 1;
            flat += in_strides[ax];
            if index[ax] < out[ax] {
                break;
            }
            flat -= in_strides[ax] * index[ax];
            index[ax] = 0;
        }
    }
    Bcast::Map(map)
}

fn permute_data<T: Copy>(data: &[T], shape: &[usize], axes: &[usize]) -> Vec<T> {
    let rank = shape.len();
    let mut strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let out_strides: Vec<usize> = axes.iter().map(|&a| strides[a]).collect();
    let mut out = Vec::with_capacity(data.len());
    if data.is_empty() {
        return out;
    }
    // Trailing axes left in place are copied as contiguous runs.
    let kept = (0..rank).rev().take_while(|&i| axes[i] == i).count();
    if kept > 0 && kept < rank {
        let run: usize = shape[rank - kept..].iter().product();
        let outer = rank - kept;
        let mut index = vec![0usize; outer];
        let mut src = 0usize;
        for _ in 0..data.len() / run {
            out.extend_from_slice(&data[src..src + run]);
            for ax in (0..outer).rev() {
                index[ax] += 1;
                src += out_strides[ax];
                if index[ax] < out_shape[ax] {
                    break;
                }
                src -= out_strides[ax] * index[ax];
                index[ax] = 0;
            }
        }
        return out;
    }
    let mut index = vec![0usize; rank];
    let mut src = 0usize;
    for _ in 0..data.len() {
        out.push(data[src]);
        for ax in (0..rank).rev() {
            index[ax] += 1;
            src += out_strides[ax];
            if index[ax] < out_shape[ax] {
                break;
            }
            src -= out_strides[ax] * index[ax];
            index[ax] = 0;
        }
    }
    out
}

/// Splits `shape` around `axis` into (outer, len, inner) element counts.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl<'g, T: Scalar> Var<'g, T> {
    pub fn graph(&self) -> &'g Graph<T> {
        self.g
    }

    pub fn value(&self) -> Rc<Tensor<T>> {
        self.g.value(self.id)
    }

    /// Borrow-free copy of the value's shape.
    pub fn shape(&self) -> Vec<usize> {
        let nodes: Ref<'_, Vec<Node<T>>> = self.g.nodes.borrow();
        nodes[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.g.nodes.borrow()[self.id].requires_grad
    }

    pub fn grad(&self) -> Option<Tensor<T>> {
        self.g.grad(*self)
    }

    fn unary_like(&self, data: Vec<T>, op: Op<T>) -> Var<'g, T> {
        let shape = self.shape();
        self.g.push(Tensor::new(shape, data).unwrap(), op, &[self.id])
    }

    /// Matrix product over the last two axes. The right operand is either
    /// 2-D (shared across every leading index of `self`) or has the same
    /// leading axes as `self`.
    pub fn matmul(&self, rhs: Var<'g, T>) -> Result<Var<'g, T>> {
        let av = self.value();
        let bv = rhs.value();
        let (ash, bsh) = (av.shape(), bv.shape());
        if ash.len() < 2 || bsh.len() < 2 {
            return Err(Error::shape("matmul", ash, bsh));
        }
        let k = ash[ash.len() - 1];
        let m = ash[ash.len() - 2];
        let n = bsh[bsh.len() - 1];
        if bsh[bsh.len() - 2] != k {
            return Err(Error::shape("matmul", ash, bsh));
        }
        let shared_rhs = bsh.len() == 2;
        if !shared_rhs && ash[..ash.len() - 2] != bsh[..bsh.len() - 2] {
            return Err(Error::shape("matmul", ash, bsh));
        }
        let batch: usize = ash[..ash.len() - 2].iter().product();
        let mut out_shape = ash.to_vec();
        *out_shape.last_mut().unwrap() = n;
        let mut out = vec![T::zero(); batch * m * n];
        if shared_rhs {
            T::gemm(batch * m, k, n, av.data(), (k, 1), bv.data(), (n, 1), T::zero(), &mut out);
        } else {
            for s in 0..batch {
                T::gemm(
                    m,
                    k,
                    n,
                    &av.data()[s * m * k..],
                    (k, 1),
                    &bv.data()[s * k * n..],
                    (n, 1),
                    T::zero(),
                    &mut out[s * m * n..(s + 1) * m * n],
                );
            }
        }
        self.g
            .flops
            .borrow_mut()
            .add(self.g.phase.get(), self.g.role.get(), (batch * m * k * n) as u64);
        let op = Op::MatMul {
            a: self.id,
            b: rhs.id,
            batch,
            m,
            k,
            n,
            shared_rhs,
        };
        Ok(self
            .g
            .push(Tensor::new(out_shape, out)?, op, &[self.id, rhs.id]))
    }

    fn binary(&self, rhs: Var<'g, T>, kind: BinaryKind) -> Result<Var<'g, T>> {
        let av = self.value();
        let bv = rhs.value();
        let out_shape = broadcast_shape(av.shape(), bv.shape()).ok_or_else(|| {
            Error::shape("elementwise", av.shape(), bv.shape())
        })?;
        let ia = broadcast_map(&out_shape, av.shape());
        let ib = broadcast_map(&out_shape, bv.shape());
        let numel: usize = out_shape.iter().product();
        let (ad, bd) = (av.data(), bv.data());
        let f = |x: T, y: T| match kind {
            BinaryKind::Add => x + y,
            BinaryKind::Sub => x - y,
            BinaryKind::Mul => x * y,
            BinaryKind::Div => x / y,
        };
        let mut out = vec![T::zero(); numel];
        each_pair(&ia, &ib, numel, |i, ja, jb| out[i] = f(ad[ja], bd[jb]));
        let op = Op::Binary {
            kind,
            a: self.id,
            b: rhs.id,
            ia,
            ib,
        };
        Ok(self
            .g
            .push(Tensor::new(out_shape, out)?, op, &[self.id, rhs.id]))
    }

    /// Elementwise sum with numpy-style broadcasting.
    pub fn add(&self, rhs: Var<'g, T>) -> Result<Var<'g, T>> {
        self.binary(rhs, BinaryKind::Add)
    }

    pub fn sub(&self, rhs: Var<'g, T>) -> Result<Var<'g, T>> {
        self.binary(rhs, BinaryKind::Sub)
    }

    pub fn mul(&self, rhs: Var<'g, T>) -> Result<Var<'g, T>> {
        self.binary(rhs, BinaryKind::Mul)
    }

    pub fn div(&self, rhs: Var<'g, T>) -> Result<Var<'g, T>> {
        self.binary(rhs, BinaryKind::Div)
    }

    pub fn scale(&self, c: T) -> Var<'g, T> {
        let data = self.value().data().iter().map(|&x| x * c).collect();
        self.unary_like(data, Op::Scale { a: self.id, c })
    }

    pub fn add_scalar(&self, c: T) -> Var<'g, T> {
        let data = self.value().data().iter().map(|&x| x + c).collect();
        self.unary_like(data, Op::AddScalar { a: self.id })
    }

    /// `1 - x`.
    pub fn one_minus(&self) -> Var<'g, T> {
        self.scale(-T::one()).add_scalar(T::one())
    }

    fn unary(&self, kind: UnaryKind) -> Var<'g, T> {
        let data = self
            .value()
            .data()
            .iter()
            .map(|&x| match kind {
                UnaryKind::Gelu => gelu(x),
                UnaryKind::Sigmoid => sigmoid(x),
                UnaryKind::Abs => x.abs(),
            })
            .collect();
        self.unary_like(data, Op::Unary { kind, a: self.id })
    }

    /// GELU, tanh approximation.
    pub fn gelu(&self) -> Var<'g, T> {
        self.unary(UnaryKind::Gelu)
    }

    pub fn sigmoid(&self) -> Var<'g, T> {
        self.unary(UnaryKind::Sigmoid)
    }

    pub fn abs(&self) -> Var<'g, T> {
        self.unary(UnaryKind::Abs)
    }

    pub fn sum_all(&self) -> Var<'g, T> {
        let s: T = self.value().data().iter().copied().sum();
        self.g
            .push(Tensor::scalar(s), Op::SumAll { a: self.id }, &[self.id])
    }

    /// Sums out `axis`, removing it from the shape.
    pub fn sum_axis(&self, axis: usize) -> Result<Var<'g, T>> {
        let v = self.value();
        if axis >= v.rank() {
            return Err(Error::shape("sum_axis", v.shape(), &[axis]));
        }
        let (outer, len, inner) = split_axis(v.shape(), axis);
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let src = &v.data()[(o * len + l) * inner..(o * len + l + 1) * inner];
                for (x, &s) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *x += s;
                }
            }
        }
        let mut shape = v.shape().to_vec();
        shape.remove(axis);
        let op = Op::SumAxis {
            a: self.id,
            outer,
            len,
            inner,
        };
        Ok(self.g.push(Tensor::new(shape, out)?, op, &[self.id]))
    }

    pub fn mean_axis(&self, axis: usize) -> Result<Var<'g, T>> {
        let len = self.shape().get(axis).copied().unwrap_or(1);
        Ok(self.sum_axis(axis)?.scale(T::one() / lit::<T>(len as f64)))
    }

    /// Maximum over the last axis (removed from the shape).
    pub fn max_last(&self) -> Result<Var<'g, T>> {
        let v = self.value();
        let len = v.last_dim();
        if v.rank() == 0 || len == 0 {
            return Err(Error::shape("max_last", v.shape(), &[]));
        }
        let rows = v.numel() / len;
        let mut out = Vec::with_capacity(rows);
        let mut argmax = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = v.row(r);
            let (j, &m) = row
                .iter()
                .enumerate()
                .fold((0, &row[0]), |best, (j, x)| if *x > *best.1 { (j, x) } else { best });
            out.push(m);
            argmax.push(j);
        }
        let mut shape = v.shape().to_vec();
        shape.pop();
        let op = Op::MaxLast {
            a: self.id,
            len,
            argmax,
        };
        Ok(self.g.push(Tensor::new(shape, out)?, op, &[self.id]))
    }

    /// Softmax over the last axis. `mask`, when given, has one entry per
    /// element (`true` keeps it); masked outputs are exactly zero.
    pub fn softmax_last(&self, mask: Option<&[bool]>) -> Result<Var<'g, T>> {
        let v = self.value();
        let w = v.last_dim();
        if let Some(m) = mask {
            if m.len() != v.numel() {
                return Err(Error::shape("softmax mask", v.shape(), &[m.len()]));
            }
        }
        let rows = if w == 0 { 0 } else { v.numel() / w };
        let mut out = vec![T::zero(); v.numel()];
        for r in 0..rows {
            let xr = v.row(r);
            let keep = |j: usize| mask.map_or(true, |m| m[r * w + j]);
            let mut max = T::neg_infinity();
            let mut any = false;
            for j in 0..w {
                if keep(j) {
                    any = true;
                    if xr[j] > max {
                        max = xr[j];
                    }
                }
            }
            if !any {
                return Err(Error::FullyMasked { row: r });
            }
            let mut sum = T::zero();
            for j in 0..w {
                if keep(j) {
                    let e = (xr[j] - max).exp();
                    out[r * w + j] = e;
                    sum += e;
                }
            }
            for x in &mut out[r * w..(r + 1) * w] {
                *x /= sum;
            }
        }
        Ok(self.g.push(
            Tensor::new(v.shape().to_vec(), out)?,
            Op::Softmax { a: self.id },
            &[self.id],
        ))
    }

    /// Normalizes the last axis to zero mean and unit variance, then applies
    /// `gamma` and `beta` (both shaped like the last axis).
    pub fn layer_norm(&self, gamma: Var<'g, T>, beta: Var<'g, T>, eps: f64) -> Result<Var<'g, T>> {
        let x = self.value();
        let gv = gamma.value();
        let bv = beta.value();
        let d = x.last_dim();
        if gv.numel() != d || bv.numel() != d {
            return Err(Error::shape("layer_norm", x.shape(), gv.shape()));
        }
        let rows = x.numel() / d.max(1);
        let dn = lit::<T>(d as f64);
        let eps = lit::<T>(eps);
        let mut xhat = vec![T::zero(); x.numel()];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); x.numel()];
        for r in 0..rows {
            let xr = x.row(r);
            let mean = xr.iter().copied().sum::<T>() / dn;
            let var = xr.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (xr[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = h * gv.data()[j] + bv.data()[j];
            }
        }
        let op = Op::LayerNorm {
            x: self.id,
            gamma: gamma.id,
            beta: beta.id,
            xhat,
            rstd,
        };
        Ok(self.g.push(
            Tensor::new(x.shape().to_vec(), out)?,
            op,
            &[self.id, gamma.id, beta.id],
        ))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'g, T>> {
        let v = self.value();
        let t = (*v).clone().reshape(shape.to_vec())?;
        Ok(self.g.push(t, Op::Reshape { a: self.id }, &[self.id]))
    }

    pub fn permute(&self, axes: &[usize]) -> Result<Var<'g, T>> {
        let v = self.value();
        let mut seen = vec![false; v.rank()];
        if axes.len() != v.rank() || axes.iter().any(|&a| a >= v.rank() || std::mem::replace(&mut seen[a], true)) {
            return Err(Error::shape("permute", v.shape(), axes));
        }
        let data = permute_data(v.data(), v.shape(), axes);
        let shape: Vec<usize> = axes.iter().map(|&a| v.shape()[a]).collect();
        Ok(self.g.push(
            Tensor::new(shape, data)?,
            Op::Permute {
                a: self.id,
                axes: axes.to_vec(),
            },
            &[self.id],
        ))
    }

    /// Swaps the last two axes.
    pub fn transpose(&self) -> Result<Var<'g, T>> {
        let r = self.shape().len();
        if r < 2 {
            return Err(Error::shape("transpose", &self.shape(), &[]));
        }
        let mut axes: Vec<usize> = (0..r).collect();
        axes.swap(r - 1, r - 2);
        self.permute(&axes)
    }

    /// `width` consecutive entries of `axis` starting at `start`.
    pub fn slice(&self, axis: usize, start: usize, width: usize) -> Result<Var<'g, T>> {
        let v = self.value();
        if axis >= v.rank() || start + width > v.shape()[axis] {
            return Err(Error::shape("slice", v.shape(), &[axis, start, width]));
        }
        let (outer, len, inner) = split_axis(v.shape(), axis);
        let mut out = Vec::with_capacity(outer * width * inner);
        for o in 0..outer {
            out.extend_from_slice(&v.data()[(o * len + start) * inner..(o * len + start + width) * inner]);
        }
        let mut shape = v.shape().to_vec();
        shape[axis] = width;
        let op = Op::Slice {
            a: self.id,
            outer,
            len: len * inner,
            start: start * inner,
            width: width * inner,
        };
        Ok(self.g.push(Tensor::new(shape, out)?, op, &[self.id]))
    }

    /// Rows of a 2-D table selected by `ids`.
    pub fn gather_rows(&self, ids: &[usize]) -> Result<Var<'g, T>> {
        let v = self.value();
        if v.rank() != 2 {
            return Err(Error::shape("gather_rows", v.shape(), &[]));
        }
        let (rows, d) = (v.shape()[0], v.shape()[1]);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= rows {
                return Err(Error::OutOfVocab {
                    id: id as u32,
                    size: rows,
                });
            }
            out.extend_from_slice(v.row(id));
        }
        Ok(self.g.push(
            Tensor::new([ids.len(), d], out)?,
            Op::Gather {
                table: self.id,
                ids: ids.to_vec(),
            },
            &[self.id],
        ))
    }

    pub fn broadcast_to(&self, shape: &[usize]) -> Result<Var<'g, T>> {
        let v = self.value();
        match broadcast_shape(v.shape(), shape) {
            Some(s) if s == shape => {}
            _ => return Err(Error::shape("broadcast_to", v.shape(), shape)),
        }
        let map = broadcast_map(shape, v.shape());
        let numel: usize = shape.iter().product();
        let data = (0..numel).map(|i| v.data()[map.idx(i)]).collect();
        Ok(self.g.push(
            Tensor::new(shape.to_vec(), data)?,
            Op::BroadcastTo { a: self.id, map },
            &[self.id],
        ))
    }

    /// Mean cross-entropy of `[B, C]` logits against class targets.
    pub fn cross_entropy(&self, targets: &[usize]) -> Result<Var<'g, T>> {
        let v = self.value();
        if v.rank() != 2 || v.shape()[0] != targets.len() || targets.is_empty() {
            return Err(Error::shape("cross_entropy", v.shape(), &[targets.len()]));
        }
        let c = v.shape()[1];
        let mut probs = vec![T::zero(); v.numel()];
        let mut loss = T::zero();
        for (r, &t) in targets.iter().enumerate() {
            if t >= c {
                return Err(Error::InvalidArgument(format!("target {t} >= {c} classes")));
            }
            let row = v.row(r);
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let sum: T = row.iter().map(|&x| (x - max).exp()).sum();
            let lse = max + sum.ln();
            loss += lse - row[t];
            for j in 0..c {
                probs[r * c + j] = (row[j] - lse).exp();
            }
        }
        loss /= lit::<T>(targets.len() as f64);
        let op = Op::CrossEntropy {
            logits: self.id,
            targets: targets.to_vec(),
            probs,
        };
        Ok(self.g.push(Tensor::scalar(loss), op, &[self.id]))
    }

    /// Scales every slice along the last axis to unit Euclidean norm.
    pub fn l2_normalize_last(&self) -> Var<'g, T> {
        let v = self.value();
        let w = v.last_dim();
        let rows = v.numel() / w.max(1);
        let eps = lit::<T>(NORM_EPS);
        let mut norms = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(v.numel());
        for r in 0..rows {
            let row = v.row(r);
            let n = row.iter().map(|&x| x * x).sum::<T>().sqrt();
            norms.push(n);
            let denom = n.max(eps);
            out.extend(row.iter().map(|&x| x / denom));
        }
        self.unary_like(out, Op::L2Normalize { a: self.id, norms })
    }
}

/// Concatenates along `axis`; all other axes must agree.
pub fn concat<'g, T: Scalar>(parts: &[Var<'g, T>], axis: usize) -> Result<Var<'g, T>> {
    let first = parts.first().ok_or(Error::Empty("concat"))?;
    let g = first.g;
    let values: Vec<Rc<Tensor<T>>> = parts.iter().map(Var::value).collect();
    let base = values[0].shape().to_vec();
    if axis >= base.len() {
        return Err(Error::shape("concat", &base, &[axis]));
    }
    for v in &values {
        let s = v.shape();
        if s.len() != base.len()
            || s.iter().zip(&base).enumerate().any(|(i, (a, b))| i != axis && a != b)
        {
            return Err(Error::shape("concat", &base, s));
        }
    }
    let outer: usize = base[..axis].iter().product();
    let widths: Vec<usize> = values
        .iter()
        .map(|v| v.shape()[axis..].iter().product())
        .collect();
    let total: usize = widths.iter().sum();
    let mut out = Vec::with_capacity(outer * total);
    for o in 0..outer {
        for (v, &w) in values.iter().zip(&widths) {
            out.extend_from_slice(&v.data()[o * w..(o + 1) * w]);
        }
    }
    let mut shape = base;
    shape[axis] = values.iter().map(|v| v.shape()[axis]).sum();
    let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
    let op = Op::Concat {
        parts: ids.clone(),
        outer,
        widths,
    };
    Ok(g.push(Tensor::new(shape, out)?, op, &ids))
}

impl<T: Scalar> fmt::Debug for Graph<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let nodes = self.nodes.borrow();
        let mut d = f.debug_list();
        for n in nodes.iter() {
            d.entry(&format_args!("{}{:?}", n.op.name(), n.value.shape()));
        }
        d.finish()
    }
}
