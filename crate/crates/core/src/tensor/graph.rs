//! Reverse-mode tape. Each op records its parents and a closure mapping the
//! output gradient to parent gradients.

use std::sync::atomic::{AtomicU64, Ordering};

use super::gemm::gemm;
use super::store::{ParamId, ParamStore};
use super::Tensor;
use crate::error::{Error, Result};

static NEXT_GRAPH_ID: AtomicU64 = AtomicU64::new(1);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var {
    idx: usize,
    graph: u64,
}

pub(crate) type BackwardFn = Box<dyn Fn(&BackwardCtx<'_>) -> Vec<Option<Vec<f64>>>>;

struct Node {
    value: Tensor,
    parents: Vec<usize>,
    backward: Option<BackwardFn>,
    param: Option<ParamId>,
    requires_grad: bool,
}

/// What an op's backward closure sees.
pub(crate) struct BackwardCtx<'a> {
    nodes: &'a [Node],
    parents: &'a [usize],
    pub(crate) out: &'a Tensor,
    pub(crate) grad: &'a [f64],
}

impl<'a> BackwardCtx<'a> {
    pub(crate) fn input(&self, i: usize) -> &'a Tensor {
        &self.nodes[self.parents[i]].value
    }

    pub(crate) fn needs(&self, i: usize) -> bool {
        self.nodes[self.parents[i]].requires_grad
    }
}

pub struct Graph {
    id: u64,
    nodes: Vec<Node>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of one backward pass, kept for leaf nodes.
pub struct Gradients {
    graph: u64,
    leaves: Vec<Option<Vec<f64>>>,
    params: Vec<(ParamId, usize)>,
}

impl Gradients {
    /// Gradient with respect to a leaf created by [`Graph::input`] or [`Graph::param`].
    pub fn wrt(&self, var: Var) -> Option<&[f64]> {
        if var.graph != self.graph {
            return None;
        }
        self.leaves.get(var.idx).and_then(|g| g.as_deref())
    }

    /// Adds parameter gradients into the store (accumulating across calls).
    pub fn accumulate_into(&self, store: &mut ParamStore) {
        for &(id, idx) in &self.params {
            if let Some(g) = &self.leaves[idx] {
                store.accumulate_grad(id, g);
            }
        }
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph {
            id: NEXT_GRAPH_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn check(&self, v: Var) -> usize {
        assert_eq!(v.graph, self.id, "variable belongs to a different graph");
        v.idx
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[self.check(v)].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    fn leaf(&mut self, value: Tensor, param: Option<ParamId>, requires_grad: bool) -> Var {
        let idx = self.nodes.len();
        self.nodes.push(Node {
            value,
            parents: Vec::new(),
            backward: None,
            param,
            requires_grad,
        });
        Var { idx, graph: self.id }
    }

    /// A value that never receives gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, None, false)
    }

    /// A leaf whose gradient is reported by [`Gradients::wrt`].
    pub fn input(&mut self, value: Tensor) -> Var {
        self.leaf(value, None, true)
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let trainable = !store.is_buffer(id);
        self.leaf(store.value(id).clone(), Some(id), trainable)
    }

    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    pub(crate) fn push(&mut self, value: Tensor, parents: &[Var], backward: BackwardFn) -> Var {
        let parent_idx: Vec<usize> = parents.iter().map(|&p| self.check(p)).collect();
        let requires_grad = parent_idx.iter().any(|&p| self.nodes[p].requires_grad);
        let idx = self.nodes.len();
        self.nodes.push(Node {
            value,
            parents: parent_idx,
            backward: if requires_grad { Some(backward) } else { None },
            param: None,
            requires_grad,
        });
        Var { idx, graph: self.id }
    }

    /// Reverse-mode accumulation from a scalar loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if loss.graph != self.id || loss.idx >= self.nodes.len() {
            return Err(Error::NoForward);
        }
        if self.nodes[loss.idx].value.len() != 1 {
            return Err(Error::Shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.idx].value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..=loss.idx).map(|_| None).collect();
        grads[loss.idx] = Some(vec![1.0]);
        let mut leaves: Vec<Option<Vec<f64>>> = (0..=loss.idx).map(|_| None).collect();
        let mut params = Vec::new();
        for i in (0..=loss.idx).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.backward {
                None => {
                    if node.requires_grad {
                        if let Some(pid) = node.param {
                            params.push((pid, i));
                        }
                        leaves[i] = Some(g);
                    }
                }
                Some(f) => {
                    let ctx = BackwardCtx {
                        nodes: &self.nodes,
                        parents: &node.parents,
                        out: &node.value,
                        grad: &g,
                    };
                    let parent_grads = f(&ctx);
                    debug_assert_eq!(parent_grads.len(), node.parents.len());
                    for (&p, pg) in node.parents.iter().zip(parent_grads) {
                        let Some(pg) = pg else { continue };
                        if !self.nodes[p].requires_grad {
                            continue;
                        }
                        match &mut grads[p] {
                            Some(acc) => acc.iter_mut().zip(&pg).for_each(|(a, b)| *a += b),
                            slot @ None => *slot = Some(pg),
                        }
                    }
                }
            }
        }
        params.reverse();
        Ok(Gradients {
            graph: self.id,
            leaves,
            params,
        })
    }

    // ----- elementwise -------------------------------------------------------

    fn broadcast_binary(&mut self, a: Var, b: Var, op: BinaryOp) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa == sb {
            let (va, vb) = (self.value(a).data(), self.value(b).data());
            let data: Vec<f64> = match op {
                BinaryOp::Add => va.iter().zip(vb).map(|(x, y)| x + y).collect(),
                BinaryOp::Mul => va.iter().zip(vb).map(|(x, y)| x * y).collect(),
            };
            let out = Tensor::from_vec(&sa, data)?;
            return Ok(self.push(
                out,
                &[a, b],
                Box::new(move |ctx| {
                    let g = ctx.grad;
                    match op {
                        BinaryOp::Add => vec![Some(g.to_vec()), Some(g.to_vec())],
                        BinaryOp::Mul => {
                            let (x, y) = (ctx.input(0).data(), ctx.input(1).data());
                            vec![
                                ctx.needs(0).then(|| g.iter().zip(y).map(|(g, y)| g * y).collect()),
                                ctx.needs(1).then(|| g.iter().zip(x).map(|(g, x)| g * x).collect()),
                            ]
                        }
                    }
                }),
            ));
        }
        if sa.len() != sb.len() {
            return Err(Error::Shape(format!("cannot broadcast {sa:?} with {sb:?}")));
        }
        let mut out_shape = Vec::with_capacity(sa.len());
        for (&x, &y) in sa.iter().zip(&sb) {
            if x == y || y == 1 {
                out_shape.push(x);
            } else if x == 1 {
                out_shape.push(y);
            } else {
                return Err(Error::Shape(format!("cannot broadcast {sa:?} with {sb:?}")));
            }
        }
        let ia = broadcast_index(&sa, &out_shape);
        let ib = broadcast_index(&sb, &out_shape);
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        let data: Vec<f64> = ia
            .iter()
            .zip(&ib)
            .map(|(&i, &j)| match op {
                BinaryOp::Add => va[i] + vb[j],
                BinaryOp::Mul => va[i] * vb[j],
            })
            .collect();
        let out = Tensor::from_vec(&out_shape, data)?;
        let (na, nb) = (va.len(), vb.len());
        Ok(self.push(
            out,
            &[a, b],
            Box::new(move |ctx| {
                let g = ctx.grad;
                let mut ga = ctx.needs(0).then(|| vec![0.0; na]);
                let mut gb = ctx.needs(1).then(|| vec![0.0; nb]);
                let (x, y) = (ctx.input(0).data(), ctx.input(1).data());
                for (k, (&i, &j)) in ia.iter().zip(&ib).enumerate() {
                    match op {
                        BinaryOp::Add => {
                            if let Some(ga) = &mut ga {
                                ga[i] += g[k];
                            }
                            if let Some(gb) = &mut gb {
                                gb[j] += g[k];
                            }
                        }
                        BinaryOp::Mul => {
                            if let Some(ga) = &mut ga {
                                ga[i] += g[k] * y[j];
                            }
                            if let Some(gb) = &mut gb {
                                gb[j] += g[k] * x[i];
                            }
                        }
                    }
                }
                vec![ga, gb]
            }),
        ))
    }

    /// Element-wise sum with same-rank broadcasting over size-1 axes.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.broadcast_binary(a, b, BinaryOp::Add)
    }

    /// Element-wise product with same-rank broadcasting over size-1 axes.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.broadcast_binary(a, b, BinaryOp::Mul)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a);
        let out = Tensor {
            shape: v.shape().to_vec(),
            data: v.data().iter().map(|x| x * s).collect(),
        };
        self.push(
            out,
            &[a],
            Box::new(move |ctx| vec![Some(ctx.grad.iter().map(|g| g * s).collect())]),
        )
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let out = Tensor {
            shape: v.shape().to_vec(),
            data: v.data().iter().map(|&x| if x > 0.0 { x } else { 0.0 }).collect(),
        };
        self.push(
            out,
            &[a],
            Box::new(|ctx| {
                let x = ctx.input(0).data();
                vec![Some(
                    ctx.grad
                        .iter()
                        .zip(x)
                        .map(|(g, &x)| if x > 0.0 { *g } else { 0.0 })
                        .collect(),
                )]
            }),
        )
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let out = Tensor {
            shape: v.shape().to_vec(),
            data: v.data().iter().map(|&x| super::loss::sigmoid(x)).collect(),
        };
        self.push(
            out,
            &[a],
            Box::new(|ctx| {
                let y = ctx.out.data();
                vec![Some(ctx.grad.iter().zip(y).map(|(g, &y)| g * y * (1.0 - y)).collect())]
            }),
        )
    }

    /// Keeps values `>= threshold` and zeroes the rest; gradient flows through kept entries.
    pub fn threshold_mask(&mut self, a: Var, threshold: f64) -> Var {
        let v = self.value(a);
        let out = Tensor {
            shape: v.shape().to_vec(),
            data: v.data().iter().map(|&x| if x >= threshold { x } else { 0.0 }).collect(),
        };
        self.push(
            out,
            &[a],
            Box::new(move |ctx| {
                let x = ctx.input(0).data();
                vec![Some(
                    ctx.grad
                        .iter()
                        .zip(x)
                        .map(|(g, &x)| if x >= threshold { *g } else { 0.0 })
                        .collect(),
                )]
            }),
        )
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        let n = self.value(a).len();
        self.push(
            Tensor::scalar(s),
            &[a],
            Box::new(move |ctx| vec![Some(vec![ctx.grad[0]; n])]),
        )
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len().max(1);
        let s = self.sum(a);
        self.scale(s, 1.0 / n as f64)
    }

    /// Weighted sum of scalar terms.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Result<Var> {
        let mut total = 0.0;
        for &(v, w) in terms {
            let t = self.value(v);
            if t.len() != 1 {
                return Err(Error::Shape(format!(
                    "weighted_sum expects scalars, got {:?}",
                    t.shape()
                )));
            }
            total += w * t.data()[0];
        }
        let weights: Vec<f64> = terms.iter().map(|t| t.1).collect();
        let vars: Vec<Var> = terms.iter().map(|t| t.0).collect();
        Ok(self.push(
            Tensor::scalar(total),
            &vars,
            Box::new(move |ctx| weights.iter().map(|w| Some(vec![w * ctx.grad[0]])).collect()),
        ))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).clone().reshape(shape)?;
        Ok(self.push(out, &[a], Box::new(|ctx| vec![Some(ctx.grad.to_vec())])))
    }

    /// Concatenates along axis 1 (channels for NCHW, features for `[N, F]`).
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Shape("concat of zero tensors".into()));
        }
        let first = self.shape(parts[0]).to_vec();
        if first.len() < 2 {
            return Err(Error::Shape(format!("concat needs rank >= 2, got {first:?}")));
        }
        let outer = first[0];
        let inner: usize = first[2..].iter().product();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s.len() != first.len() || s[0] != outer || s[2..] != first[2..] {
                return Err(Error::Shape(format!("cannot concat {s:?} with {first:?} along axis 1")));
            }
            widths.push(s[1]);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (&p, &c) in parts.iter().zip(&widths) {
                let src = self.value(p).data();
                data.extend_from_slice(&src[o * c * inner..(o + 1) * c * inner]);
            }
        }
        let mut shape = first.clone();
        shape[1] = total;
        let out = Tensor::from_vec(&shape, data)?;
        Ok(self.push(
            out,
            parts,
            Box::new(move |ctx| {
                let mut grads: Vec<Option<Vec<f64>>> = Vec::with_capacity(widths.len());
                let mut offset = 0;
                for (i, &c) in widths.iter().enumerate() {
                    if ctx.needs(i) {
                        let mut g = Vec::with_capacity(outer * c * inner);
                        for o in 0..outer {
                            let base = (o * total + offset) * inner;
                            g.extend_from_slice(&ctx.grad[base..base + c * inner]);
                        }
                        grads.push(Some(g));
                    } else {
                        grads.push(None);
                    }
                    offset += c;
                }
                grads
            }),
        ))
    }

    /// `x · W + b` for `x: [N, F]`, `W: [F, O]`, `b: [O]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (n, f) = match self.shape(x) {
            &[n, f] => (n, f),
            s => return Err(Error::Shape(format!("linear input must be [N, F], got {s:?}"))),
        };
        let o = match self.shape(w) {
            &[wf, o] if wf == f => o,
            s => return Err(Error::Shape(format!("linear weight must be [{f}, O], got {s:?}"))),
        };
        if let Some(b) = b {
            if self.shape(b) != [o] {
                return Err(Error::Shape(format!(
                    "linear bias must be [{o}], got {:?}",
                    self.shape(b)
                )));
            }
        }
        let mut data = vec![0.0; n * o];
        if let Some(b) = b {
            let bv = self.value(b).data();
            for row in data.chunks_mut(o) {
                row.copy_from_slice(bv);
            }
        }
        gemm(
            n,
            f,
            o,
            self.value(x).data(),
            false,
            self.value(w).data(),
            false,
            &mut data,
            if b.is_some() { 1.0 } else { 0.0 },
        );
        let out = Tensor::from_vec(&[n, o], data)?;
        let parents: Vec<Var> = match b {
            Some(b) => vec![x, w, b],
            None => vec![x, w],
        };
        Ok(self.push(
            out,
            &parents,
            Box::new(move |ctx| {
                let g = ctx.grad;
                let xv = ctx.input(0).data();
                let wv = ctx.input(1).data();
                let gx = ctx.needs(0).then(|| {
                    let mut gx = vec![0.0; n * f];
                    gemm(n, o, f, g, false, wv, true, &mut gx, 0.0);
                    gx
                });
                let gw = ctx.needs(1).then(|| {
                    let mut gw = vec![0.0; f * o];
                    gemm(f, n, o, xv, true, g, false, &mut gw, 0.0);
                    gw
                });
                let mut out = vec![gx, gw];
                if ctx.parents.len() == 3 {
                    let mut gb = vec![0.0; o];
                    for row in g.chunks(o) {
                        gb.iter_mut().zip(row).for_each(|(a, b)| *a += b);
                    }
                    out.push(Some(gb));
                }
                out
            }),
        ))
    }
}

#[derive(Debug, Clone, Copy)]
enum BinaryOp {
    Add,
    Mul,
}

/// For each flat index of `out`, the flat index into a tensor of shape `src` broadcast to it.
fn broadcast_index(src: &[usize], out: &[usize]) -> Vec<usize> {
    let rank = out.len();
    let mut src_strides = vec![0usize; rank];
    let mut stride = 1;
    for d in (0..rank).rev() {
        src_strides[d] = if src[d] == 1 { 0 } else { stride };
        stride *= src[d];
    }
    let total: usize = out.iter().product();
    let mut idx = Vec::with_capacity(total);
    let mut counter = vec![0usize; rank];
    for _ in 0..total {
        idx.push(counter.iter().zip(&src_strides).map(|(c, s)| c * s).sum());
        for d in (0..rank).rev() {
            counter[d] += 1;
            if counter[d] < out[d] {
                break;
            }
            counter[d] = 0;
        }
    }
    idx
}
