//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation applied to its [`Var`] handles. Node
//! ids grow monotonically and every parent has a smaller id than its child,
//! so iterating the tape backwards from the output is already a valid
//! topological order.

use std::cell::RefCell;
use std::collections::HashMap;

use crate::error::{Result, TensorError};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{numel, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum UnaryKind {
    Neg,
    Exp,
    Log,
    Abs,
    Sqrt,
    Square,
    Sin,
    Cos,
    Softplus,
    LeakyRelu(f64),
    MaxScalar(f64),
    AddScalar(f64),
    MulScalar(f64),
}

impl UnaryKind {
    #[inline]
    fn apply(self, x: f64) -> f64 {
        match self {
            UnaryKind::Neg => -x,
            UnaryKind::Exp => x.exp(),
            UnaryKind::Log => x.ln(),
            UnaryKind::Abs => x.abs(),
            UnaryKind::Sqrt => x.sqrt(),
            UnaryKind::Square => x * x,
            UnaryKind::Sin => x.sin(),
            UnaryKind::Cos => x.cos(),
            UnaryKind::Softplus => x.max(0.0) + (-x.abs()).exp().ln_1p(),
            UnaryKind::LeakyRelu(slope) => {
                if x >= 0.0 {
                    x
                } else {
                    slope * x
                }
            }
            UnaryKind::MaxScalar(c) => {
                if x > c {
                    x
                } else {
                    c
                }
            }
            UnaryKind::AddScalar(c) => x + c,
            UnaryKind::MulScalar(c) => x * c,
        }
    }

    /// Derivative given the input `x` and the output `y`.
    #[inline]
    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            UnaryKind::Neg => -1.0,
            UnaryKind::Exp => y,
            UnaryKind::Log => 1.0 / x,
            UnaryKind::Abs => {
                if x > 0.0 {
                    1.0
                } else if x < 0.0 {
                    -1.0
                } else {
                    0.0
                }
            }
            UnaryKind::Sqrt => 0.5 / y,
            UnaryKind::Square => 2.0 * x,
            UnaryKind::Sin => x.cos(),
            UnaryKind::Cos => -x.sin(),
            UnaryKind::Softplus => 1.0 / (1.0 + (-x).exp()),
            UnaryKind::LeakyRelu(slope) => {
                if x >= 0.0 {
                    1.0
                } else {
                    slope
                }
            }
            UnaryKind::MaxScalar(c) => {
                if x > c {
                    1.0
                } else {
                    0.0
                }
            }
            UnaryKind::AddScalar(_) => 1.0,
            UnaryKind::MulScalar(c) => c,
        }
    }
}

/// How output positions of a broadcast binary op map back to its operands.
#[derive(Debug, Clone)]
enum Broadcast {
    Same,
    ScalarRhs,
    ScalarLhs,
    /// rhs is repeated along the leading axes of lhs
    RepeatRhs(usize),
    RepeatLhs(usize),
    General(Vec<usize>, Vec<usize>),
}

impl Broadcast {
    #[inline]
    fn index(&self, i: usize) -> (usize, usize) {
        match self {
            Broadcast::Same => (i, i),
            Broadcast::ScalarRhs => (i, 0),
            Broadcast::ScalarLhs => (0, i),
            Broadcast::RepeatRhs(n) => (i, i % n),
            Broadcast::RepeatLhs(n) => (i % n, i),
            Broadcast::General(a, b) => (a[i], b[i]),
        }
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Binary {
        kind: BinaryKind,
        a: usize,
        b: usize,
        map: Broadcast,
    },
    Unary {
        kind: UnaryKind,
        x: usize,
    },
    MatMul {
        a: usize,
        b: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    Transpose {
        x: usize,
        rows: usize,
        cols: usize,
    },
    Reshape {
        x: usize,
    },
    SumAll {
        x: usize,
    },
    SumAxis {
        x: usize,
        outer: usize,
        len: usize,
        inner: usize,
    },
    Softmax {
        x: usize,
        outer: usize,
        len: usize,
        inner: usize,
    },
    Concat {
        parts: Vec<(usize, usize)>,
        outer: usize,
        out_chunk: usize,
    },
    Slice {
        x: usize,
        outer: usize,
        in_chunk: usize,
        offset: usize,
        out_chunk: usize,
    },
    IndexRows {
        x: usize,
        indices: Vec<usize>,
        row_len: usize,
    },
    Conv2d {
        input: usize,
        weight: usize,
        bias: Option<usize>,
        cin: usize,
        cout: usize,
        h: usize,
        w: usize,
        k: usize,
    },
    AvgPool2 {
        x: usize,
        c: usize,
        h: usize,
        w: usize,
    },
}

struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

#[derive(Default)]
struct Inner {
    nodes: Vec<Node>,
    param_nodes: HashMap<usize, usize>,
}

/// The recording tape for one forward/backward pass.
///
/// A graph is confined to the thread that built it. Parameters enter through
/// [`Graph::param`], which caches one leaf per parameter so repeated use of a
/// weight accumulates into a single gradient.
#[derive(Default)]
pub struct Graph {
    inner: RefCell<Inner>,
}

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g> {
    graph: &'g Graph,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i < rank - a.len() { 1 } else { a[i - (rank - a.len())] };
        let db = if i < rank - b.len() { 1 } else { b[i - (rank - b.len())] };
        out[i] = if da == db || db == 1 {
            da
        } else if da == 1 {
            db
        } else {
            return Err(TensorError::ShapeMismatch {
                op,
                lhs: a.to_vec(),
                rhs: b.to_vec(),
            });
        };
    }
    Ok(out)
}

fn strip_leading_ones(s: &[usize]) -> &[usize] {
    let first = s.iter().position(|&d| d != 1).unwrap_or(s.len());
    &s[first..]
}

fn general_map(out: &[usize], operand: &[usize]) -> Vec<usize> {
    let rank = out.len();
    let pad = rank - operand.len();
    let mut strides = vec![0usize; rank];
    let mut acc = 1;
    for i in (0..rank).rev() {
        let d = if i < pad { 1 } else { operand[i - pad] };
        strides[i] = if d == 1 { 0 } else { acc };
        acc *= d;
    }
    let total = numel(out);
    let mut map = Vec::with_capacity(total);
    let mut idx = vec![0usize; rank];
    for _ in 0..total {
        map.push(idx.iter().zip(&strides).map(|(i, s)| i * s).sum());
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            if idx[ax] < out[ax] {
                break;
            }
            idx[ax] = 0;
        }
    }
    map
}

fn plan_broadcast(op: &'static str, a: &[usize], b: &[usize]) -> Result<(Vec<usize>, Broadcast)> {
    if a == b {
        return Ok((a.to_vec(), Broadcast::Same));
    }
    let out = broadcast_shape(op, a, b)?;
    let (na, nb, nout) = (numel(a), numel(b), numel(&out));
    let map = if nb == 1 && na == nout {
        Broadcast::ScalarRhs
    } else if na == 1 && nb == nout {
        Broadcast::ScalarLhs
    } else if na == nout && out.ends_with(strip_leading_ones(b)) {
        Broadcast::RepeatRhs(nb)
    } else if nb == nout && out.ends_with(strip_leading_ones(a)) {
        Broadcast::RepeatLhs(na)
    } else {
        Broadcast::General(general_map(&out, a), general_map(&out, b))
    };
    Ok((out, map))
}

fn split_axis(op: &'static str, shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(TensorError::Axis {
            op,
            axis,
            shape: shape.to_vec(),
        });
    }
    Ok((
        numel(&shape[..axis]),
        shape[axis],
        numel(&shape[axis + 1..]),
    ))
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, shape: Vec<usize>, value: Vec<f64>, op: Op, requires_grad: bool) -> Var<'_> {
        debug_assert_eq!(numel(&shape), value.len());
        let mut inner = self.inner.borrow_mut();
        let id = inner.nodes.len();
        inner.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var { graph: self, id }
    }

    /// Records a tensor as a leaf, honouring its `requires_grad` flag.
    pub fn leaf(&self, tensor: Tensor) -> Var<'_> {
        let rg = tensor.requires_grad();
        let shape = tensor.shape().to_vec();
        self.push(shape, tensor.into_data(), Op::Leaf, rg)
    }

    /// Records a tensor as a constant (never receives a gradient).
    pub fn constant(&self, tensor: Tensor) -> Var<'_> {
        let shape = tensor.shape().to_vec();
        self.push(shape, tensor.into_data(), Op::Leaf, false)
    }

    pub fn constant_from(&self, shape: Vec<usize>, data: Vec<f64>) -> Result<Var<'_>> {
        Ok(self.constant(Tensor::new(shape, data)?))
    }

    pub fn scalar(&self, value: f64) -> Var<'_> {
        self.push(vec![1], vec![value], Op::Leaf, false)
    }

    /// Leaf for a trainable parameter. The same leaf is returned for every
    /// call with the same id during the lifetime of this graph.
    pub fn param(&self, store: &ParamStore, id: ParamId) -> Var<'_> {
        if let Some(&node) = self.inner.borrow().param_nodes.get(&id.index()) {
            return Var { graph: self, id: node };
        }
        let t = store.tensor(id);
        let var = self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, true);
        self.inner
            .borrow_mut()
            .param_nodes
            .insert(id.index(), var.id);
        var
    }

    /// Gradients of parameter leaves touched by this graph, keyed by
    /// parameter index.
    pub(crate) fn param_grads(&self) -> Vec<(usize, Vec<f64>)> {
        let inner = self.inner.borrow();
        let mut out: Vec<_> = inner
            .param_nodes
            .iter()
            .filter_map(|(&pid, &node)| inner.nodes[node].grad.clone().map(|g| (pid, g)))
            .collect();
        out.sort_by_key(|(pid, _)| *pid);
        out
    }

    /// Reverse pass from a scalar output. Gradients accumulate into every
    /// node that requires one, so calling this twice doubles them.
    pub fn backward(&self, output: Var<'_>) -> Result<()> {
        assert!(std::ptr::eq(self, output.graph), "var from another graph");
        let mut inner = self.inner.borrow_mut();
        let out_id = output.id;
        if inner.nodes[out_id].value.len() != 1 {
            return Err(TensorError::NonScalarOutput {
                shape: inner.nodes[out_id].shape.clone(),
            });
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; out_id + 1];
        grads[out_id] = Some(vec![1.0]);
        let nodes = &inner.nodes;
        let mut finished: Vec<(usize, Vec<f64>)> = Vec::new();
        for id in (0..=out_id).rev() {
            let Some(g) = grads[id].take() else { continue };
            if !nodes[id].requires_grad {
                continue;
            }
            propagate(nodes, id, &g, &mut grads);
            finished.push((id, g));
        }
        for (id, g) in finished {
            let node = &mut inner.nodes[id];
            match &mut node.grad {
                Some(buf) => buf.iter_mut().zip(&g).for_each(|(b, x)| *b += x),
                None => node.grad = Some(g),
            }
        }
        Ok(())
    }
}

#[inline]
fn grad_slot<'a>(
    nodes: &[Node],
    grads: &'a mut [Option<Vec<f64>>],
    id: usize,
) -> Option<&'a mut Vec<f64>> {
    if !nodes[id].requires_grad {
        return None;
    }
    Some(grads[id].get_or_insert_with(|| vec![0.0; nodes[id].value.len()]))
}

fn propagate(nodes: &[Node], id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let node = &nodes[id];
    match &node.op {
        Op::Leaf => {}
        Op::Binary { kind, a, b, map } => {
            let (av, bv) = (&nodes[*a].value, &nodes[*b].value);
            if let Some(ga) = grad_slot(nodes, grads, *a) {
                for (i, gi) in g.iter().enumerate() {
                    let (ia, ib) = map.index(i);
                    ga[ia] += match kind {
                        BinaryKind::Add | BinaryKind::Sub => *gi,
                        BinaryKind::Mul => gi * bv[ib],
                        BinaryKind::Div => gi / bv[ib],
                    };
                }
            }
            if let Some(gb) = grad_slot(nodes, grads, *b) {
                for (i, gi) in g.iter().enumerate() {
                    let (ia, ib) = map.index(i);
                    gb[ib] += match kind {
                        BinaryKind::Add => *gi,
                        BinaryKind::Sub => -gi,
                        BinaryKind::Mul => gi * av[ia],
                        BinaryKind::Div => -gi * av[ia] / (bv[ib] * bv[ib]),
                    };
                }
            }
        }
        Op::Unary { kind, x } => {
            let xv = &nodes[*x].value;
            let yv = &node.value;
            if let Some(gx) = grad_slot(nodes, grads, *x) {
                for i in 0..g.len() {
                    gx[i] += g[i] * kind.derivative(xv[i], yv[i]);
                }
            }
        }
        Op::MatMul { a, b, m, k, n } => {
            let (m, k, n) = (*m, *k, *n);
            let (av, bv) = (&nodes[*a].value, &nodes[*b].value);
            if let Some(ga) = grad_slot(nodes, grads, *a) {
                // dA = dC · Bᵀ
                for i in 0..m {
                    let grow = &g[i * n..(i + 1) * n];
                    for p in 0..k {
                        let brow = &bv[p * n..(p + 1) * n];
                        let mut s = 0.0;
                        for j in 0..n {
                            s += grow[j] * brow[j];
                        }
                        ga[i * k + p] += s;
                    }
                }
            }
            if let Some(gb) = grad_slot(nodes, grads, *b) {
                // dB = Aᵀ · dC
                for i in 0..m {
                    let grow = &g[i * n..(i + 1) * n];
                    for p in 0..k {
                        let aval = av[i * k + p];
                        if aval == 0.0 {
                            continue;
                        }
                        let gbrow = &mut gb[p * n..(p + 1) * n];
                        for j in 0..n {
                            gbrow[j] += aval * grow[j];
                        }
                    }
                }
            }
        }
        Op::Transpose { x, rows, cols } => {
            if let Some(gx) = grad_slot(nodes, grads, *x) {
                for r in 0..*rows {
                    for c in 0..*cols {
                        gx[r * cols + c] += g[c * rows + r];
                    }
                }
            }
        }
        Op::Reshape { x } => {
            if let Some(gx) = grad_slot(nodes, grads, *x) {
                gx.iter_mut().zip(g).for_each(|(a, b)| *a += b);
            }
        }
        Op::SumAll { x } => {
            if let Some(gx) = grad_slot(nodes, grads, *x) {
                let g0 = g[0];
                gx.iter_mut().for_each(|a| *a += g0);
            }
        }
        Op::SumAxis {
            x,
            outer,
            len,
            inner,
        } => {
            if let Some(gx) = grad_slot(nodes, grads, *x) {
                for o in 0..*outer {
                    for l in 0..*len {
                        let base = (o * len + l) * inner;
                        for j in 0..*inner {
                            gx[base + j] += g[o * inner + j];
                        }
                    }
                }
            }
        }
        Op::Softmax {
            x,
            outer,
            len,
            inner,
        } => {
            let y = &node.value;
            if let Some(gx) = grad_slot(nodes, grads, *x) {
                for o in 0..*outer {
                    for j in 0..*inner {
                        let at = |l: usize| (o * len + l) * inner + j;
                        let mut dot = 0.0;
                        for l in 0..*len {
                            dot += g[at(l)] * y[at(l)];
                        }
                        for l in 0..*len {
                            gx[at(l)] += y[at(l)] * (g[at(l)] - dot);
                        }
                    }
                }
            }
        }
        Op::Concat {
            parts,
            outer,
            out_chunk,
        } => {
            let mut offset = 0;
            for &(pid, chunk) in parts {
                if let Some(gp) = grad_slot(nodes, grads, pid) {
                    for o in 0..*outer {
                        let src = &g[o * out_chunk + offset..o * out_chunk + offset + chunk];
                        gp[o * chunk..(o + 1) * chunk]
                            .iter_mut()
                            .zip(src)
                            .for_each(|(a, b)| *a += b);
                    }
                }
                offset += chunk;
            }
        }
        Op::Slice {
            x,
            outer,
            in_chunk,
            offset,
            out_chunk,
        } => {
            if let Some(gx) = grad_slot(nodes, grads, *x) {
                for o in 0..*outer {
                    let dst = &mut gx[o * in_chunk + offset..o * in_chunk + offset + out_chunk];
                    dst.iter_mut()
                        .zip(&g[o * out_chunk..(o + 1) * out_chunk])
                        .for_each(|(a, b)| *a += b);
                }
            }
        }
        Op::IndexRows {
            x,
            indices,
            row_len,
        } => {
            if let Some(gx) = grad_slot(nodes, grads, *x) {
                for (r, &src) in indices.iter().enumerate() {
                    let dst = &mut gx[src * row_len..(src + 1) * row_len];
                    dst.iter_mut()
                        .zip(&g[r * row_len..(r + 1) * row_len])
                        .for_each(|(a, b)| *a += b);
                }
            }
        }
        Op::Conv2d {
            input,
            weight,
            bias,
            cin,
            cout,
            h,
            w,
            k,
        } => {
            let (cin, cout, h, w, k) = (*cin, *cout, *h, *w, *k);
            let pad = (k / 2) as isize;
            let xv = &nodes[*input].value;
            let wv = &nodes[*weight].value;
            if let Some(gx) = grad_slot(nodes, grads, *input) {
                conv_taps(cin, cout, h, w, k, pad, |co, ci, ky, kx, y0, y1, x0, x1, dy, dx| {
                    let wt = wv[((co * cin + ci) * k + ky) * k + kx];
                    for y in y0..y1 {
                        let sy = (y as isize + dy) as usize;
                        for x in x0..x1 {
                            let sx = (x as isize + dx) as usize;
                            gx[(ci * h + sy) * w + sx] += wt * g[(co * h + y) * w + x];
                        }
                    }
                });
            }
            if let Some(gw) = grad_slot(nodes, grads, *weight) {
                conv_taps(cin, cout, h, w, k, pad, |co, ci, ky, kx, y0, y1, x0, x1, dy, dx| {
                    let mut s = 0.0;
                    for y in y0..y1 {
                        let sy = (y as isize + dy) as usize;
                        for x in x0..x1 {
                            let sx = (x as isize + dx) as usize;
                            s += xv[(ci * h + sy) * w + sx] * g[(co * h + y) * w + x];
                        }
                    }
                    gw[((co * cin + ci) * k + ky) * k + kx] += s;
                });
            }
            if let Some(b) = bias {
                if let Some(gb) = grad_slot(nodes, grads, *b) {
                    for co in 0..cout {
                        gb[co] += g[co * h * w..(co + 1) * h * w].iter().sum::<f64>();
                    }
                }
            }
        }
        Op::AvgPool2 { x, c, h, w } => {
            let (oh, ow) = (h / 2, w / 2);
            if let Some(gx) = grad_slot(nodes, grads, *x) {
                for ch in 0..*c {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let gv = 0.25 * g[(ch * oh + oy) * ow + ox];
                            for (yy, xx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                                gx[(ch * h + 2 * oy + yy) * w + 2 * ox + xx] += gv;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Enumerates every (output channel, input channel, tap) of a same-padded
/// convolution together with the output range where the tap stays in bounds.
#[allow(clippy::too_many_arguments)]
#[inline]
fn conv_taps<F>(cin: usize, cout: usize, h: usize, w: usize, k: usize, pad: isize, mut f: F)
where
    F: FnMut(usize, usize, usize, usize, usize, usize, usize, usize, isize, isize),
{
    for co in 0..cout {
        for ci in 0..cin {
            for ky in 0..k {
                let dy = ky as isize - pad;
                let y0 = (-dy).max(0) as usize;
                let y1 = (h as isize - dy).min(h as isize).max(0) as usize;
                for kx in 0..k {
                    let dx = kx as isize - pad;
                    let x0 = (-dx).max(0) as usize;
                    let x1 = (w as isize - dx).min(w as isize).max(0) as usize;
                    f(co, ci, ky, kx, y0, y1, x0, x1, dy, dx);
                }
            }
        }
    }
}

impl<'g> Var<'g> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn graph(&self) -> &'g Graph {
        self.graph
    }

    pub fn shape(&self) -> Vec<usize> {
        self.graph.inner.borrow().nodes[self.id].shape.clone()
    }

    pub fn numel(&self) -> usize {
        self.graph.inner.borrow().nodes[self.id].value.len()
    }

    pub fn value(&self) -> Vec<f64> {
        self.graph.inner.borrow().nodes[self.id].value.clone()
    }

    pub fn with_value<R>(&self, f: impl FnOnce(&[f64]) -> R) -> R {
        f(&self.graph.inner.borrow().nodes[self.id].value)
    }

    /// The single value of a one-element node.
    pub fn item(&self) -> f64 {
        self.with_value(|v| v[0])
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.inner.borrow().nodes[self.id].requires_grad
    }

    pub fn grad(&self) -> Option<Vec<f64>> {
        self.graph.inner.borrow().nodes[self.id].grad.clone()
    }

    pub fn to_tensor(&self) -> Tensor {
        let inner = self.graph.inner.borrow();
        let n = &inner.nodes[self.id];
        Tensor::new(n.shape.clone(), n.value.clone()).expect("node shape matches data")
    }

    /// Same values, cut off from the tape.
    pub fn detach(self) -> Var<'g> {
        let t = self.to_tensor();
        self.graph.constant(t)
    }

    fn same_graph(&self, other: &Var<'_>) {
        assert!(
            std::ptr::eq(self.graph, other.graph),
            "vars from different graphs"
        );
    }

    fn binary(self, other: Var<'g>, kind: BinaryKind, op: &'static str) -> Result<Var<'g>> {
        self.same_graph(&other);
        let (shape, value, rg, map) = {
            let inner = self.graph.inner.borrow();
            let (a, b) = (&inner.nodes[self.id], &inner.nodes[other.id]);
            let (shape, map) = plan_broadcast(op, &a.shape, &b.shape)?;
            let n = numel(&shape);
            let f = |x: f64, y: f64| match kind {
                BinaryKind::Add => x + y,
                BinaryKind::Sub => x - y,
                BinaryKind::Mul => x * y,
                BinaryKind::Div => x / y,
            };
            let value: Vec<f64> = match &map {
                Broadcast::Same => a.value.iter().zip(&b.value).map(|(&x, &y)| f(x, y)).collect(),
                _ => (0..n)
                    .map(|i| {
                        let (ia, ib) = map.index(i);
                        f(a.value[ia], b.value[ib])
                    })
                    .collect(),
            };
            (shape, value, a.requires_grad || b.requires_grad, map)
        };
        Ok(self.graph.push(
            shape,
            value,
            Op::Binary {
                kind,
                a: self.id,
                b: other.id,
                map,
            },
            rg,
        ))
    }

    pub fn add(self, other: Var<'g>) -> Result<Var<'g>> {
        self.binary(other, BinaryKind::Add, "add")
    }

    pub fn sub(self, other: Var<'g>) -> Result<Var<'g>> {
        self.binary(other, BinaryKind::Sub, "sub")
    }

    pub fn mul(self, other: Var<'g>) -> Result<Var<'g>> {
        self.binary(other, BinaryKind::Mul, "mul")
    }

    pub fn div(self, other: Var<'g>) -> Result<Var<'g>> {
        self.binary(other, BinaryKind::Div, "div")
    }

    fn unary(self, kind: UnaryKind) -> Var<'g> {
        let (shape, value, rg) = {
            let inner = self.graph.inner.borrow();
            let n = &inner.nodes[self.id];
            (
                n.shape.clone(),
                n.value.iter().map(|&x| kind.apply(x)).collect(),
                n.requires_grad,
            )
        };
        self.graph
            .push(shape, value, Op::Unary { kind, x: self.id }, rg)
    }

    pub fn neg(self) -> Var<'g> {
        self.unary(UnaryKind::Neg)
    }
    pub fn exp(self) -> Var<'g> {
        self.unary(UnaryKind::Exp)
    }
    pub fn ln(self) -> Var<'g> {
        self.unary(UnaryKind::Log)
    }
    pub fn abs(self) -> Var<'g> {
        self.unary(UnaryKind::Abs)
    }
    pub fn sqrt(self) -> Var<'g> {
        self.unary(UnaryKind::Sqrt)
    }
    pub fn square(self) -> Var<'g> {
        self.unary(UnaryKind::Square)
    }
    pub fn sin(self) -> Var<'g> {
        self.unary(UnaryKind::Sin)
    }
    pub fn cos(self) -> Var<'g> {
        self.unary(UnaryKind::Cos)
    }
    pub fn softplus(self) -> Var<'g> {
        self.unary(UnaryKind::Softplus)
    }
    pub fn leaky_relu(self, slope: f64) -> Var<'g> {
        self.unary(UnaryKind::LeakyRelu(slope))
    }
    /// Elementwise `max(x, c)`.
    pub fn max_scalar(self, c: f64) -> Var<'g> {
        self.unary(UnaryKind::MaxScalar(c))
    }
    pub fn add_scalar(self, c: f64) -> Var<'g> {
        self.unary(UnaryKind::AddScalar(c))
    }
    pub fn mul_scalar(self, c: f64) -> Var<'g> {
        self.unary(UnaryKind::MulScalar(c))
    }

    /// Matrix product of two 2-D nodes.
    pub fn matmul(self, other: Var<'g>) -> Result<Var<'g>> {
        self.same_graph(&other);
        let (m, k, n, value, rg) = {
            let inner = self.graph.inner.borrow();
            let (a, b) = (&inner.nodes[self.id], &inner.nodes[other.id]);
            if a.shape.len() != 2 || b.shape.len() != 2 || a.shape[1] != b.shape[0] {
                return Err(TensorError::ShapeMismatch {
                    op: "matmul",
                    lhs: a.shape.clone(),
                    rhs: b.shape.clone(),
                });
            }
            let (m, k, n) = (a.shape[0], a.shape[1], b.shape[1]);
            let mut out = vec![0.0; m * n];
            for i in 0..m {
                let orow = &mut out[i * n..(i + 1) * n];
                for p in 0..k {
                    let aval = a.value[i * k + p];
                    if aval == 0.0 {
                        continue;
                    }
                    let brow = &b.value[p * n..(p + 1) * n];
                    for j in 0..n {
                        orow[j] += aval * brow[j];
                    }
                }
            }
            (m, k, n, out, a.requires_grad || b.requires_grad)
        };
        Ok(self.graph.push(
            vec![m, n],
            value,
            Op::MatMul {
                a: self.id,
                b: other.id,
                m,
                k,
                n,
            },
            rg,
        ))
    }

    /// Transpose of a 2-D node.
    pub fn t(self) -> Result<Var<'g>> {
        let (rows, cols, value, rg) = {
            let inner = self.graph.inner.borrow();
            let x = &inner.nodes[self.id];
            if x.shape.len() != 2 {
                return Err(TensorError::ShapeMismatch {
                    op: "transpose",
                    lhs: x.shape.clone(),
                    rhs: vec![],
                });
            }
            let (rows, cols) = (x.shape[0], x.shape[1]);
            let mut out = vec![0.0; rows * cols];
            for r in 0..rows {
                for c in 0..cols {
                    out[c * rows + r] = x.value[r * cols + c];
                }
            }
            (rows, cols, out, x.requires_grad)
        };
        Ok(self.graph.push(
            vec![cols, rows],
            value,
            Op::Transpose {
                x: self.id,
                rows,
                cols,
            },
            rg,
        ))
    }

    pub fn reshape(self, shape: Vec<usize>) -> Result<Var<'g>> {
        let (value, rg) = {
            let inner = self.graph.inner.borrow();
            let x = &inner.nodes[self.id];
            if numel(&shape) != x.value.len() {
                return Err(TensorError::ShapeMismatch {
                    op: "reshape",
                    lhs: x.shape.clone(),
                    rhs: shape,
                });
            }
            (x.value.clone(), x.requires_grad)
        };
        Ok(self.graph.push(shape, value, Op::Reshape { x: self.id }, rg))
    }

    /// Sum of all elements, shape `[1]`.
    pub fn sum(self) -> Var<'g> {
        let (s, rg) = {
            let inner = self.graph.inner.borrow();
            let x = &inner.nodes[self.id];
            (x.value.iter().sum::<f64>(), x.requires_grad)
        };
        self.graph.push(vec![1], vec![s], Op::SumAll { x: self.id }, rg)
    }

    pub fn mean(self) -> Var<'g> {
        let n = self.numel();
        self.sum().mul_scalar(1.0 / n as f64)
    }

    /// Sum along `axis`, keeping the axis with length 1.
    pub fn sum_axis(self, axis: usize) -> Result<Var<'g>> {
        let (shape, value, rg, outer, len, inner_len) = {
            let inner = self.graph.inner.borrow();
            let x = &inner.nodes[self.id];
            let (outer, len, il) = split_axis("sum_axis", &x.shape, axis)?;
            let mut out = vec![0.0; outer * il];
            for o in 0..outer {
                for l in 0..len {
                    let base = (o * len + l) * il;
                    for j in 0..il {
                        out[o * il + j] += x.value[base + j];
                    }
                }
            }
            let mut shape = x.shape.clone();
            shape[axis] = 1;
            (shape, out, x.requires_grad, outer, len, il)
        };
        Ok(self.graph.push(
            shape,
            value,
            Op::SumAxis {
                x: self.id,
                outer,
                len,
                inner: inner_len,
            },
            rg,
        ))
    }

    pub fn mean_axis(self, axis: usize) -> Result<Var<'g>> {
        let shape = self.shape();
        let len = *shape.get(axis).ok_or(TensorError::Axis {
            op: "mean_axis",
            axis,
            shape: shape.clone(),
        })?;
        Ok(self.sum_axis(axis)?.mul_scalar(1.0 / len as f64))
    }

    /// Softmax along `axis`, with max subtraction.
    pub fn softmax(self, axis: usize) -> Result<Var<'g>> {
        let (shape, value, rg, outer, len, il) = {
            let inner = self.graph.inner.borrow();
            let x = &inner.nodes[self.id];
            let (outer, len, il) = split_axis("softmax", &x.shape, axis)?;
            let mut out = vec![0.0; x.value.len()];
            for o in 0..outer {
                for j in 0..il {
                    let at = |l: usize| (o * len + l) * il + j;
                    let mut mx = f64::NEG_INFINITY;
                    for l in 0..len {
                        mx = mx.max(x.value[at(l)]);
                    }
                    let mut s = 0.0;
                    for l in 0..len {
                        let e = (x.value[at(l)] - mx).exp();
                        out[at(l)] = e;
                        s += e;
                    }
                    for l in 0..len {
                        out[at(l)] /= s;
                    }
                }
            }
            (x.shape.clone(), out, x.requires_grad, outer, len, il)
        };
        Ok(self.graph.push(
            shape,
            value,
            Op::Softmax {
                x: self.id,
                outer,
                len,
                inner: il,
            },
            rg,
        ))
    }

    /// `[start, end)` along `axis`.
    pub fn slice(self, axis: usize, start: usize, end: usize) -> Result<Var<'g>> {
        let (shape, value, rg, outer, in_chunk, offset, out_chunk) = {
            let inner = self.graph.inner.borrow();
            let x = &inner.nodes[self.id];
            let (outer, len, il) = split_axis("slice", &x.shape, axis)?;
            if start > end || end > len {
                return Err(TensorError::Invalid(format!(
                    "slice {start}..{end} out of range for axis {axis} of {:?}",
                    x.shape
                )));
            }
            let (in_chunk, offset, out_chunk) = (len * il, start * il, (end - start) * il);
            let mut out = Vec::with_capacity(outer * out_chunk);
            for o in 0..outer {
                out.extend_from_slice(&x.value[o * in_chunk + offset..o * in_chunk + offset + out_chunk]);
            }
            let mut shape = x.shape.clone();
            shape[axis] = end - start;
            (shape, out, x.requires_grad, outer, in_chunk, offset, out_chunk)
        };
        Ok(self.graph.push(
            shape,
            value,
            Op::Slice {
                x: self.id,
                outer,
                in_chunk,
                offset,
                out_chunk,
            },
            rg,
        ))
    }

    /// Gathers rows (indices along axis 0); indices may repeat.
    pub fn index_rows(self, indices: &[usize]) -> Result<Var<'g>> {
        let (shape, value, rg, row_len) = {
            let inner = self.graph.inner.borrow();
            let x = &inner.nodes[self.id];
            let rows = *x.shape.first().ok_or_else(|| {
                TensorError::Invalid("index_rows on a rank-0 node".into())
            })?;
            let row_len = if rows == 0 { 0 } else { x.value.len() / rows };
            let mut out = Vec::with_capacity(indices.len() * row_len);
            for &r in indices {
                if r >= rows {
                    return Err(TensorError::Invalid(format!(
                        "row index {r} out of range for {rows} rows"
                    )));
                }
                out.extend_from_slice(&x.value[r * row_len..(r + 1) * row_len]);
            }
            let mut shape = x.shape.clone();
            shape[0] = indices.len();
            (shape, out, x.requires_grad, row_len)
        };
        Ok(self.graph.push(
            shape,
            value,
            Op::IndexRows {
                x: self.id,
                indices: indices.to_vec(),
                row_len,
            },
            rg,
        ))
    }

    /// Concatenates nodes along `axis`; all other dimensions must agree.
    pub fn concat(parts: &[Var<'g>], axis: usize) -> Result<Var<'g>> {
        let first = parts
            .first()
            .ok_or_else(|| TensorError::Invalid("concat of zero parts".into()))?;
        let graph = first.graph;
        let (shape, value, rg, outer, out_chunk, chunks) = {
            let inner = graph.inner.borrow();
            let base = &inner.nodes[first.id].shape;
            let (outer, _, il) = split_axis("concat", base, axis)?;
            let mut total = 0;
            let mut chunks = Vec::with_capacity(parts.len());
            let mut rg = false;
            for p in parts {
                first.same_graph(p);
                let n = &inner.nodes[p.id];
                let compatible = n.shape.len() == base.len()
                    && n.shape
                        .iter()
                        .zip(base)
                        .enumerate()
                        .all(|(i, (a, b))| i == axis || a == b);
                if !compatible {
                    return Err(TensorError::ShapeMismatch {
                        op: "concat",
                        lhs: base.clone(),
                        rhs: n.shape.clone(),
                    });
                }
                total += n.shape[axis];
                chunks.push((p.id, n.shape[axis] * il));
                rg |= n.requires_grad;
            }
            let out_chunk = total * il;
            let mut out = Vec::with_capacity(outer * out_chunk);
            for o in 0..outer {
                for &(pid, chunk) in &chunks {
                    out.extend_from_slice(&inner.nodes[pid].value[o * chunk..(o + 1) * chunk]);
                }
            }
            let mut shape = base.clone();
            shape[axis] = total;
            (shape, out, rg, outer, out_chunk, chunks)
        };
        Ok(graph.push(
            shape,
            value,
            Op::Concat {
                parts: chunks,
                outer,
                out_chunk,
            },
            rg,
        ))
    }

    /// Same-padded, stride-1 2-D convolution of a `[cin, h, w]` node with a
    /// `[cout, cin, k, k]` kernel (odd `k`) and optional `[cout]` bias.
    pub fn conv2d_same(self, weight: Var<'g>, bias: Option<Var<'g>>) -> Result<Var<'g>> {
        self.same_graph(&weight);
        let (cin, cout, h, w, k, value, rg) = {
            let inner = self.graph.inner.borrow();
            let (x, wt) = (&inner.nodes[self.id], &inner.nodes[weight.id]);
            let bad = || TensorError::ShapeMismatch {
                op: "conv2d",
                lhs: x.shape.clone(),
                rhs: wt.shape.clone(),
            };
            if x.shape.len() != 3 || wt.shape.len() != 4 || wt.shape[1] != x.shape[0] {
                return Err(bad());
            }
            let (cin, h, w) = (x.shape[0], x.shape[1], x.shape[2]);
            let (cout, k) = (wt.shape[0], wt.shape[2]);
            if wt.shape[3] != k || k % 2 == 0 {
                return Err(bad());
            }
            let mut rg = x.requires_grad || wt.requires_grad;
            let mut out = vec![0.0; cout * h * w];
            if let Some(b) = bias {
                self.same_graph(&b);
                let bn = &inner.nodes[b.id];
                if bn.value.len() != cout {
                    return Err(TensorError::ShapeMismatch {
                        op: "conv2d bias",
                        lhs: vec![cout],
                        rhs: bn.shape.clone(),
                    });
                }
                rg |= bn.requires_grad;
                for co in 0..cout {
                    out[co * h * w..(co + 1) * h * w].fill(bn.value[co]);
                }
            }
            let pad = (k / 2) as isize;
            conv_taps(cin, cout, h, w, k, pad, |co, ci, ky, kx, y0, y1, x0, x1, dy, dx| {
                let wv = wt.value[((co * cin + ci) * k + ky) * k + kx];
                for y in y0..y1 {
                    let sy = (y as isize + dy) as usize;
                    let src = &x.value[(ci * h + sy) * w..(ci * h + sy + 1) * w];
                    let dst = &mut out[(co * h + y) * w..(co * h + y + 1) * w];
                    for xx in x0..x1 {
                        dst[xx] += wv * src[(xx as isize + dx) as usize];
                    }
                }
            });
            (cin, cout, h, w, k, out, rg)
        };
        Ok(self.graph.push(
            vec![cout, h, w],
            value,
            Op::Conv2d {
                input: self.id,
                weight: weight.id,
                bias: bias.map(|b| b.id),
                cin,
                cout,
                h,
                w,
                k,
            },
            rg,
        ))
    }

    /// 2×2 average pooling with stride 2 on a `[c, h, w]` node; trailing odd
    /// rows/columns are dropped.
    pub fn avg_pool2(self) -> Result<Var<'g>> {
        let (c, h, w, value, rg) = {
            let inner = self.graph.inner.borrow();
            let x = &inner.nodes[self.id];
            if x.shape.len() != 3 || x.shape[1] < 2 || x.shape[2] < 2 {
                return Err(TensorError::ShapeMismatch {
                    op: "avg_pool2",
                    lhs: x.shape.clone(),
                    rhs: vec![2, 2],
                });
            }
            let (c, h, w) = (x.shape[0], x.shape[1], x.shape[2]);
            let (oh, ow) = (h / 2, w / 2);
            let mut out = vec![0.0; c * oh * ow];
            for ch in 0..c {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let at = |yy: usize, xx: usize| x.value[(ch * h + 2 * oy + yy) * w + 2 * ox + xx];
                        out[(ch * oh + oy) * ow + ox] =
                            0.25 * (at(0, 0) + at(0, 1) + at(1, 0) + at(1, 1));
                    }
                }
            }
            (c, h, w, out, x.requires_grad)
        };
        Ok(self.graph.push(
            vec![c, h / 2, w / 2],
            value,
            Op::AvgPool2 { x: self.id, c, h, w },
            rg,
        ))
    }
}
