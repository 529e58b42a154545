use std::cell::RefCell;
use std::fmt;
use std::rc::Rc;

use super::{AxisMap, Result, Tensor, TensorError};

type CustomBackward = dyn Fn(&[&Tensor], &Tensor, &Tensor) -> Vec<Tensor>;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum UnaryKind {
    Sigmoid,
    Gelu,
    Sqrt,
    Abs,
}

/// How the two operands of an elementwise op line up. The broadcast operand
/// repeats with period equal to its length.
#[derive(Clone, Copy, Debug)]
enum Broadcast {
    Same,
    RhsRepeats,
    LhsRepeats,
}

enum Op {
    Leaf,
    Binary {
        kind: BinaryKind,
        a: usize,
        b: usize,
        bcast: Broadcast,
    },
    Scale {
        a: usize,
        factor: f64,
    },
    Offset {
        a: usize,
    },
    Unary {
        kind: UnaryKind,
        a: usize,
    },
    MatMul {
        a: usize,
        b: usize,
    },
    TransposeLast2 {
        a: usize,
    },
    Reshape {
        a: usize,
    },
    Softmax {
        a: usize,
    },
    Sum {
        a: usize,
    },
    AxisMap {
        a: usize,
        axis: usize,
        map: Rc<AxisMap>,
    },
    Concat {
        parts: Vec<usize>,
        axis: usize,
    },
    Custom {
        inputs: Vec<usize>,
        backward: Box<CustomBackward>,
    },
}

struct Node {
    value: Rc<Tensor>,
    requires_grad: bool,
    op: Op,
}

/// Operation record for one forward pass.
///
/// The tape is rebuilt for every pass. It is single-owner: handles borrow it
/// and all recording happens through `&Tape`, so a tape never crosses threads.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn leaf(&self, value: Tensor, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            requires_grad,
            op: Op::Leaf,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    pub fn param(&self, value: Tensor) -> Var<'_> {
        self.leaf(value, true)
    }

    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.leaf(value, false)
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat<'t>(&'t self, parts: &[Var<'t>], axis: usize) -> Result<Var<'t>> {
        let first = parts.first().ok_or_else(|| TensorError::InvalidArgument {
            op: "concat",
            msg: "nothing to concatenate".into(),
        })?;
        let base = first.shape();
        if axis >= base.len() {
            return Err(TensorError::AxisOutOfRange {
                op: "concat",
                axis,
                rank: base.len(),
            });
        }
        let values: Vec<Rc<Tensor>> = parts.iter().map(|p| p.value()).collect();
        for v in &values {
            let s = v.shape();
            if s.len() != base.len()
                || s.iter()
                    .zip(&base)
                    .enumerate()
                    .any(|(i, (x, y))| i != axis && x != y)
            {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    lhs: base.clone(),
                    rhs: s.to_vec(),
                });
            }
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let total: usize = values.iter().map(|v| v.shape()[axis]).sum();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for v in &values {
                let chunk = v.shape()[axis] * inner;
                data.extend_from_slice(&v.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let ids = parts.iter().map(|p| p.id).collect();
        self.push(
            "concat",
            Tensor::new(shape, data)?,
            Op::Concat { parts: ids, axis },
        )
    }

    /// Records an operation with a caller-supplied backward rule.
    ///
    /// `backward(inputs, output, grad_output)` must return one gradient per
    /// input, each shaped like its input.
    pub fn custom<'t, F>(
        &'t self,
        inputs: &[Var<'t>],
        output: Tensor,
        backward: F,
    ) -> Result<Var<'t>>
    where
        F: Fn(&[&Tensor], &Tensor, &Tensor) -> Vec<Tensor> + 'static,
    {
        self.push(
            "custom",
            output,
            Op::Custom {
                inputs: inputs.iter().map(|v| v.id).collect(),
                backward: Box::new(backward),
            },
        )
    }

    fn value(&self, id: usize) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    fn push(&self, name: &'static str, value: Tensor, op: Op) -> Result<Var<'_>> {
        if !value.is_finite() {
            return Err(TensorError::NonFinite { op: name });
        }
        let mut nodes = self.nodes.borrow_mut();
        let requires_grad = op_inputs(&op).iter().any(|&i| nodes[i].requires_grad);
        nodes.push(Node {
            value: Rc::new(value),
            requires_grad,
            op,
        });
        Ok(Var {
            tape: self,
            id: nodes.len() - 1,
        })
    }

    /// Reverse-mode sweep from a scalar loss. Gradients are summed over
    /// fan-out.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if root.value.numel() != 1 {
            return Err(TensorError::NonScalarLoss(root.value.shape().to_vec()));
        }
        if !root.requires_grad {
            return Err(TensorError::DetachedLoss);
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.id + 1];
        grads[loss.id] = Some(vec![1.0]);

        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            node.backward(&nodes, &g, &mut grads);
            grads[id] = Some(g);
        }

        let grads = grads
            .into_iter()
            .enumerate()
            .map(|(id, g)| {
                g.map(|data| Tensor {
                    shape: nodes[id].value.shape().to_vec(),
                    data,
                })
            })
            .collect();
        Ok(Gradients { grads })
    }
}

fn op_inputs(op: &Op) -> Vec<usize> {
    match op {
        Op::Leaf => vec![],
        Op::Binary { a, b, .. } | Op::MatMul { a, b } => vec![*a, *b],
        Op::Scale { a, .. }
        | Op::Offset { a }
        | Op::Unary { a, .. }
        | Op::TransposeLast2 { a }
        | Op::Reshape { a }
        | Op::Softmax { a }
        | Op::Sum { a }
        | Op::AxisMap { a, .. } => vec![*a],
        Op::Concat { parts, .. } => parts.clone(),
        Op::Custom { inputs, .. } => inputs.clone(),
    }
}

fn accumulate<'g>(
    grads: &'g mut [Option<Vec<f64>>],
    nodes: &[Node],
    id: usize,
) -> Option<&'g mut Vec<f64>> {
    if !nodes[id].requires_grad {
        return None;
    }
    let n = nodes[id].value.numel();
    Some(grads[id].get_or_insert_with(|| vec![0.0; n]))
}

impl Node {
    fn backward(&self, nodes: &[Node], g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let out = &self.value;
        match &self.op {
            Op::Leaf => {}
            Op::Binary { kind, a, b, bcast } => {
                let av = Rc::clone(&nodes[*a].value);
                let bv = Rc::clone(&nodes[*b].value);
                let (ad, bd) = (av.data(), bv.data());
                let (na, nb) = (ad.len(), bd.len());
                let ia = |i: usize| match bcast {
                    Broadcast::LhsRepeats => i % na,
                    _ => i,
                };
                let ib = |i: usize| match bcast {
                    Broadcast::RhsRepeats => i % nb,
                    _ => i,
                };
                if let Some(ga) = accumulate(grads, nodes, *a) {
                    for (i, gi) in g.iter().enumerate() {
                        ga[ia(i)] += match kind {
                            BinaryKind::Add | BinaryKind::Sub => *gi,
                            BinaryKind::Mul => gi * bd[ib(i)],
                            BinaryKind::Div => gi / bd[ib(i)],
                        };
                    }
                }
                if let Some(gb) = accumulate(grads, nodes, *b) {
                    for (i, gi) in g.iter().enumerate() {
                        gb[ib(i)] += match kind {
                            BinaryKind::Add => *gi,
                            BinaryKind::Sub => -gi,
                            BinaryKind::Mul => gi * ad[ia(i)],
                            BinaryKind::Div => {
                                let d = bd[ib(i)];
                                -gi * ad[ia(i)] / (d * d)
                            }
                        };
                    }
                }
            }
            Op::Scale { a, factor } => {
                if let Some(ga) = accumulate(grads, nodes, *a) {
                    for (x, gi) in ga.iter_mut().zip(g) {
                        *x += factor * gi;
                    }
                }
            }
            Op::Offset { a } | Op::Reshape { a } => {
                if let Some(ga) = accumulate(grads, nodes, *a) {
                    for (x, gi) in ga.iter_mut().zip(g) {
                        *x += gi;
                    }
                }
            }
            Op::Unary { kind, a } => {
                let xv = Rc::clone(&nodes[*a].value);
                if let Some(ga) = accumulate(grads, nodes, *a) {
                    let x = xv.data();
                    let y = out.data();
                    for i in 0..g.len() {
                        let d = match kind {
                            UnaryKind::Sigmoid => y[i] * (1.0 - y[i]),
                            UnaryKind::Gelu => gelu_grad(x[i]),
                            UnaryKind::Sqrt => 0.5 / y[i],
                            UnaryKind::Abs => x[i].signum() * f64::from(x[i] != 0.0),
                        };
                        ga[i] += g[i] * d;
                    }
                }
            }
            Op::MatMul { a, b } => {
                let av = Rc::clone(&nodes[*a].value);
                let bv = Rc::clone(&nodes[*b].value);
                let plan = MatMulPlan::new(av.shape(), bv.shape()).expect("validated in forward");
                if let Some(ga) = accumulate(grads, nodes, *a) {
                    plan.grad_lhs(g, bv.data(), ga);
                }
                if let Some(gb) = accumulate(grads, nodes, *b) {
                    plan.grad_rhs(av.data(), g, gb);
                }
            }
            Op::TransposeLast2 { a } => {
                if let Some(ga) = accumulate(grads, nodes, *a) {
                    let s = out.shape();
                    let (r, c) = (s[s.len() - 2], s[s.len() - 1]);
                    // out is [.., r, c]; input is [.., c, r]
                    for (blk, gb) in g.chunks(r * c).enumerate() {
                        let base = blk * r * c;
                        for i in 0..r {
                            for j in 0..c {
                                ga[base + j * r + i] += gb[i * c + j];
                            }
                        }
                    }
                }
            }
            Op::Softmax { a } => {
                if let Some(ga) = accumulate(grads, nodes, *a) {
                    let s = out.shape();
                    let n = s[s.len() - 1];
                    for ((yr, gr), ar) in
                        out.data().chunks(n).zip(g.chunks(n)).zip(ga.chunks_mut(n))
                    {
                        let dot: f64 = yr.iter().zip(gr).map(|(y, g)| y * g).sum();
                        for k in 0..n {
                            ar[k] += yr[k] * (gr[k] - dot);
                        }
                    }
                }
            }
            Op::Sum { a } => {
                if let Some(ga) = accumulate(grads, nodes, *a) {
                    for x in ga.iter_mut() {
                        *x += g[0];
                    }
                }
            }
            Op::AxisMap { a, axis, map } => {
                let shape = nodes[*a].value.shape().to_vec();
                if let Some(ga) = accumulate(grads, nodes, *a) {
                    let outer: usize = shape[..*axis].iter().product();
                    let inner: usize = shape[*axis + 1..].iter().product();
                    map.backward_raw(g, ga, outer, inner);
                }
            }
            Op::Concat { parts, axis } => {
                let s = out.shape();
                let outer: usize = s[..*axis].iter().product();
                let inner: usize = s[*axis + 1..].iter().product();
                let total = s[*axis];
                let mut start = 0;
                for &p in parts {
                    let len = nodes[p].value.shape()[*axis];
                    if let Some(gp) = accumulate(grads, nodes, p) {
                        for o in 0..outer {
                            let src =
                                &g[(o * total + start) * inner..(o * total + start + len) * inner];
                            let dst = &mut gp[o * len * inner..(o + 1) * len * inner];
                            for (d, s) in dst.iter_mut().zip(src) {
                                *d += s;
                            }
                        }
                    }
                    start += len;
                }
            }
            Op::Custom { inputs, backward } => {
                let values: Vec<Rc<Tensor>> =
                    inputs.iter().map(|&i| Rc::clone(&nodes[i].value)).collect();
                let refs: Vec<&Tensor> = values.iter().map(|v| v.as_ref()).collect();
                let gout = Tensor {
                    shape: out.shape().to_vec(),
                    data: g.to_vec(),
                };
                let local = backward(&refs, out, &gout);
                for (&i, gi) in inputs.iter().zip(local) {
                    if let Some(acc) = accumulate(grads, nodes, i) {
                        for (x, v) in acc.iter_mut().zip(gi.data()) {
                            *x += v;
                        }
                    }
                }
            }
        }
    }
}

/// Gradients of one backward sweep, indexed by tape node.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var<'_>) -> Option<&Tensor> {
        self.grads.get(v.id).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, or zeros when the loss does not reach it.
    pub fn wrt(&self, v: Var<'_>) -> Tensor {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(&v.shape()))
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * GELU_A * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn strip_leading_ones(s: &[usize]) -> &[usize] {
    let k = s.iter().take_while(|&&d| d == 1).count();
    &s[k..]
}

fn broadcast_plan(op: &'static str, a: &[usize], b: &[usize]) -> Result<(Broadcast, Vec<usize>)> {
    if a == b {
        return Ok((Broadcast::Same, a.to_vec()));
    }
    let na: usize = a.iter().product();
    let nb: usize = b.iter().product();
    let (sa, sb) = (strip_leading_ones(a), strip_leading_ones(b));
    if nb == 1 || (nb <= na && a.ends_with(sb)) {
        return Ok((Broadcast::RhsRepeats, a.to_vec()));
    }
    if na == 1 || b.ends_with(sa) {
        return Ok((Broadcast::LhsRepeats, b.to_vec()));
    }
    Err(TensorError::ShapeMismatch {
        op,
        lhs: a.to_vec(),
        rhs: b.to_vec(),
    })
}

/// Batched product `[.., M, K] @ [.., K, N]` with batch extents that match
/// or broadcast from 1.
struct MatMulPlan {
    m: usize,
    k: usize,
    n: usize,
    out_shape: Vec<usize>,
    /// (lhs offset, rhs offset) per output batch slice.
    slices: Vec<(usize, usize)>,
    /// rhs is a single matrix shared by every batch slice.
    shared_rhs: bool,
}

impl MatMulPlan {
    fn new(a: &[usize], b: &[usize]) -> Result<Self> {
        let mismatch = || TensorError::ShapeMismatch {
            op: "matmul",
            lhs: a.to_vec(),
            rhs: b.to_vec(),
        };
        if a.len() < 2 || b.len() < 2 {
            return Err(mismatch());
        }
        let (m, k) = (a[a.len() - 2], a[a.len() - 1]);
        let (k2, n) = (b[b.len() - 2], b[b.len() - 1]);
        if k != k2 {
            return Err(mismatch());
        }
        let ab = &a[..a.len() - 2];
        let bb = &b[..b.len() - 2];
        let rank = ab.len().max(bb.len());
        let pad = |s: &[usize]| {
            let mut v = vec![1; rank - s.len()];
            v.extend_from_slice(s);
            v
        };
        let (pa, pb) = (pad(ab), pad(bb));
        let mut batch = Vec::with_capacity(rank);
        for (&x, &y) in pa.iter().zip(&pb) {
            match (x, y) {
                _ if x == y => batch.push(x),
                (1, _) => batch.push(y),
                (_, 1) => batch.push(x),
                _ => return Err(mismatch()),
            }
        }
        let count: usize = batch.iter().product();
        let strides = |s: &[usize], size: usize| {
            let mut st = vec![0; rank];
            let mut acc = size;
            for i in (0..rank).rev() {
                st[i] = if s[i] == 1 { 0 } else { acc };
                acc *= s[i];
            }
            st
        };
        let (sa, sb) = (strides(&pa, m * k), strides(&pb, k * n));
        let mut slices = Vec::with_capacity(count);
        let mut idx = vec![0; rank];
        for _ in 0..count {
            let oa = idx.iter().zip(&sa).map(|(i, s)| i * s).sum();
            let ob = idx.iter().zip(&sb).map(|(i, s)| i * s).sum();
            slices.push((oa, ob));
            for d in (0..rank).rev() {
                idx[d] += 1;
                if idx[d] < batch[d] {
                    break;
                }
                idx[d] = 0;
            }
        }
        let shared_rhs = pb.iter().all(|&d| d == 1) && pa.iter().product::<usize>() == count;
        let mut out_shape = batch;
        out_shape.extend_from_slice(&[m, n]);
        Ok(Self {
            m,
            k,
            n,
            out_shape,
            slices,
            shared_rhs,
        })
    }

    fn forward(&self, a: &[f64], b: &[f64]) -> Vec<f64> {
        let (m, k, n) = (self.m, self.k, self.n);
        let mut c = vec![0.0; self.slices.len() * m * n];
        if self.shared_rhs {
            gemm(self.slices.len() * m, k, n, a, k, 1, b, n, 1, &mut c, n);
            return c;
        }
        for (s, &(oa, ob)) in self.slices.iter().enumerate() {
            gemm(
                m,
                k,
                n,
                &a[oa..],
                k,
                1,
                &b[ob..],
                n,
                1,
                &mut c[s * m * n..],
                n,
            );
        }
        c
    }

    /// dA += dC @ B^T
    fn grad_lhs(&self, g: &[f64], b: &[f64], ga: &mut [f64]) {
        let (m, k, n) = (self.m, self.k, self.n);
        if self.shared_rhs {
            gemm(self.slices.len() * m, n, k, g, n, 1, b, 1, n, ga, k);
            return;
        }
        for (s, &(oa, ob)) in self.slices.iter().enumerate() {
            gemm(
                m,
                n,
                k,
                &g[s * m * n..],
                n,
                1,
                &b[ob..],
                1,
                n,
                &mut ga[oa..],
                k,
            );
        }
    }

    /// dB += A^T @ dC
    fn grad_rhs(&self, a: &[f64], g: &[f64], gb: &mut [f64]) {
        let (m, k, n) = (self.m, self.k, self.n);
        if self.shared_rhs {
            let rows = self.slices.len() * m;
            gemm(k, rows, n, a, 1, k, g, n, 1, gb, n);
            return;
        }
        for (s, &(oa, ob)) in self.slices.iter().enumerate() {
            gemm(
                k,
                m,
                n,
                &a[oa..],
                1,
                k,
                &g[s * m * n..],
                n,
                1,
                &mut gb[ob..],
                n,
            );
        }
    }
}

/// `c[m, n] += a[m, k] @ b[k, n]` with explicit row/column strides for the
/// operands and a row-major destination.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_rs: usize,
    a_cs: usize,
    b: &[f64],
    b_rs: usize,
    b_cs: usize,
    c: &mut [f64],
    c_rs: usize,
) {
    if m == 0 || n == 0 || k == 0 {
        return;
    }
    let a_need = (m - 1) * a_rs + (k - 1) * a_cs + 1;
    let b_need = (k - 1) * b_rs + (n - 1) * b_cs + 1;
    let c_need = (m - 1) * c_rs + n;
    assert!(a.len() >= a_need && b.len() >= b_need && c.len() >= c_need);
    // SAFETY: the asserts above bound every strided access inside the slices,
    // and `c` is a unique borrow disjoint from `a` and `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_rs as isize,
            a_cs as isize,
            b.as_ptr(),
            b_rs as isize,
            b_cs as isize,
            1.0,
            c.as_mut_ptr(),
            c_rs as isize,
            1,
        );
    }
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.tape.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    fn binary(self, other: Var<'t>, kind: BinaryKind, name: &'static str) -> Result<Var<'t>> {
        let (av, bv) = (self.value(), other.value());
        let (bcast, shape) = broadcast_plan(name, av.shape(), bv.shape())?;
        let (ad, bd) = (av.data(), bv.data());
        let (na, nb) = (ad.len(), bd.len());
        let numel: usize = shape.iter().product();
        if kind == BinaryKind::Div && bd.iter().any(|&v| v == 0.0) {
            return Err(TensorError::DivisionByZero { op: name });
        }
        let data = (0..numel)
            .map(|i| {
                let x = ad[if matches!(bcast, Broadcast::LhsRepeats) {
                    i % na
                } else {
                    i
                }];
                let y = bd[if matches!(bcast, Broadcast::RhsRepeats) {
                    i % nb
                } else {
                    i
                }];
                match kind {
                    BinaryKind::Add => x + y,
                    BinaryKind::Sub => x - y,
                    BinaryKind::Mul => x * y,
                    BinaryKind::Div => x / y,
                }
            })
            .collect();
        self.tape.push(
            name,
            Tensor { shape, data },
            Op::Binary {
                kind,
                a: self.id,
                b: other.id,
                bcast,
            },
        )
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, BinaryKind::Add, "add")
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, BinaryKind::Sub, "sub")
    }

    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, BinaryKind::Mul, "mul")
    }

    pub fn div(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, BinaryKind::Div, "div")
    }

    pub fn scale(self, factor: f64) -> Result<Var<'t>> {
        let v = self.value().map(|x| x * factor);
        self.tape.push("scale", v, Op::Scale { a: self.id, factor })
    }

    pub fn add_scalar(self, c: f64) -> Result<Var<'t>> {
        let v = self.value().map(|x| x + c);
        self.tape.push("add_scalar", v, Op::Offset { a: self.id })
    }

    fn unary(self, kind: UnaryKind, name: &'static str, f: fn(f64) -> f64) -> Result<Var<'t>> {
        let v = self.value().map(f);
        self.tape.push(name, v, Op::Unary { kind, a: self.id })
    }

    pub fn sigmoid(self) -> Result<Var<'t>> {
        self.unary(UnaryKind::Sigmoid, "sigmoid", sigmoid)
    }

    /// Tanh-approximated GELU.
    pub fn gelu(self) -> Result<Var<'t>> {
        self.unary(UnaryKind::Gelu, "gelu", gelu)
    }

    pub fn sqrt(self) -> Result<Var<'t>> {
        self.unary(UnaryKind::Sqrt, "sqrt", f64::sqrt)
    }

    pub fn abs(self) -> Result<Var<'t>> {
        self.unary(UnaryKind::Abs, "abs", f64::abs)
    }

    pub fn square(self) -> Result<Var<'t>> {
        self.mul(self)
    }

    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        let (av, bv) = (self.value(), other.value());
        let plan = MatMulPlan::new(av.shape(), bv.shape())?;
        let data = plan.forward(av.data(), bv.data());
        self.tape.push(
            "matmul",
            Tensor {
                shape: plan.out_shape,
                data,
            },
            Op::MatMul {
                a: self.id,
                b: other.id,
            },
        )
    }

    /// Swaps the last two axes.
    pub fn transpose(self) -> Result<Var<'t>> {
        let v = self.value();
        let s = v.shape();
        if s.len() < 2 {
            return Err(TensorError::InvalidArgument {
                op: "transpose",
                msg: format!("needs rank >= 2, got {s:?}"),
            });
        }
        let (r, c) = (s[s.len() - 2], s[s.len() - 1]);
        let mut data = vec![0.0; v.numel()];
        for (blk, src) in v.data().chunks(r * c).enumerate() {
            let dst = &mut data[blk * r * c..(blk + 1) * r * c];
            for i in 0..r {
                for j in 0..c {
                    dst[j * r + i] = src[i * c + j];
                }
            }
        }
        let mut shape = s.to_vec();
        let len = shape.len();
        shape.swap(len - 2, len - 1);
        self.tape.push(
            "transpose",
            Tensor { shape, data },
            Op::TransposeLast2 { a: self.id },
        )
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t>> {
        let v = (*self.value()).clone().reshape(shape)?;
        self.tape.push("reshape", v, Op::Reshape { a: self.id })
    }

    /// Softmax over the last axis, computed with max subtraction.
    pub fn softmax(self) -> Result<Var<'t>> {
        let v = self.value();
        let n = *v.shape().last().unwrap_or(&0);
        if n == 0 || v.rank() == 0 {
            return Err(TensorError::InvalidArgument {
                op: "softmax",
                msg: "last axis is empty".into(),
            });
        }
        let mut data = Vec::with_capacity(v.numel());
        for row in v.data().chunks(n) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let start = data.len();
            let mut total = 0.0;
            for &x in row {
                let e = (x - max).exp();
                total += e;
                data.push(e);
            }
            for e in &mut data[start..] {
                *e /= total;
            }
        }
        self.tape.push(
            "softmax",
            Tensor {
                shape: v.shape().to_vec(),
                data,
            },
            Op::Softmax { a: self.id },
        )
    }

    pub fn sum(self) -> Result<Var<'t>> {
        let total = self.value().data().iter().sum();
        self.tape
            .push("sum", Tensor::scalar(total), Op::Sum { a: self.id })
    }

    pub fn mean(self) -> Result<Var<'t>> {
        let n = self.value().numel();
        if n == 0 {
            return Err(TensorError::InvalidArgument {
                op: "mean",
                msg: "empty tensor".into(),
            });
        }
        self.sum()?.scale(1.0 / n as f64)
    }

    /// Applies `map` along `axis`.
    pub fn axis_map(self, axis: usize, map: Rc<AxisMap>) -> Result<Var<'t>> {
        let v = self.value();
        let (outer, inner) = map.split_shape("axis_map", v.shape(), axis)?;
        let shape = map.out_shape(v.shape(), axis);
        let data = map.forward_raw(v.data(), outer, inner);
        self.tape.push(
            "axis_map",
            Tensor { shape, data },
            Op::AxisMap {
                a: self.id,
                axis,
                map,
            },
        )
    }

    fn axis_len(&self, op: &'static str, axis: usize) -> Result<usize> {
        self.value().axis_len(op, axis)
    }

    /// Arithmetic mean along `axis`; the axis is removed.
    pub fn mean_axis(self, axis: usize) -> Result<Var<'t>> {
        let len = self.axis_len("mean_axis", axis)?;
        let mut shape = self.shape();
        let pooled = self.axis_map(axis, Rc::new(AxisMap::mean(len)?))?;
        shape.remove(axis);
        pooled.reshape(&shape)
    }

    pub fn avg_downsample(self, axis: usize, factor: usize) -> Result<Var<'t>> {
        let len = self.axis_len("avg_downsample", axis)?;
        self.axis_map(axis, Rc::new(AxisMap::downsample(len, factor)?))
    }

    pub fn moving_average(self, axis: usize, kernel: usize) -> Result<Var<'t>> {
        let len = self.axis_len("moving_average", axis)?;
        self.axis_map(axis, Rc::new(AxisMap::moving_average(len, kernel)?))
    }

    pub fn linear_interp(self, axis: usize, new_len: usize) -> Result<Var<'t>> {
        let len = self.axis_len("linear_interp", axis)?;
        if len == new_len {
            return Ok(self);
        }
        self.axis_map(axis, Rc::new(AxisMap::linear_interp(len, new_len)?))
    }

    /// Repeats a length-1 `axis` `len` times.
    pub fn expand(self, axis: usize, len: usize) -> Result<Var<'t>> {
        self.axis_map(axis, Rc::new(AxisMap::broadcast(len)))
    }

    pub fn select(self, axis: usize, indices: &[usize]) -> Result<Var<'t>> {
        let len = self.axis_len("select", axis)?;
        self.axis_map(axis, Rc::new(AxisMap::select(len, indices)?))
    }

    /// `[B, T, D] -> [B, N, P, D]` with replicate padding of the tail.
    pub fn patchify(self, patch_len: usize) -> Result<Var<'t>> {
        let [b, t, d] = super::expect_rank3("patchify", &self.shape())?;
        let (map, n) = AxisMap::patch_pad(t, patch_len)?;
        self.axis_map(1, Rc::new(map))?
            .reshape(&[b, n, patch_len, d])
    }

    /// `[B, N, P, D] -> [B, T, D]`, dropping padding beyond `seq_len`.
    pub fn unpatchify(self, seq_len: usize) -> Result<Var<'t>> {
        let [b, n, p, d] = super::expect_rank4("unpatchify", &self.shape())?;
        let flat = self.reshape(&[b, n * p, d])?;
        if n * p == seq_len {
            return Ok(flat);
        }
        flat.axis_map(1, Rc::new(AxisMap::truncate(n * p, seq_len)?))
    }
}
