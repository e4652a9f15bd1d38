//! Reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Tape`] records every operation applied to its [`Var`]s. Calling
//! [`Tape::backward`] on a scalar walks the record in reverse and returns
//! exact first-order adjoints for every node that depends on a parameter.
//! Tapes are single-threaded; build one per example or per trial.

use std::cell::RefCell;
use std::sync::Arc;

use super::tensor::{inverse_perm, matmul_acc, permute, transpose2, Tensor};
use crate::error::{Error, Result};

/// Inputs to `ln` are clamped at this floor.
pub const LN_FLOOR: f64 = 1e-15;

/// A lookup table whose every answer is one-hot, stored as answer indices.
///
/// Entry `(op, i, j)` holds the index of the answer for operation `op`
/// applied to `i` and `j`. Contracting the dense one-hot tensor against
/// three distributions reduces to scattering outer-product mass.
#[derive(Clone, Debug, PartialEq)]
pub struct LookupIndex {
    pub ops: usize,
    pub n: usize,
    pub answers: Vec<usize>,
}

impl LookupIndex {
    #[inline]
    fn at(&self, op: usize, i: usize, j: usize) -> usize {
        self.answers[(op * self.n + i) * self.n + j]
    }
}

#[derive(Clone, Debug)]
struct ContractPlan {
    perm_a: Vec<usize>,
    perm_b: Vec<usize>,
    a_perm_shape: Vec<usize>,
    b_perm_shape: Vec<usize>,
    free_a: usize,
    paired: usize,
    free_b: usize,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Affine(usize, f64),
    ScaleBy { x: usize, s: usize },
    Mix { p: usize, a: usize, b: usize },
    Contract { a: usize, b: usize, plan: Box<ContractPlan> },
    Softmax { x: usize, outer: usize, len: usize, inner: usize },
    Ln(usize),
    Tanh(usize),
    Relu(usize),
    Sigmoid(usize),
    Sum(usize),
    Slice { x: usize, outer: usize, len: usize, inner: usize, start: usize, take: usize },
    Concat { parts: Vec<(usize, usize)>, outer: usize, total: usize },
    Gather { table: usize, ids: Vec<usize>, width: usize },
    Roll { x: usize, shift: usize, len: usize },
    RowScale { m: usize, a: usize },
    Reshape(usize),
    Lookup { index: Arc<LookupIndex>, f: usize, u: usize, v: usize },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

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

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A value that never receives gradients.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, false)
    }

    /// A leaf that receives gradients.
    pub fn param(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, true)
    }

    pub fn scalar(&self, v: f64) -> Var<'_> {
        self.constant(Tensor::scalar(v))
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn rg(&self, ids: &[usize]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|&i| nodes[i].requires_grad)
    }

    /// Runs reverse accumulation from a scalar root.
    pub fn backward(&self, root: Var<'_>) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        if nodes[root.id].value.len() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar root, got shape {:?}",
                nodes[root.id].value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        grads[root.id] = Some(vec![1.0]);
        for id in (0..=root.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if node.requires_grad {
                backprop(&nodes, &mut grads, id, &g);
            }
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }
}

fn acc(nodes: &[Node], grads: &mut [Option<Vec<f64>>], id: usize, f: impl FnOnce(&mut [f64])) {
    if !nodes[id].requires_grad {
        return;
    }
    let n = nodes[id].value.len();
    let slot = grads[id].get_or_insert_with(|| vec![0.0; n]);
    f(slot);
}

fn backprop(nodes: &[Node], grads: &mut [Option<Vec<f64>>], id: usize, g: &[f64]) {
    let val = |i: usize| nodes[i].value.data();
    match &nodes[id].op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            acc(nodes, grads, *a, |s| s.iter_mut().zip(g).for_each(|(s, g)| *s += g));
            acc(nodes, grads, *b, |s| s.iter_mut().zip(g).for_each(|(s, g)| *s += g));
        }
        Op::Sub(a, b) => {
            acc(nodes, grads, *a, |s| s.iter_mut().zip(g).for_each(|(s, g)| *s += g));
            acc(nodes, grads, *b, |s| s.iter_mut().zip(g).for_each(|(s, g)| *s -= g));
        }
        Op::Mul(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            acc(nodes, grads, *a, |s| {
                for i in 0..s.len() {
                    s[i] += g[i] * bv[i];
                }
            });
            acc(nodes, grads, *b, |s| {
                for i in 0..s.len() {
                    s[i] += g[i] * av[i];
                }
            });
        }
        Op::Affine(x, alpha) => {
            acc(nodes, grads, *x, |s| s.iter_mut().zip(g).for_each(|(s, g)| *s += alpha * g));
        }
        Op::ScaleBy { x, s: sc } => {
            let (xv, sv) = (val(*x), val(*sc)[0]);
            acc(nodes, grads, *x, |s| s.iter_mut().zip(g).for_each(|(s, g)| *s += sv * g));
            let gs: f64 = g.iter().zip(xv).map(|(g, x)| g * x).sum();
            acc(nodes, grads, *sc, |s| s[0] += gs);
        }
        Op::Mix { p, a, b } => {
            let (pv, av, bv) = (val(*p)[0], val(*a), val(*b));
            acc(nodes, grads, *a, |s| s.iter_mut().zip(g).for_each(|(s, g)| *s += (1.0 - pv) * g));
            acc(nodes, grads, *b, |s| s.iter_mut().zip(g).for_each(|(s, g)| *s += pv * g));
            let gp: f64 = (0..g.len()).map(|i| g[i] * (bv[i] - av[i])).sum();
            acc(nodes, grads, *p, |s| s[0] += gp);
        }
        Op::Contract { a, b, plan } => {
            let (fa, k, fb) = (plan.free_a, plan.paired, plan.free_b);
            if nodes[*a].requires_grad {
                // gA' = g · B'^T
                let bp = permute(val(*b), nodes[*b].value.shape(), &plan.perm_b);
                let bt = transpose2(&bp, k, fb);
                let mut ga = vec![0.0; fa * k];
                matmul_acc(g, &bt, &mut ga, fa, fb, k);
                let ga = permute(&ga, &plan.a_perm_shape, &inverse_perm(&plan.perm_a));
                acc(nodes, grads, *a, |s| s.iter_mut().zip(&ga).for_each(|(s, g)| *s += g));
            }
            if nodes[*b].requires_grad {
                // gB' = A'^T · g
                let ap = permute(val(*a), nodes[*a].value.shape(), &plan.perm_a);
                let at = transpose2(&ap, fa, k);
                let mut gb = vec![0.0; k * fb];
                matmul_acc(&at, g, &mut gb, k, fa, fb);
                let gb = permute(&gb, &plan.b_perm_shape, &inverse_perm(&plan.perm_b));
                acc(nodes, grads, *b, |s| s.iter_mut().zip(&gb).for_each(|(s, g)| *s += g));
            }
        }
        Op::Softmax { x, outer, len, inner } => {
            let y = nodes[id].value.data();
            let (outer, len, inner) = (*outer, *len, *inner);
            acc(nodes, grads, *x, |s| {
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |k: usize| o * len * inner + k * inner + i;
                        let dot: f64 = (0..len).map(|k| g[at(k)] * y[at(k)]).sum();
                        for k in 0..len {
                            s[at(k)] += y[at(k)] * (g[at(k)] - dot);
                        }
                    }
                }
            });
        }
        Op::Ln(x) => {
            let xv = val(*x);
            acc(nodes, grads, *x, |s| {
                for i in 0..s.len() {
                    if xv[i] > LN_FLOOR {
                        s[i] += g[i] / xv[i];
                    }
                }
            });
        }
        Op::Tanh(x) => {
            let y = nodes[id].value.data();
            acc(nodes, grads, *x, |s| {
                for i in 0..s.len() {
                    s[i] += g[i] * (1.0 - y[i] * y[i]);
                }
            });
        }
        Op::Relu(x) => {
            let xv = val(*x);
            acc(nodes, grads, *x, |s| {
                for i in 0..s.len() {
                    if xv[i] > 0.0 {
                        s[i] += g[i];
                    }
                }
            });
        }
        Op::Sigmoid(x) => {
            let y = nodes[id].value.data();
            acc(nodes, grads, *x, |s| {
                for i in 0..s.len() {
                    s[i] += g[i] * y[i] * (1.0 - y[i]);
                }
            });
        }
        Op::Sum(x) => {
            acc(nodes, grads, *x, |s| s.iter_mut().for_each(|s| *s += g[0]));
        }
        Op::Slice { x, outer, len, inner, start, take } => {
            acc(nodes, grads, *x, |s| {
                for o in 0..*outer {
                    let src = o * len * inner + start * inner;
                    let dst = o * take * inner;
                    for k in 0..take * inner {
                        s[src + k] += g[dst + k];
                    }
                }
            });
        }
        Op::Concat { parts, outer, total } => {
            let mut offset = 0;
            for &(pid, chunk) in parts {
                acc(nodes, grads, pid, |s| {
                    for o in 0..*outer {
                        for k in 0..chunk {
                            s[o * chunk + k] += g[o * total + offset + k];
                        }
                    }
                });
                offset += chunk;
            }
        }
        Op::Gather { table, ids, width } => {
            acc(nodes, grads, *table, |s| {
                for (r, &row) in ids.iter().enumerate() {
                    for k in 0..*width {
                        s[row * width + k] += g[r * width + k];
                    }
                }
            });
        }
        Op::Roll { x, shift, len } => {
            acc(nodes, grads, *x, |s| {
                for (o, chunk) in s.chunks_mut(*len).enumerate() {
                    for (i, v) in chunk.iter_mut().enumerate() {
                        *v += g[o * len + (i + shift) % len];
                    }
                }
            });
        }
        Op::RowScale { m, a } => {
            let (mv, av) = (val(*m), val(*a));
            let cols = nodes[*m].value.shape()[1];
            acc(nodes, grads, *m, |s| {
                for (i, row) in s.chunks_mut(cols).enumerate() {
                    for (j, v) in row.iter_mut().enumerate() {
                        *v += g[i * cols + j] * av[i];
                    }
                }
            });
            acc(nodes, grads, *a, |s| {
                for (i, v) in s.iter_mut().enumerate() {
                    *v += (0..cols).map(|j| g[i * cols + j] * mv[i * cols + j]).sum::<f64>();
                }
            });
        }
        Op::Reshape(x) => {
            acc(nodes, grads, *x, |s| s.iter_mut().zip(g).for_each(|(s, g)| *s += g));
        }
        Op::Lookup { index, f, u, v } => {
            let (fv, uv, vv) = (val(*f), val(*u), val(*v));
            let n = index.n;
            if nodes[*f].requires_grad {
                let mut gf = vec![0.0; index.ops];
                for (h, gfh) in gf.iter_mut().enumerate() {
                    let mut total = 0.0;
                    for i in 0..n {
                        if uv[i] == 0.0 {
                            continue;
                        }
                        let mut row = 0.0;
                        for j in 0..n {
                            row += vv[j] * g[index.at(h, i, j)];
                        }
                        total += uv[i] * row;
                    }
                    *gfh = total;
                }
                acc(nodes, grads, *f, |s| s.iter_mut().zip(&gf).for_each(|(s, g)| *s += g));
            }
            if nodes[*u].requires_grad || nodes[*v].requires_grad {
                // G[i][j] = sum_h f_h g[ans(h,i,j)]
                let mut gm = vec![0.0; n * n];
                for (h, &fh) in fv.iter().enumerate() {
                    if fh == 0.0 {
                        continue;
                    }
                    for i in 0..n {
                        for j in 0..n {
                            gm[i * n + j] += fh * g[index.at(h, i, j)];
                        }
                    }
                }
                acc(nodes, grads, *u, |s| {
                    for i in 0..n {
                        s[i] += (0..n).map(|j| gm[i * n + j] * vv[j]).sum::<f64>();
                    }
                });
                acc(nodes, grads, *v, |s| {
                    for j in 0..n {
                        s[j] += (0..n).map(|i| gm[i * n + j] * uv[i]).sum::<f64>();
                    }
                });
            }
        }
    }
}

/// Adjoints produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient of the root with respect to `v`, if `v` lies on a tracked path.
    pub fn get(&self, v: Var<'_>) -> Option<&[f64]> {
        self.grads.get(v.id).and_then(|g| g.as_deref())
    }

    /// Gradient as a tensor shaped like `v`; zeros when `v` does not affect the root.
    pub fn wrt(&self, v: Var<'_>) -> Tensor {
        let shape = v.shape();
        match self.get(v) {
            Some(g) => Tensor::new(shape, g.to_vec()).expect("gradient shape"),
            None => Tensor::zeros(&shape),
        }
    }
}

fn same_shape(op: &str, a: &[usize], b: &[usize]) {
    assert_eq!(a, b, "{op}: operand shapes differ");
}

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Tensor {
        self.tape.nodes.borrow()[self.id].value.clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn item(&self) -> f64 {
        self.tape.nodes.borrow()[self.id].value.item()
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.tape.nodes.borrow()[self.id].value.data().to_vec()
    }

    fn unary(self, op: Op, f: impl FnOnce(&Tensor) -> Tensor) -> Var<'t> {
        let out = f(&self.tape.nodes.borrow()[self.id].value);
        let rg = self.tape.rg(&[self.id]);
        self.tape.push(out, op, rg)
    }

    fn map(self, op: Op, f: impl Fn(f64) -> f64) -> Var<'t> {
        self.unary(op, |x| {
            Tensor::new(x.shape().to_vec(), x.data().iter().map(|&v| f(v)).collect()).unwrap()
        })
    }

    fn zip(self, other: Var<'t>, name: &str, op: Op, f: impl Fn(f64, f64) -> f64) -> Var<'t> {
        let out = {
            let nodes = self.tape.nodes.borrow();
            let (a, b) = (&nodes[self.id].value, &nodes[other.id].value);
            same_shape(name, a.shape(), b.shape());
            let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
            Tensor::new(a.shape().to_vec(), data).unwrap()
        };
        let rg = self.tape.rg(&[self.id, other.id]);
        self.tape.push(out, op, rg)
    }

    pub fn add(self, other: Var<'t>) -> Var<'t> {
        self.zip(other, "add", Op::Add(self.id, other.id), |a, b| a + b)
    }

    pub fn sub(self, other: Var<'t>) -> Var<'t> {
        self.zip(other, "sub", Op::Sub(self.id, other.id), |a, b| a - b)
    }

    pub fn mul(self, other: Var<'t>) -> Var<'t> {
        self.zip(other, "mul", Op::Mul(self.id, other.id), |a, b| a * b)
    }

    /// `alpha * x + beta`, elementwise.
    pub fn affine(self, alpha: f64, beta: f64) -> Var<'t> {
        self.map(Op::Affine(self.id, alpha), |x| alpha * x + beta)
    }

    pub fn scale(self, alpha: f64) -> Var<'t> {
        self.affine(alpha, 0.0)
    }

    /// `1 - x`
    pub fn complement(self) -> Var<'t> {
        self.affine(-1.0, 1.0)
    }

    /// Multiplies every element by the scalar `s`.
    pub fn scale_by(self, s: Var<'t>) -> Var<'t> {
        let out = {
            let nodes = self.tape.nodes.borrow();
            let sv = &nodes[s.id].value;
            assert_eq!(sv.len(), 1, "scale_by: factor must be a scalar");
            let x = &nodes[self.id].value;
            let k = sv.item();
            Tensor::new(x.shape().to_vec(), x.data().iter().map(|v| v * k).collect()).unwrap()
        };
        let rg = self.tape.rg(&[self.id, s.id]);
        self.tape.push(out, Op::ScaleBy { x: self.id, s: s.id }, rg)
    }

    pub fn ln(self) -> Var<'t> {
        self.map(Op::Ln(self.id), |x| x.max(LN_FLOOR).ln())
    }

    pub fn tanh(self) -> Var<'t> {
        self.map(Op::Tanh(self.id), f64::tanh)
    }

    pub fn relu(self) -> Var<'t> {
        self.map(Op::Relu(self.id), |x| x.max(0.0))
    }

    pub fn sigmoid(self) -> Var<'t> {
        self.map(Op::Sigmoid(self.id), |x| 1.0 / (1.0 + (-x).exp()))
    }

    pub fn sum(self) -> Var<'t> {
        self.unary(Op::Sum(self.id), |x| Tensor::scalar(x.data().iter().sum()))
    }

    pub fn mean(self) -> Var<'t> {
        let n = self.tape.nodes.borrow()[self.id].value.len() as f64;
        self.sum().scale(1.0 / n)
    }

    pub fn reshape(self, shape: &[usize]) -> Var<'t> {
        self.unary(Op::Reshape(self.id), |x| x.clone().reshape(shape.to_vec()).unwrap())
    }

    /// Softmax along `axis`, stabilised by max subtraction.
    pub fn softmax(self, axis: usize) -> Var<'t> {
        let shape = self.shape();
        let (outer, len, inner) = axis_split(&shape, axis);
        self.unary(Op::Softmax { x: self.id, outer, len, inner }, |x| {
            let d = x.data();
            let mut out = vec![0.0; d.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let at = |k: usize| o * len * inner + k * inner + i;
                    let max = (0..len).map(|k| d[at(k)]).fold(f64::NEG_INFINITY, f64::max);
                    let mut z = 0.0;
                    for k in 0..len {
                        let e = (d[at(k)] - max).exp();
                        out[at(k)] = e;
                        z += e;
                    }
                    for k in 0..len {
                        out[at(k)] /= z;
                    }
                }
            }
            Tensor::new(shape.clone(), out).unwrap()
        })
    }

    /// `take` entries starting at `start` along `axis`.
    pub fn slice(self, axis: usize, start: usize, take: usize) -> Var<'t> {
        let shape = self.shape();
        let (outer, len, inner) = axis_split(&shape, axis);
        assert!(start + take <= len, "slice {start}+{take} exceeds axis length {len}");
        let mut out_shape = shape.clone();
        out_shape[axis] = take;
        self.unary(Op::Slice { x: self.id, outer, len, inner, start, take }, |x| {
            let d = x.data();
            let mut out = Vec::with_capacity(outer * take * inner);
            for o in 0..outer {
                let src = o * len * inner + start * inner;
                out.extend_from_slice(&d[src..src + take * inner]);
            }
            Tensor::new(out_shape, out).unwrap()
        })
    }

    /// Element `i` of a vector, as a scalar.
    pub fn at(self, i: usize) -> Var<'t> {
        self.slice(0, i, 1).reshape(&[])
    }

    /// Rows `ids` of a matrix, stacked.
    pub fn gather_rows(self, ids: &[usize]) -> Var<'t> {
        let shape = self.shape();
        assert_eq!(shape.len(), 2, "gather_rows needs a matrix");
        let width = shape[1];
        self.unary(Op::Gather { table: self.id, ids: ids.to_vec(), width }, |x| {
            let mut out = Vec::with_capacity(ids.len() * width);
            for &r in ids {
                out.extend_from_slice(x.row(r));
            }
            Tensor::new(vec![ids.len(), width], out).unwrap()
        })
    }

    /// Cyclic shift along the last axis: `y[i] = x[(i - shift) mod len]`.
    pub fn roll(self, shift: usize) -> Var<'t> {
        let shape = self.shape();
        let len = *shape.last().expect("roll needs rank >= 1");
        let shift = shift % len;
        self.unary(Op::Roll { x: self.id, shift, len }, |x| {
            let mut out = vec![0.0; x.len()];
            for (o, chunk) in x.data().chunks(len).enumerate() {
                for (i, &v) in chunk.iter().enumerate() {
                    out[o * len + (i + shift) % len] = v;
                }
            }
            Tensor::new(shape.clone(), out).unwrap()
        })
    }

    /// `y[i][j] = m[i][j] * a[i]`
    pub fn row_scale(self, a: Var<'t>) -> Var<'t> {
        let out = {
            let nodes = self.tape.nodes.borrow();
            let (m, av) = (&nodes[self.id].value, &nodes[a.id].value);
            assert_eq!(m.rank(), 2, "row_scale needs a matrix");
            assert_eq!(av.shape(), &[m.rows()], "row_scale: factor length must equal row count");
            let cols = m.cols();
            let data = m
                .data()
                .iter()
                .enumerate()
                .map(|(k, v)| v * av.data()[k / cols])
                .collect();
            Tensor::new(m.shape().to_vec(), data).unwrap()
        };
        let rg = self.tape.rg(&[self.id, a.id]);
        self.tape.push(out, Op::RowScale { m: self.id, a: a.id }, rg)
    }

    /// Generalised tensor contraction: sums products over each `(axis_of_self, axis_of_other)`
    /// pair. The result carries the free axes of `self` followed by those of `other`.
    pub fn contract(self, other: Var<'t>, pairs: &[(usize, usize)]) -> Result<Var<'t>> {
        let (sa, sb) = (self.shape(), other.shape());
        let mut paired_a = Vec::new();
        let mut paired_b = Vec::new();
        for &(i, j) in pairs {
            if i >= sa.len() || j >= sb.len() {
                return Err(Error::Shape(format!(
                    "contract axis pair ({i},{j}) out of range for shapes {sa:?} and {sb:?}"
                )));
            }
            if sa[i] != sb[j] {
                return Err(Error::Shape(format!(
                    "contract: axis {i} of {sa:?} has size {} but axis {j} of {sb:?} has size {}",
                    sa[i], sb[j]
                )));
            }
            if paired_a.contains(&i) || paired_b.contains(&j) {
                return Err(Error::Shape(format!("contract: axis paired twice in {pairs:?}")));
            }
            paired_a.push(i);
            paired_b.push(j);
        }
        let free_a_axes: Vec<usize> = (0..sa.len()).filter(|i| !paired_a.contains(i)).collect();
        let free_b_axes: Vec<usize> = (0..sb.len()).filter(|j| !paired_b.contains(j)).collect();
        let perm_a: Vec<usize> = free_a_axes.iter().chain(&paired_a).copied().collect();
        let perm_b: Vec<usize> = paired_b.iter().chain(&free_b_axes).copied().collect();
        let free_a: usize = free_a_axes.iter().map(|&i| sa[i]).product();
        let free_b: usize = free_b_axes.iter().map(|&j| sb[j]).product();
        let paired: usize = paired_a.iter().map(|&i| sa[i]).product();
        let out_shape: Vec<usize> = free_a_axes
            .iter()
            .map(|&i| sa[i])
            .chain(free_b_axes.iter().map(|&j| sb[j]))
            .collect();
        let plan = ContractPlan {
            a_perm_shape: perm_a.iter().map(|&i| sa[i]).collect(),
            b_perm_shape: perm_b.iter().map(|&j| sb[j]).collect(),
            perm_a,
            perm_b,
            free_a,
            paired,
            free_b,
        };
        let out = {
            let nodes = self.tape.nodes.borrow();
            let ap = permute(nodes[self.id].value.data(), &sa, &plan.perm_a);
            let bp = permute(nodes[other.id].value.data(), &sb, &plan.perm_b);
            let mut c = vec![0.0; free_a * free_b];
            matmul_acc(&ap, &bp, &mut c, free_a, paired, free_b);
            Tensor::new(out_shape, c).unwrap()
        };
        let rg = self.tape.rg(&[self.id, other.id]);
        Ok(self.tape.push(
            out,
            Op::Contract {
                a: self.id,
                b: other.id,
                plan: Box::new(plan),
            },
            rg,
        ))
    }

    /// Full inner product of two equally shaped tensors.
    pub fn dot(self, other: Var<'t>) -> Result<Var<'t>> {
        let rank = self.shape().len();
        let pairs: Vec<(usize, usize)> = (0..rank).map(|i| (i, i)).collect();
        self.contract(other, &pairs)
    }

    /// Matrix `self` (rows × cols) times vector `x` (cols).
    pub fn matvec(self, x: Var<'t>) -> Result<Var<'t>> {
        self.contract(x, &[(1, 0)])
    }

    /// Scatter-contraction against a one-hot lookup table: `o[l] = sum f_h u_i v_j [ans(h,i,j) = l]`.
    pub fn lookup(index: &Arc<LookupIndex>, f: Var<'t>, u: Var<'t>, v: Var<'t>) -> Result<Var<'t>> {
        let n = index.n;
        if f.shape() != [index.ops] || u.shape() != [n] || v.shape() != [n] {
            return Err(Error::Shape(format!(
                "lookup expects f[{}], u[{n}], v[{n}]; got {:?}, {:?}, {:?}",
                index.ops,
                f.shape(),
                u.shape(),
                v.shape()
            )));
        }
        let tape = f.tape;
        let out = {
            let nodes = tape.nodes.borrow();
            let (fv, uv, vv) = (
                nodes[f.id].value.data(),
                nodes[u.id].value.data(),
                nodes[v.id].value.data(),
            );
            let mut outer = vec![0.0; n * n];
            for i in 0..n {
                for j in 0..n {
                    outer[i * n + j] = uv[i] * vv[j];
                }
            }
            let mut o = vec![0.0; n];
            for (h, &fh) in fv.iter().enumerate() {
                if fh == 0.0 {
                    continue;
                }
                for i in 0..n {
                    for j in 0..n {
                        o[index.at(h, i, j)] += fh * outer[i * n + j];
                    }
                }
            }
            Tensor::vector(o)
        };
        let rg = tape.rg(&[f.id, u.id, v.id]);
        Ok(tape.push(
            out,
            Op::Lookup {
                index: Arc::clone(index),
                f: f.id,
                u: u.id,
                v: v.id,
            },
            rg,
        ))
    }
}

/// Concatenates along `axis`; all other dimensions must agree.
pub fn concat<'t>(parts: &[Var<'t>], axis: usize) -> Var<'t> {
    assert!(!parts.is_empty(), "concat of nothing");
    let tape = parts[0].tape;
    let shapes: Vec<Vec<usize>> = parts.iter().map(|p| p.shape()).collect();
    let base = &shapes[0];
    for s in &shapes {
        assert_eq!(s.len(), base.len(), "concat: rank mismatch");
        for (k, (&x, &y)) in s.iter().zip(base).enumerate() {
            assert!(k == axis || x == y, "concat: shapes {s:?} and {base:?} differ off-axis");
        }
    }
    let outer: usize = base[..axis].iter().product();
    let inner: usize = base[axis + 1..].iter().product();
    let chunks: Vec<usize> = shapes.iter().map(|s| s[axis] * inner).collect();
    let total: usize = chunks.iter().sum();
    let mut out_shape = base.clone();
    out_shape[axis] = shapes.iter().map(|s| s[axis]).sum();
    let out = {
        let nodes = tape.nodes.borrow();
        let mut data = Vec::with_capacity(outer * total);
        for o in 0..outer {
            for (p, &chunk) in parts.iter().zip(&chunks) {
                data.extend_from_slice(&nodes[p.id].value.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        Tensor::new(out_shape, data).unwrap()
    };
    let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
    let rg = tape.rg(&ids);
    tape.push(
        out,
        Op::Concat {
            parts: ids.into_iter().zip(chunks).collect(),
            outer,
            total,
        },
        rg,
    )
}

/// Stacks scalars into a vector.
pub fn stack<'t>(scalars: &[Var<'t>]) -> Var<'t> {
    let parts: Vec<Var<'t>> = scalars.iter().map(|s| s.reshape(&[1])).collect();
    concat(&parts, 0)
}

/// Convex combination `(1 - p) a + p b` with scalar `p`.
///
/// `p` outside `[0, 1]` is rejected when debug assertions are enabled.
pub fn mix<'t>(p: Var<'t>, a: Var<'t>, b: Var<'t>) -> Result<Var<'t>> {
    let tape = p.tape;
    let out = {
        let nodes = tape.nodes.borrow();
        let pv = &nodes[p.id].value;
        if pv.len() != 1 {
            return Err(Error::Shape(format!("mix weight must be scalar, got {:?}", pv.shape())));
        }
        let w = pv.item();
        if cfg!(debug_assertions) && !(-1e-12..=1.0 + 1e-12).contains(&w) {
            return Err(Error::Domain(format!("mix weight {w} outside [0, 1]")));
        }
        let (av, bv) = (&nodes[a.id].value, &nodes[b.id].value);
        if av.shape() != bv.shape() {
            return Err(Error::Shape(format!(
                "mix operands differ: {:?} vs {:?}",
                av.shape(),
                bv.shape()
            )));
        }
        let data = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(x, y)| (1.0 - w) * x + w * y)
            .collect();
        Tensor::new(av.shape().to_vec(), data).unwrap()
    };
    let rg = tape.rg(&[p.id, a.id, b.id]);
    Ok(tape.push(out, Op::Mix { p: p.id, a: a.id, b: b.id }, rg))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn approx(a: &[f64], b: &[f64], tol: f64) {
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(b) {
            assert!((x - y).abs() <= tol, "{a:?} vs {b:?}");
        }
    }

    #[test]
    fn dirac_contraction_selects_row() {
        let t = Tape::new();
        let e = t.constant(Tensor::vector(vec![1.0, 0.0, 0.0]));
        let m = t.constant(Tensor::matrix(3, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap());
        let r = e.contract(m, &[(0, 0)]).unwrap();
        assert_eq!(r.to_vec(), vec![1.0, 2.0]);
    }

    #[test]
    fn bilinear_gradient() {
        let t = Tape::new();
        let x = t.param(Tensor::vector(vec![1.0, 2.0]));
        let y = t.constant(Tensor::vector(vec![3.0, 4.0]));
        let s = x.dot(y).unwrap();
        assert_eq!(s.item(), 11.0);
        let g = t.backward(s).unwrap();
        assert_eq!(g.wrt(x).data(), &[3.0, 4.0]);
        assert!(g.get(y).is_none());
    }

    #[test]
    fn contract_rejects_mismatched_axes() {
        let t = Tape::new();
        let a = t.constant(Tensor::zeros(&[2, 3]));
        let b = t.constant(Tensor::zeros(&[4]));
        let err = a.contract(b, &[(1, 0)]).unwrap_err();
        assert!(err.to_string().contains("size 3"), "{err}");
    }

    #[test]
    fn contract_outer_product_has_no_pairs() {
        let t = Tape::new();
        let a = t.constant(Tensor::vector(vec![1.0, 2.0]));
        let b = t.constant(Tensor::vector(vec![3.0, 4.0, 5.0]));
        let o = a.contract(b, &[]).unwrap();
        assert_eq!(o.shape(), vec![2, 3]);
        assert_eq!(o.to_vec(), vec![3.0, 4.0, 5.0, 6.0, 8.0, 10.0]);
    }

    #[test]
    fn mix_endpoints_and_interpolation() {
        let t = Tape::new();
        let a = t.constant(Tensor::vector(vec![0.0, 4.0]));
        let b = t.constant(Tensor::vector(vec![4.0, 0.0]));
        assert_eq!(mix(t.scalar(0.0), a, b).unwrap().to_vec(), vec![0.0, 4.0]);
        assert_eq!(mix(t.scalar(1.0), a, b).unwrap().to_vec(), vec![4.0, 0.0]);
        assert_eq!(mix(t.scalar(0.25), a, b).unwrap().to_vec(), vec![1.0, 3.0]);
    }

    #[test]
    #[cfg(debug_assertions)]
    fn mix_rejects_weight_outside_unit_interval() {
        let t = Tape::new();
        let a = t.constant(Tensor::vector(vec![0.0]));
        assert!(matches!(mix(t.scalar(1.5), a, a), Err(Error::Domain(_))));
    }

    #[test]
    fn softmax_cases() {
        let t = Tape::new();
        let s = t.constant(Tensor::vector(vec![0.0, 0.0, 0.0])).softmax(0);
        approx(&s.to_vec(), &[1.0 / 3.0; 3], 1e-15);
        let s = t.constant(Tensor::vector(vec![1000.0, 0.0])).softmax(0);
        let v = s.to_vec();
        assert!(v.iter().all(|x| x.is_finite()));
        approx(&v, &[1.0, 0.0], 1e-300);
        let s = t.constant(Tensor::vector(vec![2f64.ln(), 0.0])).softmax(0);
        approx(&s.to_vec(), &[2.0 / 3.0, 1.0 / 3.0], 1e-15);
    }

    #[test]
    fn softmax_along_first_axis() {
        let t = Tape::new();
        let m = t.constant(Tensor::matrix(2, 2, vec![0.0, 1.0, 0.0, 1.0]).unwrap());
        let s = m.softmax(0).to_vec();
        approx(&s, &[0.5, 0.5, 0.5, 0.5], 1e-15);
    }

    #[test]
    fn roll_shifts_right() {
        let t = Tape::new();
        let c = t.constant(Tensor::vector(vec![1.0, 2.0, 3.0, 4.0]));
        assert_eq!(c.roll(1).to_vec(), vec![4.0, 1.0, 2.0, 3.0]);
    }

    #[test]
    fn slice_and_concat_inverse() {
        let t = Tape::new();
        let m = t.constant(Tensor::matrix(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap());
        let a = m.slice(1, 0, 1);
        let b = m.slice(1, 1, 2);
        assert_eq!(a.to_vec(), vec![1.0, 4.0]);
        assert_eq!(concat(&[a, b], 1).to_vec(), m.to_vec());
        assert_eq!(concat(&[m, m], 0).shape(), vec![4, 3]);
    }

    #[test]
    fn backward_requires_scalar_root() {
        let t = Tape::new();
        let x = t.param(Tensor::vector(vec![1.0, 2.0]));
        assert!(matches!(t.backward(x), Err(Error::Usage(_))));
    }

    #[test]
    fn gradients_accumulate_over_reuse() {
        let t = Tape::new();
        let x = t.param(Tensor::scalar(3.0));
        let y = x.mul(x).add(x);
        let g = t.backward(y).unwrap();
        assert_eq!(g.wrt(x).item(), 7.0);
    }
}
