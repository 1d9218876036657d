use std::cell::RefCell;
use std::fmt;
use std::rc::Rc;

use super::kernels::{self, gemm_acc, gemm_at_acc, inverse_perm, transpose};
use super::{axis_split, check_perm, gelu, logistic, normal_cdf, normal_pdf, softplus, Tensor};
use crate::error::{shape_err, Error, Result};

/// Backward rule of a custom op: given the input values, the output value and
/// the incoming gradient, return one gradient buffer per input.
pub type BackwardFn = Rc<dyn Fn(&[&Tensor], &Tensor, &[f64]) -> Vec<Vec<f64>>>;

#[derive(Clone)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    AddRow(usize, usize),
    MulRow(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    MatMul(usize, usize, Rc<MatMulPlan>),
    Reshape(usize),
    Permute(usize, Vec<usize>),
    Concat(Vec<usize>, usize),
    Slice { input: usize, axis: usize, start: usize },
    Gather { input: usize, axis: usize, indices: Rc<Vec<usize>> },
    Sum(usize),
    Mean(usize),
    SumAxis(usize, usize),
    Softmax(usize, usize),
    LayerNorm { x: usize, gamma: usize, beta: usize, xhat: Rc<Vec<f64>>, rstd: Rc<Vec<f64>> },
    Gelu(usize),
    Exp(usize),
    Log(usize),
    Softplus(usize),
    Sigmoid(usize),
    NormalCdf(usize),
    Clamp(usize, f64, f64),
    Custom(Vec<usize>, BackwardFn),
}

impl Op {
    fn inputs(&self) -> Vec<usize> {
        use Op::*;
        match self {
            Leaf => vec![],
            Add(a, b) | Sub(a, b) | Mul(a, b) | Div(a, b) | AddRow(a, b) | MulRow(a, b) => {
                vec![*a, *b]
            }
            MatMul(a, b, _) => vec![*a, *b],
            Scale(a, _) | AddScalar(a) | Reshape(a) | Permute(a, _) | Sum(a) | Mean(a) => vec![*a],
            SumAxis(a, _) | Softmax(a, _) | Gelu(a) | Exp(a) | Log(a) | Softplus(a) => vec![*a],
            Sigmoid(a) | NormalCdf(a) | Clamp(a, _, _) => vec![*a],
            Slice { input, .. } | Gather { input, .. } => vec![*input],
            Concat(ins, _) | Custom(ins, _) => ins.clone(),
            LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
        }
    }
}

/// Batch bookkeeping for a broadcast matrix product.
struct MatMulPlan {
    m: usize,
    k: usize,
    n: usize,
    /// (output block, a block, b block) offsets in units of whole matrices.
    blocks: Vec<(usize, usize, usize)>,
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Records forward ops so [`Graph::backward`] can replay them in reverse.
///
/// Nodes are appended in creation order, which is already a topological
/// order, so backward is a single reverse sweep.
#[derive(Default)]
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g> {
    graph: &'g Graph,
    id: usize,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var({}, {:?})", self.id, self.shape())
    }
}

/// Gradients of a scalar loss with respect to the leaves that required one.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var<'_>) -> Option<&Tensor> {
        self.grads.get(v.id).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, or zeros if nothing flowed into it.
    pub fn get_or_zeros(&self, v: Var<'_>) -> Tensor {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(v.value().shape()))
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Constant input; no gradient is tracked for it.
    pub fn constant(&self, t: Tensor) -> Var<'_> {
        self.push_leaf(t, false)
    }

    /// Trainable input; gradients accumulate into it.
    pub fn param(&self, t: Tensor) -> Var<'_> {
        self.push_leaf(t, true)
    }

    fn push_leaf(&self, t: Tensor, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(t),
            op: Op::Leaf,
            requires_grad,
        });
        Var {
            graph: self,
            id: nodes.len() - 1,
        }
    }

    fn push(&self, value: Tensor, op: Op, name: &'static str) -> Result<Var<'_>> {
        if !value.is_finite() {
            return Err(Error::NonFinite(name));
        }
        let mut nodes = self.nodes.borrow_mut();
        let requires_grad = op.inputs().iter().any(|&i| nodes[i].requires_grad);
        nodes.push(Node {
            value: Rc::new(value),
            op,
            requires_grad,
        });
        Ok(Var {
            graph: self,
            id: nodes.len() - 1,
        })
    }

    fn val(&self, id: usize) -> Rc<Tensor> {
        self.nodes.borrow()[id].value.clone()
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat<'g>(&'g self, parts: &[Var<'g>], axis: usize) -> Result<Var<'g>> {
        if parts.is_empty() {
            return Err(Error::Usage("concat of zero tensors".into()));
        }
        let vals: Vec<Rc<Tensor>> = parts.iter().map(|p| p.value()).collect();
        let base = vals[0].shape().to_vec();
        let (outer, _, inner) = axis_split(&base, axis)?;
        let mut total = 0;
        for v in &vals {
            let s = v.shape();
            if s.len() != base.len()
                || s.iter()
                    .zip(&base)
                    .enumerate()
                    .any(|(i, (a, b))| i != axis && a != b)
            {
                return Err(shape_err!("concat of {:?} with {:?} on axis {axis}", base, s));
            }
            total += s[axis];
        }
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for v in &vals {
                let len = v.shape()[axis] * inner;
                data.extend_from_slice(&v.data()[o * len..(o + 1) * len]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        self.push(
            Tensor::new(shape, data)?,
            Op::Concat(parts.iter().map(|p| p.id).collect(), axis),
            "concat",
        )
    }

    /// Op with a caller-supplied backward rule.
    pub fn custom<'g>(
        &'g self,
        inputs: &[Var<'g>],
        value: Tensor,
        backward: BackwardFn,
    ) -> Result<Var<'g>> {
        self.push(
            value,
            Op::Custom(inputs.iter().map(|v| v.id).collect(), backward),
            "custom",
        )
    }

    /// Reverse sweep from a scalar `loss`. Gradients accumulate additively
    /// across fan-out, in reverse creation order.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        if nodes[loss.id].value.numel() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                nodes[loss.id].value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        grads[loss.id] = Some(vec![1.0]);
        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            backprop(&nodes, node, &g, &mut grads);
            // Interior gradients are dropped once consumed; only leaves keep theirs.
            if matches!(node.op, Op::Leaf) {
                grads[id] = Some(g);
            }
        }
        let grads = grads
            .into_iter()
            .zip(nodes.iter())
            .map(|(g, n)| g.map(|g| Tensor::new(n.value.shape().to_vec(), g).expect("grad shape")))
            .collect();
        Ok(Gradients { grads })
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], nodes: &[Node], id: usize, f: impl FnOnce(&mut [f64])) {
    if !nodes[id].requires_grad {
        return;
    }
    let slot = grads[id].get_or_insert_with(|| vec![0.0; nodes[id].value.numel()]);
    f(slot);
}

/// Adds `f(i)` to every gradient entry of `id`. A first contribution is
/// stored directly instead of being added to a zero buffer.
fn accumulate_map(grads: &mut [Option<Vec<f64>>], nodes: &[Node], id: usize, f: impl Fn(usize) -> f64) {
    if !nodes[id].requires_grad {
        return;
    }
    match &mut grads[id] {
        Some(acc) => acc.iter_mut().enumerate().for_each(|(i, x)| *x += f(i)),
        slot @ None => *slot = Some((0..nodes[id].value.numel()).map(f).collect()),
    }
}

/// Adds an owned gradient, taking it over when it is the first one.
fn accumulate_owned(grads: &mut [Option<Vec<f64>>], nodes: &[Node], id: usize, g: Vec<f64>) {
    if !nodes[id].requires_grad {
        return;
    }
    match &mut grads[id] {
        Some(acc) => add_into(acc, &g),
        slot @ None => *slot = Some(g),
    }
}

fn backprop(nodes: &[Node], node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let val = |i: usize| -> &Tensor { &nodes[i].value };
    let out = &node.value;
    match &node.op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            accumulate_map(grads, nodes, *a, |i| g[i]);
            accumulate_map(grads, nodes, *b, |i| g[i]);
        }
        Op::Sub(a, b) => {
            accumulate_map(grads, nodes, *a, |i| g[i]);
            accumulate_map(grads, nodes, *b, |i| -g[i]);
        }
        Op::Mul(a, b) => {
            let (va, vb) = (val(*a).data(), val(*b).data());
            accumulate_map(grads, nodes, *a, |i| g[i] * vb[i]);
            accumulate_map(grads, nodes, *b, |i| g[i] * va[i]);
        }
        Op::Div(a, b) => {
            let (va, vb) = (val(*a).data(), val(*b).data());
            accumulate_map(grads, nodes, *a, |i| g[i] / vb[i]);
            accumulate_map(grads, nodes, *b, |i| -(g[i] * va[i] / (vb[i] * vb[i])));
        }
        Op::AddRow(a, b) => {
            accumulate_map(grads, nodes, *a, |i| g[i]);
            accumulate(grads, nodes, *b, |gb| {
                let c = gb.len();
                for row in g.chunks(c) {
                    add_into(gb, row);
                }
            });
        }
        Op::MulRow(a, b) => {
            let (va, vb) = (val(*a).data(), val(*b).data());
            let c = vb.len();
            accumulate_map(grads, nodes, *a, |i| g[i] * vb[i % c]);
            accumulate(grads, nodes, *b, |gb| {
                for (i, (&d, &x)) in g.iter().zip(va).enumerate() {
                    gb[i % c] += d * x;
                }
            });
        }
        Op::Scale(a, s) => accumulate_map(grads, nodes, *a, |i| s * g[i]),
        Op::AddScalar(a) | Op::Reshape(a) => accumulate_map(grads, nodes, *a, |i| g[i]),
        Op::MatMul(a, b, plan) => {
            let (va, vb) = (val(*a).data(), val(*b).data());
            let (m, k, n) = (plan.m, plan.k, plan.n);
            accumulate(grads, nodes, *a, |ga| {
                // dA = dC · Bᵀ
                let mut bt_cache: Option<(usize, Vec<f64>)> = None;
                for &(o, ia, ib) in &plan.blocks {
                    if bt_cache.as_ref().map(|c| c.0) != Some(ib) {
                        bt_cache = Some((ib, transpose(k, n, &vb[ib * k * n..(ib + 1) * k * n])));
                    }
                    let bt = &bt_cache.as_ref().expect("cached").1;
                    gemm_acc(m, n, k, &g[o * m * n..(o + 1) * m * n], bt, &mut ga[ia * m * k..(ia + 1) * m * k]);
                }
            });
            accumulate(grads, nodes, *b, |gb| {
                // dB = Aᵀ · dC
                for &(o, ia, ib) in &plan.blocks {
                    let a_block = &va[ia * m * k..(ia + 1) * m * k];
                    gemm_at_acc(k, m, n, a_block, &g[o * m * n..(o + 1) * m * n], &mut gb[ib * k * n..(ib + 1) * k * n]);
                }
            });
        }
        Op::Permute(a, perm) => {
            let (_, back) = kernels::permute(g, out.shape(), &inverse_perm(perm));
            accumulate_owned(grads, nodes, *a, back);
        }
        Op::Concat(parts, axis) => {
            let (outer, _, inner) = axis_split(out.shape(), *axis).expect("concat axis");
            let total = out.shape()[*axis] * inner;
            let mut offset = 0;
            for &p in parts {
                let len = val(p).shape()[*axis] * inner;
                accumulate(grads, nodes, p, |gp| {
                    for o in 0..outer {
                        add_into(&mut gp[o * len..(o + 1) * len], &g[o * total + offset..o * total + offset + len]);
                    }
                });
                offset += len;
            }
        }
        Op::Slice { input, axis, start } => {
            let in_shape = val(*input).shape().to_vec();
            let (outer, ext, inner) = axis_split(&in_shape, *axis).expect("slice axis");
            let len = out.shape()[*axis] * inner;
            accumulate(grads, nodes, *input, |ga| {
                for o in 0..outer {
                    let dst = o * ext * inner + start * inner;
                    add_into(&mut ga[dst..dst + len], &g[o * len..(o + 1) * len]);
                }
            });
        }
        Op::Gather { input, axis, indices } => {
            let in_shape = val(*input).shape().to_vec();
            let (outer, ext, inner) = axis_split(&in_shape, *axis).expect("gather axis");
            let picked = indices.len();
            accumulate(grads, nodes, *input, |ga| {
                for o in 0..outer {
                    for (j, &src) in indices.iter().enumerate() {
                        let d = (o * ext + src) * inner;
                        let s = (o * picked + j) * inner;
                        add_into(&mut ga[d..d + inner], &g[s..s + inner]);
                    }
                }
            });
        }
        Op::Sum(a) => accumulate(grads, nodes, *a, |ga| ga.iter_mut().for_each(|x| *x += g[0])),
        Op::Mean(a) => accumulate(grads, nodes, *a, |ga| {
            let s = g[0] / ga.len() as f64;
            ga.iter_mut().for_each(|x| *x += s)
        }),
        Op::SumAxis(a, axis) => {
            let (outer, ext, inner) = axis_split(val(*a).shape(), *axis).expect("sum axis");
            accumulate(grads, nodes, *a, |ga| {
                for o in 0..outer {
                    for e in 0..ext {
                        let d = (o * ext + e) * inner;
                        add_into(&mut ga[d..d + inner], &g[o * inner..(o + 1) * inner]);
                    }
                }
            });
        }
        Op::Softmax(a, axis) => {
            let (outer, ext, inner) = axis_split(out.shape(), *axis).expect("softmax axis");
            let y = out.data();
            accumulate(grads, nodes, *a, |ga| {
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |e: usize| (o * ext + e) * inner + i;
                        let mut dot = 0.0;
                        for e in 0..ext {
                            dot += g[at(e)] * y[at(e)];
                        }
                        for e in 0..ext {
                            ga[at(e)] += y[at(e)] * (g[at(e)] - dot);
                        }
                    }
                }
            });
        }
        Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
            let gam = val(*gamma).data();
            let c = gam.len();
            accumulate(grads, nodes, *x, |gx| {
                for (t, &rs) in rstd.iter().enumerate() {
                    let row = t * c..(t + 1) * c;
                    let (gr, xr) = (&g[row.clone()], &xhat[row.clone()]);
                    let mut mean_d = 0.0;
                    let mut mean_dx = 0.0;
                    for j in 0..c {
                        let d = gr[j] * gam[j];
                        mean_d += d;
                        mean_dx += d * xr[j];
                    }
                    mean_d /= c as f64;
                    mean_dx /= c as f64;
                    for j in 0..c {
                        let d = gr[j] * gam[j];
                        gx[t * c + j] += rs * (d - mean_d - xr[j] * mean_dx);
                    }
                }
            });
            accumulate(grads, nodes, *gamma, |gg| {
                for (d, xh) in g.chunks(c).zip(xhat.chunks(c)) {
                    for j in 0..c {
                        gg[j] += d[j] * xh[j];
                    }
                }
            });
            accumulate(grads, nodes, *beta, |gb| {
                for d in g.chunks(c) {
                    add_into(gb, d);
                }
            });
        }
        Op::Gelu(a) => unary_grad(grads, nodes, *a, g, |x, _| normal_cdf(x) + x * normal_pdf(x), out),
        Op::Exp(a) => unary_grad(grads, nodes, *a, g, |_, y| y, out),
        Op::Log(a) => unary_grad(grads, nodes, *a, g, |x, _| 1.0 / x, out),
        Op::Softplus(a) => unary_grad(grads, nodes, *a, g, |x, _| logistic(x), out),
        Op::Sigmoid(a) => unary_grad(grads, nodes, *a, g, |_, y| y * (1.0 - y), out),
        Op::NormalCdf(a) => unary_grad(grads, nodes, *a, g, |x, _| normal_pdf(x), out),
        Op::Clamp(a, lo, hi) => {
            let (lo, hi) = (*lo, *hi);
            unary_grad(grads, nodes, *a, g, |x, _| if x >= lo && x <= hi { 1.0 } else { 0.0 }, out)
        }
        Op::Custom(inputs, rule) => {
            let ins: Vec<&Tensor> = inputs.iter().map(|&i| val(i)).collect();
            let outs = rule(&ins, out, g);
            for (&i, gi) in inputs.iter().zip(outs) {
                accumulate_owned(grads, nodes, i, gi);
            }
        }
    }
}

fn unary_grad(
    grads: &mut [Option<Vec<f64>>],
    nodes: &[Node],
    a: usize,
    g: &[f64],
    deriv: impl Fn(f64, f64) -> f64,
    out: &Tensor,
) {
    let x = nodes[a].value.data();
    let y = out.data();
    accumulate_map(grads, nodes, a, |i| g[i] * deriv(x[i], y[i]));
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, &s)| *d += s);
}

fn broadcast_batch(a: &[usize], b: &[usize]) -> Result<(Vec<usize>, Vec<usize>, Vec<usize>)> {
    let rank = a.len().max(b.len());
    let pad = |s: &[usize]| {
        let mut v = vec![1; rank - s.len()];
        v.extend_from_slice(s);
        v
    };
    let (pa, pb) = (pad(a), pad(b));
    let mut out = Vec::with_capacity(rank);
    for (&x, &y) in pa.iter().zip(&pb) {
        if x != y && x != 1 && y != 1 {
            return Err(shape_err!("batch extents {a:?} and {b:?} do not broadcast"));
        }
        out.push(x.max(y));
    }
    Ok((out, pa, pb))
}

impl<'g> Var<'g> {
    pub fn graph(&self) -> &'g Graph {
        self.graph
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.graph.val(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.graph.nodes.borrow()[self.id].value.shape().to_vec()
    }

    fn same_shape(&self, other: &Var<'g>, what: &str) -> Result<(Rc<Tensor>, Rc<Tensor>)> {
        let (a, b) = (self.value(), other.value());
        if a.shape() != b.shape() {
            return Err(shape_err!("{what}: {:?} vs {:?}", a.shape(), b.shape()));
        }
        Ok((a, b))
    }

    fn zip_op(
        self,
        other: Var<'g>,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var<'g>> {
        let (a, b) = self.same_shape(&other, name)?;
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        self.graph.push(Tensor::new(a.shape().to_vec(), data)?, op, name)
    }

    fn unary(self, name: &'static str, f: impl Fn(f64) -> f64, op: Op) -> Result<Var<'g>> {
        let a = self.value();
        self.graph.push(a.map(f), op, name)
    }

    pub fn add(self, other: Var<'g>) -> Result<Var<'g>> {
        self.zip_op(other, "add", |x, y| x + y, Op::Add(self.id, other.id))
    }

    pub fn sub(self, other: Var<'g>) -> Result<Var<'g>> {
        self.zip_op(other, "sub", |x, y| x - y, Op::Sub(self.id, other.id))
    }

    pub fn mul(self, other: Var<'g>) -> Result<Var<'g>> {
        self.zip_op(other, "mul", |x, y| x * y, Op::Mul(self.id, other.id))
    }

    pub fn div(self, other: Var<'g>) -> Result<Var<'g>> {
        self.zip_op(other, "div", |x, y| x / y, Op::Div(self.id, other.id))
    }

    fn row_op(self, row: Var<'g>, name: &'static str, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var<'g>> {
        let (a, r) = (self.value(), row.value());
        let c = *a.shape().last().unwrap_or(&1);
        if r.rank() != 1 || r.numel() != c || a.rank() == 0 {
            return Err(shape_err!("{name}: row {:?} against {:?}", r.shape(), a.shape()));
        }
        let rd = r.data();
        let data = a.data().iter().enumerate().map(|(i, &x)| f(x, rd[i % c])).collect();
        self.graph.push(Tensor::new(a.shape().to_vec(), data)?, op, name)
    }

    /// Adds a `[C]` vector to every row of a `[.., C]` tensor.
    pub fn add_row(self, row: Var<'g>) -> Result<Var<'g>> {
        self.row_op(row, "add_row", |x, y| x + y, Op::AddRow(self.id, row.id))
    }

    /// Multiplies every row of a `[.., C]` tensor by a `[C]` vector.
    pub fn mul_row(self, row: Var<'g>) -> Result<Var<'g>> {
        self.row_op(row, "mul_row", |x, y| x * y, Op::MulRow(self.id, row.id))
    }

    pub fn scale(self, s: f64) -> Result<Var<'g>> {
        self.unary("scale", |x| x * s, Op::Scale(self.id, s))
    }

    pub fn add_scalar(self, s: f64) -> Result<Var<'g>> {
        self.unary("add_scalar", |x| x + s, Op::AddScalar(self.id))
    }

    pub fn neg(self) -> Result<Var<'g>> {
        self.scale(-1.0)
    }

    pub fn square(self) -> Result<Var<'g>> {
        self.mul(self)
    }

    /// Batched matrix product `[.., m, k] x [.., k, n] -> [.., m, n]` with
    /// broadcasting over the batch extents.
    pub fn matmul(self, other: Var<'g>) -> Result<Var<'g>> {
        let (a, b) = (self.value(), other.value());
        let (sa, sb) = (a.shape(), b.shape());
        if sa.len() < 2 || sb.len() < 2 || sa[sa.len() - 1] != sb[sb.len() - 2] {
            return Err(shape_err!("matmul of {sa:?} and {sb:?}"));
        }
        let (m, k, n) = (sa[sa.len() - 2], sa[sa.len() - 1], sb[sb.len() - 1]);
        let (batch, pa, pb) = broadcast_batch(&sa[..sa.len() - 2], &sb[..sb.len() - 2])?;
        let (stride_a, stride_b) = (kernels::strides(&pa), kernels::strides(&pb));
        let n_out: usize = batch.iter().product();
        let mut blocks = Vec::with_capacity(n_out);
        let mut idx = vec![0usize; batch.len()];
        for o in 0..n_out {
            let mut ia = 0;
            let mut ib = 0;
            for d in 0..batch.len() {
                if pa[d] != 1 {
                    ia += idx[d] * stride_a[d];
                }
                if pb[d] != 1 {
                    ib += idx[d] * stride_b[d];
                }
            }
            blocks.push((o, ia, ib));
            for d in (0..batch.len()).rev() {
                idx[d] += 1;
                if idx[d] < batch[d] {
                    break;
                }
                idx[d] = 0;
            }
        }
        // A shared right operand against consecutive left blocks is one tall
        // product; the result is identical since rows are computed independently.
        let mut data = vec![0.0; n_out * m * n];
        let shared = pb.iter().all(|&d| d == 1) && blocks.iter().all(|&(o, ia, _)| ia == o);
        let (m, blocks) = if shared { (m * n_out, vec![(0, 0, 0)]) } else { (m, blocks) };
        for &(o, ia, ib) in &blocks {
            gemm_acc(
                m,
                k,
                n,
                &a.data()[ia * m * k..(ia + 1) * m * k],
                &b.data()[ib * k * n..(ib + 1) * k * n],
                &mut data[o * m * n..(o + 1) * m * n],
            );
        }
        let mut shape = batch;
        shape.extend([sa[sa.len() - 2], n]);
        let plan = Rc::new(MatMulPlan { m, k, n, blocks });
        self.graph
            .push(Tensor::new(shape, data)?, Op::MatMul(self.id, other.id, plan), "matmul")
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'g>> {
        let t = self.value().reshaped(shape)?;
        self.graph.push(t, Op::Reshape(self.id), "reshape")
    }

    pub fn permute(self, perm: &[usize]) -> Result<Var<'g>> {
        let a = self.value();
        check_perm(perm, a.rank())?;
        let (shape, data) = kernels::permute(a.data(), a.shape(), perm);
        self.graph
            .push(Tensor::new(shape, data)?, Op::Permute(self.id, perm.to_vec()), "permute")
    }

    /// Swaps the last two axes.
    pub fn transpose_last(self) -> Result<Var<'g>> {
        let r = self.value().rank();
        if r < 2 {
            return Err(shape_err!("transpose of rank {r}"));
        }
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(r - 2, r - 1);
        self.permute(&perm)
    }

    /// `len` entries of `axis` starting at `start`.
    pub fn slice(self, axis: usize, start: usize, len: usize) -> Result<Var<'g>> {
        let a = self.value();
        let (outer, ext, inner) = axis_split(a.shape(), axis)?;
        if len == 0 || start + len > ext {
            return Err(shape_err!("slice {start}..{} of extent {ext}", start + len));
        }
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let s = (o * ext + start) * inner;
            data.extend_from_slice(&a.data()[s..s + len * inner]);
        }
        let mut shape = a.shape().to_vec();
        shape[axis] = len;
        self.graph.push(
            Tensor::new(shape, data)?,
            Op::Slice { input: self.id, axis, start },
            "slice",
        )
    }

    pub fn split(self, axis: usize, sizes: &[usize]) -> Result<Vec<Var<'g>>> {
        let ext = *self
            .shape()
            .get(axis)
            .ok_or_else(|| shape_err!("split axis {axis}"))?;
        if sizes.iter().sum::<usize>() != ext {
            return Err(shape_err!("split sizes {sizes:?} do not cover extent {ext}"));
        }
        let mut start = 0;
        sizes
            .iter()
            .map(|&s| {
                let v = self.slice(axis, start, s);
                start += s;
                v
            })
            .collect()
    }

    /// Selects entries `indices` along `axis` (repeats allowed).
    pub fn gather(self, axis: usize, indices: &[usize]) -> Result<Var<'g>> {
        let a = self.value();
        let (outer, ext, inner) = axis_split(a.shape(), axis)?;
        if indices.is_empty() {
            return Err(shape_err!("gather with no indices"));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= ext) {
            return Err(shape_err!("gather index {bad} out of extent {ext}"));
        }
        let mut data = Vec::with_capacity(outer * indices.len() * inner);
        for o in 0..outer {
            for &i in indices {
                let s = (o * ext + i) * inner;
                data.extend_from_slice(&a.data()[s..s + inner]);
            }
        }
        let mut shape = a.shape().to_vec();
        shape[axis] = indices.len();
        self.graph.push(
            Tensor::new(shape, data)?,
            Op::Gather { input: self.id, axis, indices: Rc::new(indices.to_vec()) },
            "gather",
        )
    }

    pub fn sum(self) -> Result<Var<'g>> {
        let s = self.value().data().iter().fold(0.0, |acc, &v| acc + v);
        self.graph.push(Tensor::scalar(s), Op::Sum(self.id), "sum")
    }

    pub fn mean(self) -> Result<Var<'g>> {
        let a = self.value();
        let s = a.data().iter().fold(0.0, |acc, &v| acc + v) / a.numel() as f64;
        self.graph.push(Tensor::scalar(s), Op::Mean(self.id), "mean")
    }

    /// Sum over `axis`, which is removed from the shape.
    pub fn sum_axis(self, axis: usize) -> Result<Var<'g>> {
        let a = self.value();
        let (outer, ext, inner) = axis_split(a.shape(), axis)?;
        let mut data = vec![0.0; outer * inner];
        for o in 0..outer {
            for e in 0..ext {
                let s = (o * ext + e) * inner;
                add_into(&mut data[o * inner..(o + 1) * inner], &a.data()[s..s + inner]);
            }
        }
        let mut shape = a.shape().to_vec();
        shape.remove(axis);
        self.graph
            .push(Tensor::new(shape, data)?, Op::SumAxis(self.id, axis), "sum_axis")
    }

    /// Mean over `axis`, which is removed from the shape.
    pub fn mean_axis(self, axis: usize) -> Result<Var<'g>> {
        let ext = *self
            .shape()
            .get(axis)
            .ok_or_else(|| shape_err!("mean over axis {axis}"))?;
        self.sum_axis(axis)?.scale(1.0 / ext as f64)
    }

    /// Softmax along `axis`, max-subtracted.
    pub fn softmax(self, axis: usize) -> Result<Var<'g>> {
        let a = self.value();
        let (outer, ext, inner) = axis_split(a.shape(), axis)?;
        let x = a.data();
        let mut y = vec![0.0; x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |e: usize| (o * ext + e) * inner + i;
                let mx = (0..ext).map(|e| x[at(e)]).fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for e in 0..ext {
                    let v = libm::exp(x[at(e)] - mx);
                    y[at(e)] = v;
                    total += v;
                }
                for e in 0..ext {
                    y[at(e)] /= total;
                }
            }
        }
        self.graph
            .push(Tensor::new(a.shape().to_vec(), y)?, Op::Softmax(self.id, axis), "softmax")
    }

    /// Per-token normalization over the last axis, then `gamma * xhat + beta`.
    pub fn layer_norm(self, gamma: Var<'g>, beta: Var<'g>, eps: f64) -> Result<Var<'g>> {
        let (a, gm, bt) = (self.value(), gamma.value(), beta.value());
        let c = *a.shape().last().ok_or_else(|| shape_err!("layer_norm of scalar"))?;
        if gm.shape() != [c] || bt.shape() != [c] {
            return Err(shape_err!(
                "layer_norm affine {:?}/{:?} for channels {c}",
                gm.shape(),
                bt.shape()
            ));
        }
        let tokens = a.numel() / c;
        let mut xhat = vec![0.0; a.numel()];
        let mut rstd = vec![0.0; tokens];
        let mut y = vec![0.0; a.numel()];
        for t in 0..tokens {
            let row = &a.data()[t * c..(t + 1) * c];
            let mean = row.iter().fold(0.0, |s, &v| s + v) / c as f64;
            let var = row.iter().fold(0.0, |s, &v| s + (v - mean) * (v - mean)) / c as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[t] = rs;
            for j in 0..c {
                let xh = (row[j] - mean) * rs;
                xhat[t * c + j] = xh;
                y[t * c + j] = xh * gm.data()[j] + bt.data()[j];
            }
        }
        self.graph.push(
            Tensor::new(a.shape().to_vec(), y)?,
            Op::LayerNorm {
                x: self.id,
                gamma: gamma.id,
                beta: beta.id,
                xhat: Rc::new(xhat),
                rstd: Rc::new(rstd),
            },
            "layer_norm",
        )
    }

    pub fn gelu(self) -> Result<Var<'g>> {
        self.unary("gelu", gelu, Op::Gelu(self.id))
    }

    pub fn exp(self) -> Result<Var<'g>> {
        self.unary("exp", libm::exp, Op::Exp(self.id))
    }

    pub fn ln(self) -> Result<Var<'g>> {
        self.unary("ln", libm::log, Op::Log(self.id))
    }

    pub fn softplus(self) -> Result<Var<'g>> {
        self.unary("softplus", softplus, Op::Softplus(self.id))
    }

    pub fn sigmoid(self) -> Result<Var<'g>> {
        self.unary("sigmoid", logistic, Op::Sigmoid(self.id))
    }

    pub fn normal_cdf(self) -> Result<Var<'g>> {
        self.unary("normal_cdf", normal_cdf, Op::NormalCdf(self.id))
    }

    /// Clamp to `[lo, hi]`; the gradient is zero where the clamp is active.
    pub fn clamp(self, lo: f64, hi: f64) -> Result<Var<'g>> {
        self.unary("clamp", |x| x.clamp(lo, hi), Op::Clamp(self.id, lo, hi))
    }

    /// `[H, W, C] -> [H/b, W/b, b*b*C]`; channel order is (row in block,
    /// column in block, channel).
    pub fn space_to_depth(self, block: usize) -> Result<Var<'g>> {
        let s = self.shape();
        if s.len() != 3 || block == 0 || s[0] % block != 0 || s[1] % block != 0 {
            return Err(shape_err!("space_to_depth({block}) of {s:?}"));
        }
        let (h, w, c) = (s[0], s[1], s[2]);
        self.reshape(&[h / block, block, w / block, block, c])?
            .permute(&[0, 2, 1, 3, 4])?
            .reshape(&[h / block, w / block, block * block * c])
    }

    /// Inverse of [`Var::space_to_depth`].
    pub fn depth_to_space(self, block: usize) -> Result<Var<'g>> {
        let s = self.shape();
        if s.len() != 3 || block == 0 || s[2] % (block * block) != 0 {
            return Err(shape_err!("depth_to_space({block}) of {s:?}"));
        }
        let (h, w, c) = (s[0], s[1], s[2] / (block * block));
        self.reshape(&[h, w, block, block, c])?
            .permute(&[0, 2, 1, 3, 4])?
            .reshape(&[h * block, w * block, c])
    }
}
