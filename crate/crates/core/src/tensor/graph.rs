use std::cell::RefCell;
use std::rc::Rc;

use super::kernels::{self, MatView};
use super::Tensor;
use crate::error::{Error, Result};

/// Operation recorded on the tape, with whatever non-tensor arguments are
/// needed to recompute it.
#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul,
    Transpose,
    Add,
    Sub,
    Mul,
    Scale(f32),
    AddRow,
    AddChannel,
    Conv3x3,
    Bilinear { oh: usize, ow: usize },
    Area { oh: usize, ow: usize },
    Up2,
    LayerNorm { eps: f32 },
    Gelu,
    Embedding { indices: Rc<Vec<usize>> },
    Attention { heads: usize, mask: Option<Rc<Vec<bool>>> },
    CrossEntropy { targets: Rc<Vec<usize>> },
    Mse,
    Concat,
    Reshape { shape: Vec<usize> },
    SliceRows { start: usize, end: usize },
    Sum,
    Mean,
    Clamp { lo: f32, hi: f32 },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul => "matmul",
            Op::Transpose => "transpose",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::Scale(_) => "scale",
            Op::AddRow => "add_row",
            Op::AddChannel => "add_channel",
            Op::Conv3x3 => "conv2d",
            Op::Bilinear { .. } => "interpolate_bilinear",
            Op::Area { .. } => "resize_area",
            Op::Up2 => "upsample2",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Gelu => "gelu",
            Op::Embedding { .. } => "embedding",
            Op::Attention { .. } => "attention",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::Mse => "mse_loss",
            Op::Concat => "concat",
            Op::Reshape { .. } => "reshape",
            Op::SliceRows { .. } => "slice_rows",
            Op::Sum => "sum",
            Op::Mean => "mean",
            Op::Clamp { .. } => "clamp",
        }
    }
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
    inputs: Vec<usize>,
    saved: Vec<Vec<f32>>,
    requires_grad: bool,
}

/// The computation record: an append-only, topologically ordered tape.
#[derive(Default)]
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g> {
    graph: &'g Graph,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

/// Gradients of a scalar loss with respect to the leaves that required them.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f32>>>,
}

impl Gradients {
    pub fn get(&self, var: Var<'_>) -> Option<&[f32]> {
        self.get_id(var.id)
    }

    pub fn get_id(&self, id: usize) -> Option<&[f32]> {
        self.grads.get(id).and_then(|g| g.as_deref())
    }

    /// Copies gradients into the `grad` field of `tensor`, accumulating.
    pub fn accumulate_into(&self, var: Var<'_>, tensor: &mut Tensor) {
        if let Some(g) = self.get(var) {
            match &mut tensor.grad {
                Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
                None => tensor.grad = Some(g.to_vec()),
            }
        }
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

    /// Adds a leaf. It participates in differentiation iff `tensor.requires_grad`.
    pub fn leaf(&self, tensor: Tensor) -> Var<'_> {
        let requires_grad = tensor.requires_grad;
        self.push_node(Node {
            value: Rc::new(tensor),
            op: Op::Leaf,
            inputs: vec![],
            saved: vec![],
            requires_grad,
        })
    }

    pub fn constant(&self, mut tensor: Tensor) -> Var<'_> {
        tensor.requires_grad = false;
        tensor.grad = None;
        self.leaf(tensor)
    }

    /// Leaf copied from a parameter tensor, always differentiable.
    pub fn param(&self, tensor: &Tensor) -> Var<'_> {
        let mut t = Tensor::new(tensor.shape(), tensor.data().to_vec()).expect("valid tensor");
        t.requires_grad = true;
        self.leaf(t)
    }

    fn push_node(&self, node: Node) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(node);
        Var {
            graph: self,
            id: nodes.len() - 1,
        }
    }

    fn apply(&self, op: Op, inputs: &[Var<'_>]) -> Result<Var<'_>> {
        let (value, saved, requires_grad) = {
            let nodes = self.nodes.borrow();
            let vals: Vec<&Tensor> = inputs.iter().map(|v| nodes[v.id].value.as_ref()).collect();
            let (value, saved) = eval(&op, &vals)?;
            let requires_grad = inputs.iter().any(|v| nodes[v.id].requires_grad);
            (value, saved, requires_grad)
        };
        if !value.is_finite() {
            return Err(Error::NonFinite { op: op.name() });
        }
        Ok(self.push_node(Node {
            value: Rc::new(value),
            op,
            inputs: inputs.iter().map(|v| v.id).collect(),
            saved,
            requires_grad,
        }))
    }

    pub fn value_of(&self, id: usize) -> Rc<Tensor> {
        self.nodes.borrow()[id].value.clone()
    }

    /// Re-runs every recorded operation with new leaf values (given in leaf
    /// creation order) and returns all node outputs.
    pub fn replay(&self, leaves: &[Tensor]) -> Result<Vec<Tensor>> {
        let nodes = self.nodes.borrow();
        let mut values: Vec<Tensor> = Vec::with_capacity(nodes.len());
        let mut next_leaf = leaves.iter();
        for node in nodes.iter() {
            let v = match node.op {
                Op::Leaf => next_leaf
                    .next()
                    .ok_or_else(|| Error::Contract("replay: too few leaf values".into()))?
                    .clone(),
                _ => {
                    let ins: Vec<&Tensor> = node.inputs.iter().map(|&i| &values[i]).collect();
                    eval(&node.op, &ins)?.0
                }
            };
            values.push(v);
        }
        Ok(values)
    }

    /// Reverse pass from a scalar loss.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if root.value.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                root.value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f32>>> = vec![None; nodes.len()];
        if root.requires_grad {
            grads[loss.id] = Some(vec![1.0]);
        }
        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if matches!(node.op, Op::Leaf) || !node.requires_grad {
                continue;
            }
            let Some(gout) = grads[id].take() else { continue };
            let ins: Vec<&Tensor> = node.inputs.iter().map(|&i| nodes[i].value.as_ref()).collect();
            let needs: Vec<bool> = node.inputs.iter().map(|&i| nodes[i].requires_grad).collect();
            let local = vjp(&node.op, &ins, &node.value, &node.saved, &gout, &needs);
            for (slot, g) in node.inputs.iter().zip(local) {
                if let Some(g) = g {
                    match &mut grads[*slot] {
                        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                        empty => *empty = Some(g),
                    }
                }
            }
        }
        // Only leaf gradients survive.
        for (id, node) in nodes.iter().enumerate() {
            if !matches!(node.op, Op::Leaf) || !node.requires_grad {
                grads[id] = None;
            }
        }
        Ok(Gradients { grads })
    }

    pub fn embedding<'g>(&'g self, table: Var<'g>, indices: &[usize]) -> Result<Var<'g>> {
        self.apply(
            Op::Embedding {
                indices: Rc::new(indices.to_vec()),
            },
            &[table],
        )
    }

    /// Multi-head scaled dot-product attention over `[n, d]` sequences.
    /// `mask[i * n_k + j]` is true when query `i` may attend to key `j`.
    pub fn attention<'g>(
        &'g self,
        q: Var<'g>,
        k: Var<'g>,
        v: Var<'g>,
        heads: usize,
        mask: Option<Rc<Vec<bool>>>,
    ) -> Result<Var<'g>> {
        self.apply(Op::Attention { heads, mask }, &[q, k, v])
    }

    pub fn concat<'g>(&'g self, parts: &[Var<'g>]) -> Result<Var<'g>> {
        if parts.is_empty() {
            return Err(Error::Contract("concat of zero tensors".into()));
        }
        self.apply(Op::Concat, parts)
    }
}

impl<'g> Var<'g> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn graph(&self) -> &'g Graph {
        self.graph
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.graph.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.graph.nodes.borrow()[self.id].value.shape().to_vec()
    }

    fn unary(self, op: Op) -> Result<Var<'g>> {
        self.graph.apply(op, &[self])
    }

    fn binary(self, op: Op, other: Var<'g>) -> Result<Var<'g>> {
        self.graph.apply(op, &[self, other])
    }

    pub fn matmul(self, other: Var<'g>) -> Result<Var<'g>> {
        self.binary(Op::MatMul, other)
    }

    pub fn t(self) -> Result<Var<'g>> {
        self.unary(Op::Transpose)
    }

    pub fn add(self, other: Var<'g>) -> Result<Var<'g>> {
        self.binary(Op::Add, other)
    }

    pub fn sub(self, other: Var<'g>) -> Result<Var<'g>> {
        self.binary(Op::Sub, other)
    }

    pub fn mul(self, other: Var<'g>) -> Result<Var<'g>> {
        self.binary(Op::Mul, other)
    }

    pub fn scale(self, s: f32) -> Result<Var<'g>> {
        self.unary(Op::Scale(s))
    }

    /// `[n, d] + [d]`, bias broadcast over rows.
    pub fn add_row(self, bias: Var<'g>) -> Result<Var<'g>> {
        self.binary(Op::AddRow, bias)
    }

    /// `[c, ...] + [c]`, bias broadcast over everything after the first axis.
    pub fn add_channel(self, bias: Var<'g>) -> Result<Var<'g>> {
        self.binary(Op::AddChannel, bias)
    }

    /// 3×3 cross-correlation, stride 1, zero padding 1.
    pub fn conv3x3(self, kernels: Var<'g>, bias: Option<Var<'g>>) -> Result<Var<'g>> {
        match bias {
            Some(b) => self.graph.apply(Op::Conv3x3, &[self, kernels, b]),
            None => self.graph.apply(Op::Conv3x3, &[self, kernels]),
        }
    }

    pub fn resize_bilinear(self, oh: usize, ow: usize) -> Result<Var<'g>> {
        if oh == 0 || ow == 0 {
            return Err(Error::Contract(format!("resize target {oh}x{ow} must be positive")));
        }
        self.unary(Op::Bilinear { oh, ow })
    }

    pub fn resize_area(self, oh: usize, ow: usize) -> Result<Var<'g>> {
        if oh == 0 || ow == 0 {
            return Err(Error::Contract(format!("resize target {oh}x{ow} must be positive")));
        }
        self.unary(Op::Area { oh, ow })
    }

    /// 2×2 mean pooling.
    pub fn down2(self) -> Result<Var<'g>> {
        let s = self.shape();
        if s.len() != 3 || !s[1].is_multiple_of(2) || !s[2].is_multiple_of(2) {
            return Err(Error::shape("down2", &s, &[0, 2, 2]));
        }
        self.unary(Op::Area { oh: s[1] / 2, ow: s[2] / 2 })
    }

    /// 2× nearest-neighbour upsampling.
    pub fn up2(self) -> Result<Var<'g>> {
        self.unary(Op::Up2)
    }

    /// Normalizes over the last axis.
    pub fn layer_norm(self, gamma: Var<'g>, beta: Var<'g>, eps: f32) -> Result<Var<'g>> {
        self.graph.apply(Op::LayerNorm { eps }, &[self, gamma, beta])
    }

    pub fn gelu(self) -> Result<Var<'g>> {
        self.unary(Op::Gelu)
    }

    /// Mean cross-entropy of `[n, V]` logits against `n` target indices.
    pub fn cross_entropy(self, targets: &[usize]) -> Result<Var<'g>> {
        self.unary(Op::CrossEntropy {
            targets: Rc::new(targets.to_vec()),
        })
    }

    pub fn mse(self, target: Var<'g>) -> Result<Var<'g>> {
        self.binary(Op::Mse, target)
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'g>> {
        self.unary(Op::Reshape { shape: shape.to_vec() })
    }

    /// Slice `[start, end)` along the first axis.
    pub fn rows(self, start: usize, end: usize) -> Result<Var<'g>> {
        self.unary(Op::SliceRows { start, end })
    }

    pub fn sum(self) -> Result<Var<'g>> {
        self.unary(Op::Sum)
    }

    pub fn mean(self) -> Result<Var<'g>> {
        self.unary(Op::Mean)
    }

    /// Clamp with straight-through gradient inside `[lo, hi]`.
    pub fn clamp(self, lo: f32, hi: f32) -> Result<Var<'g>> {
        self.unary(Op::Clamp { lo, hi })
    }
}

fn two_d(t: &Tensor, op: &'static str) -> Result<(usize, usize)> {
    match t.shape() {
        &[r, c] => Ok((r, c)),
        other => Err(Error::shape(op, other, &[0, 0])),
    }
}

fn same_shape(a: &Tensor, b: &Tensor, op: &'static str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, a.shape(), b.shape()));
    }
    Ok(())
}

fn make(shape: &[usize], data: Vec<f32>) -> Result<Tensor> {
    Tensor::new(shape, data)
}

/// Forward evaluation. Returns the output and any intermediates the backward
/// rule needs.
fn eval(op: &Op, x: &[&Tensor]) -> Result<(Tensor, Vec<Vec<f32>>)> {
    let none = Vec::new;
    match op {
        Op::Leaf => unreachable!("leaves are not evaluated"),
        Op::MatMul => {
            let (m, k) = two_d(x[0], "matmul")?;
            let (k2, n) = two_d(x[1], "matmul")?;
            if k != k2 {
                return Err(Error::shape("matmul", x[0].shape(), x[1].shape()));
            }
            let mut out = vec![0.0; m * n];
            kernels::gemm(m, k, n, 1.0, x[0].data(), MatView::rm(k), x[1].data(), MatView::rm(n), 0.0, &mut out, MatView::rm(n));
            Ok((make(&[m, n], out)?, none()))
        }
        Op::Transpose => {
            let (m, n) = two_d(x[0], "transpose")?;
            let d = x[0].data();
            let mut out = vec![0.0; m * n];
            for i in 0..m {
                for j in 0..n {
                    out[j * m + i] = d[i * n + j];
                }
            }
            Ok((make(&[n, m], out)?, none()))
        }
        Op::Add => Ok((x[0].add(x[1])?, none())),
        Op::Sub => Ok((x[0].sub(x[1])?, none())),
        Op::Mul => Ok((x[0].zip_map(x[1], "mul", |a, b| a * b)?, none())),
        Op::Scale(s) => Ok((x[0].scale(*s), none())),
        Op::AddRow => {
            let (n, d) = two_d(x[0], "add_row")?;
            if x[1].shape() != [d] {
                return Err(Error::shape("add_row", x[0].shape(), x[1].shape()));
            }
            let b = x[1].data();
            let mut out = x[0].data().to_vec();
            for r in 0..n {
                out[r * d..(r + 1) * d].iter_mut().zip(b).for_each(|(o, b)| *o += b);
            }
            Ok((make(&[n, d], out)?, none()))
        }
        Op::AddChannel => {
            let c = x[0].shape()[0];
            if x[1].shape() != [c] {
                return Err(Error::shape("add_channel", x[0].shape(), x[1].shape()));
            }
            let inner = x[0].numel() / c;
            let b = x[1].data();
            let mut out = x[0].data().to_vec();
            for ch in 0..c {
                out[ch * inner..(ch + 1) * inner].iter_mut().for_each(|o| *o += b[ch]);
            }
            Ok((make(x[0].shape(), out)?, none()))
        }
        Op::Conv3x3 => {
            let (cin, h, w) = x[0].chw("conv2d")?;
            let ks = x[1].shape();
            if ks.len() != 4 || ks[2] != 3 || ks[3] != 3 || ks[1] != cin {
                return Err(Error::shape("conv2d", x[0].shape(), ks));
            }
            let cout = ks[0];
            if let Some(b) = x.get(2) {
                if b.shape() != [cout] {
                    return Err(Error::shape("conv2d bias", ks, b.shape()));
                }
            }
            let hw = h * w;
            let cols = kernels::im2col3(x[0].data(), cin, h, w);
            let mut out = vec![0.0; cout * hw];
            if let Some(b) = x.get(2) {
                for (ch, bv) in b.data().iter().enumerate() {
                    out[ch * hw..(ch + 1) * hw].iter_mut().for_each(|o| *o = *bv);
                }
            }
            let kk = cin * 9;
            kernels::gemm(cout, kk, hw, 1.0, x[1].data(), MatView::rm(kk), &cols, MatView::rm(hw), 1.0, &mut out, MatView::rm(hw));
            Ok((make(&[cout, h, w], out)?, vec![cols]))
        }
        Op::Bilinear { oh, ow } => {
            let (c, h, w) = x[0].chw("interpolate_bilinear")?;
            let out = kernels::bilinear_forward(x[0].data(), c, h, w, *oh, *ow);
            Ok((make(&[c, *oh, *ow], out)?, none()))
        }
        Op::Area { oh, ow } => {
            let (c, h, w) = x[0].chw("resize_area")?;
            let out = kernels::area_forward(x[0].data(), c, h, w, *oh, *ow);
            Ok((make(&[c, *oh, *ow], out)?, none()))
        }
        Op::Up2 => {
            let (c, h, w) = x[0].chw("upsample2")?;
            let out = kernels::upsample2_forward(x[0].data(), c, h, w);
            Ok((make(&[c, 2 * h, 2 * w], out)?, none()))
        }
        Op::LayerNorm { eps } => {
            let d = *x[0].shape().last().unwrap();
            if x[1].shape() != [d] || x[2].shape() != [d] {
                return Err(Error::shape("layer_norm", x[0].shape(), x[1].shape()));
            }
            let rows = x[0].numel() / d;
            let (gamma, beta) = (x[1].data(), x[2].data());
            let src = x[0].data();
            let mut out = vec![0.0; src.len()];
            let mut mean = vec![0.0; rows];
            let mut rstd = vec![0.0; rows];
            for r in 0..rows {
                let row = &src[r * d..(r + 1) * d];
                let mu = row.iter().map(|&v| v as f64).sum::<f64>() / d as f64;
                let var = row.iter().map(|&v| (v as f64 - mu).powi(2)).sum::<f64>() / d as f64;
                let rs = 1.0 / (var + *eps as f64).sqrt();
                mean[r] = mu as f32;
                rstd[r] = rs as f32;
                for j in 0..d {
                    out[r * d + j] = ((row[j] as f64 - mu) * rs) as f32 * gamma[j] + beta[j];
                }
            }
            Ok((make(x[0].shape(), out)?, vec![mean, rstd]))
        }
        Op::Gelu => Ok((x[0].map(kernels::gelu), none())),
        Op::Embedding { indices } => {
            let (v, d) = two_d(x[0], "embedding")?;
            let table = x[0].data();
            let mut out = Vec::with_capacity(indices.len() * d);
            for &i in indices.iter() {
                if i >= v {
                    return Err(Error::Index { index: i, size: v });
                }
                out.extend_from_slice(&table[i * d..(i + 1) * d]);
            }
            Ok((make(&[indices.len(), d], out)?, none()))
        }
        Op::Attention { heads, mask } => attention_forward(x[0], x[1], x[2], *heads, mask.as_deref()),
        Op::CrossEntropy { targets } => {
            let (n, v) = two_d(x[0], "cross_entropy")?;
            if targets.len() != n {
                return Err(Error::shape("cross_entropy", x[0].shape(), &[targets.len()]));
            }
            let logits = x[0].data();
            let mut probs = vec![0.0; n * v];
            let mut total = 0.0f64;
            for (r, &t) in targets.iter().enumerate() {
                if t >= v {
                    return Err(Error::Index { index: t, size: v });
                }
                let row = &logits[r * v..(r + 1) * v];
                let max = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
                let mut z = 0.0f64;
                for (j, &l) in row.iter().enumerate() {
                    let e = ((l - max) as f64).exp();
                    probs[r * v + j] = e as f32;
                    z += e;
                }
                probs[r * v..(r + 1) * v].iter_mut().for_each(|p| *p = (*p as f64 / z) as f32);
                total += z.ln() - (row[t] - max) as f64;
            }
            Ok((Tensor::scalar((total / n as f64) as f32), vec![probs]))
        }
        Op::Mse => {
            same_shape(x[0], x[1], "mse_loss")?;
            Ok((Tensor::scalar(x[0].mse(x[1])?), none()))
        }
        Op::Concat => {
            let rest = &x[0].shape()[1..];
            let mut lead = 0;
            for t in x {
                if &t.shape()[1..] != rest {
                    return Err(Error::shape("concat", x[0].shape(), t.shape()));
                }
                lead += t.shape()[0];
            }
            let mut shape = vec![lead];
            shape.extend_from_slice(rest);
            let data = x.iter().flat_map(|t| t.data().iter().copied()).collect();
            Ok((make(&shape, data)?, none()))
        }
        Op::Reshape { shape } => {
            let numel: usize = shape.iter().product();
            if numel != x[0].numel() {
                return Err(Error::shape("reshape", x[0].shape(), shape));
            }
            Ok((x[0].reshape(shape)?, none()))
        }
        Op::SliceRows { start, end } => {
            let n = x[0].shape()[0];
            if start >= end || *end > n {
                return Err(Error::Range {
                    what: "slice end",
                    value: *end as i64,
                    lo: *start as i64 + 1,
                    hi: n as i64,
                });
            }
            let inner = x[0].numel() / n;
            let mut shape = x[0].shape().to_vec();
            shape[0] = end - start;
            Ok((make(&shape, x[0].data()[start * inner..end * inner].to_vec())?, none()))
        }
        Op::Sum => Ok((Tensor::scalar(x[0].sum()), none())),
        Op::Mean => Ok((Tensor::scalar(x[0].sum() / x[0].numel() as f32), none())),
        Op::Clamp { lo, hi } => Ok((x[0].map(|v| v.clamp(*lo, *hi)), none())),
    }
}

fn attention_forward(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    heads: usize,
    mask: Option<&Vec<bool>>,
) -> Result<(Tensor, Vec<Vec<f32>>)> {
    let (nq, d) = two_d(q, "attention")?;
    let (nk, dk) = two_d(k, "attention")?;
    if dk != d || v.shape() != [nk, d] {
        return Err(Error::shape("attention", q.shape(), k.shape()));
    }
    if heads == 0 || d % heads != 0 {
        return Err(Error::Contract(format!("model width {d} not divisible by {heads} heads")));
    }
    if let Some(m) = mask {
        if m.len() != nq * nk {
            return Err(Error::shape("attention mask", &[nq, nk], &[m.len()]));
        }
        for r in 0..nq {
            if !m[r * nk..(r + 1) * nk].iter().any(|&b| b) {
                return Err(Error::DegenerateMask { row: r });
            }
        }
    }
    let dh = d / heads;
    let scale = 1.0 / (dh as f32).sqrt();
    let mut probs = vec![0.0f32; heads * nq * nk];
    let mut out = vec![0.0f32; nq * d];
    for h in 0..heads {
        let p = &mut probs[h * nq * nk..(h + 1) * nq * nk];
        // scores = q_h · k_hᵀ
        kernels::gemm(
            nq,
            dh,
            nk,
            scale,
            q.data(),
            MatView::rm(d).at(h * dh),
            k.data(),
            MatView { off: h * dh, rs: 1, cs: d },
            0.0,
            p,
            MatView::rm(nk),
        );
        for r in 0..nq {
            let row = &mut p[r * nk..(r + 1) * nk];
            if let Some(m) = mask {
                let mr = &m[r * nk..(r + 1) * nk];
                row.iter_mut().zip(mr).for_each(|(s, &ok)| {
                    if !ok {
                        *s = f32::NEG_INFINITY
                    }
                });
            }
            let max = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
            let mut z = 0.0f32;
            row.iter_mut().for_each(|s| {
                *s = (*s - max).exp();
                z += *s;
            });
            row.iter_mut().for_each(|s| *s /= z);
        }
        kernels::gemm(nq, nk, dh, 1.0, p, MatView::rm(nk), v.data(), MatView::rm(d).at(h * dh), 0.0, &mut out, MatView::rm(d).at(h * dh));
    }
    Ok((Tensor::new(&[nq, d], out)?, vec![probs]))
}

/// Vector-Jacobian products for each input (None where not needed).
fn vjp(op: &Op, x: &[&Tensor], _out: &Tensor, saved: &[Vec<f32>], g: &[f32], needs: &[bool]) -> Vec<Option<Vec<f32>>> {
    let want = |i: usize| needs.get(i).copied().unwrap_or(false);
    let mut grads = match op {
        Op::Leaf => vec![],
        Op::MatMul => {
            let (m, k) = (x[0].shape()[0], x[0].shape()[1]);
            let n = x[1].shape()[1];
            let da = want(0).then(|| {
                let mut da = vec![0.0; m * k];
                kernels::gemm(m, n, k, 1.0, g, MatView::rm(n), x[1].data(), MatView::rm_t(n), 0.0, &mut da, MatView::rm(k));
                da
            });
            let db = want(1).then(|| {
                let mut db = vec![0.0; k * n];
                kernels::gemm(k, m, n, 1.0, x[0].data(), MatView::rm_t(k), g, MatView::rm(n), 0.0, &mut db, MatView::rm(n));
                db
            });
            vec![da, db]
        }
        Op::Transpose => {
            let (m, n) = (x[0].shape()[0], x[0].shape()[1]);
            let mut d = vec![0.0; m * n];
            for i in 0..m {
                for j in 0..n {
                    d[i * n + j] = g[j * m + i];
                }
            }
            vec![Some(d)]
        }
        Op::Add => vec![want(0).then(|| g.to_vec()), want(1).then(|| g.to_vec())],
        Op::Sub => vec![want(0).then(|| g.to_vec()), want(1).then(|| g.iter().map(|v| -v).collect())],
        Op::Mul => vec![
            want(0).then(|| g.iter().zip(x[1].data()).map(|(a, b)| a * b).collect()),
            want(1).then(|| g.iter().zip(x[0].data()).map(|(a, b)| a * b).collect()),
        ],
        Op::Scale(s) => vec![Some(g.iter().map(|v| v * s).collect())],
        Op::AddRow => {
            let d = x[1].numel();
            let db = want(1).then(|| {
                let mut db = vec![0.0; d];
                g.chunks(d).for_each(|row| db.iter_mut().zip(row).for_each(|(a, b)| *a += b));
                db
            });
            vec![want(0).then(|| g.to_vec()), db]
        }
        Op::AddChannel => {
            let c = x[1].numel();
            let inner = x[0].numel() / c;
            let db = want(1).then(|| (0..c).map(|ch| g[ch * inner..(ch + 1) * inner].iter().sum()).collect());
            vec![want(0).then(|| g.to_vec()), db]
        }
        Op::Conv3x3 => {
            let (cin, h, w) = (x[0].shape()[0], x[0].shape()[1], x[0].shape()[2]);
            let cout = x[1].shape()[0];
            let hw = h * w;
            let kk = cin * 9;
            let cols = &saved[0];
            let dx = want(0).then(|| {
                let mut dcols = vec![0.0; kk * hw];
                kernels::gemm(kk, cout, hw, 1.0, x[1].data(), MatView::rm_t(kk), g, MatView::rm(hw), 0.0, &mut dcols, MatView::rm(hw));
                kernels::col2im3(&dcols, cin, h, w)
            });
            let dk = want(1).then(|| {
                let mut dk = vec![0.0; cout * kk];
                kernels::gemm(cout, hw, kk, 1.0, g, MatView::rm(hw), cols, MatView::rm_t(hw), 0.0, &mut dk, MatView::rm(kk));
                dk
            });
            let mut res = vec![dx, dk];
            if x.len() == 3 {
                res.push(want(2).then(|| (0..cout).map(|ch| g[ch * hw..(ch + 1) * hw].iter().sum()).collect()));
            }
            res
        }
        Op::Bilinear { oh, ow } => {
            let (c, h, w) = (x[0].shape()[0], x[0].shape()[1], x[0].shape()[2]);
            vec![Some(kernels::bilinear_backward(g, c, h, w, *oh, *ow))]
        }
        Op::Area { oh, ow } => {
            let (c, h, w) = (x[0].shape()[0], x[0].shape()[1], x[0].shape()[2]);
            vec![Some(kernels::area_backward(g, c, h, w, *oh, *ow))]
        }
        Op::Up2 => {
            let (c, h, w) = (x[0].shape()[0], x[0].shape()[1], x[0].shape()[2]);
            vec![Some(kernels::upsample2_backward(g, c, h, w))]
        }
        Op::LayerNorm { .. } => {
            let d = x[1].numel();
            let rows = x[0].numel() / d;
            let (mean, rstd) = (&saved[0], &saved[1]);
            let gamma = x[1].data();
            let src = x[0].data();
            let mut dx = vec![0.0; src.len()];
            let mut dgamma = vec![0.0; d];
            let mut dbeta = vec![0.0; d];
            let mut xhat = vec![0.0; d];
            let mut dxhat = vec![0.0; d];
            for r in 0..rows {
                let (mu, rs) = (mean[r], rstd[r]);
                let gr = &g[r * d..(r + 1) * d];
                let mut m1 = 0.0;
                let mut m2 = 0.0;
                for j in 0..d {
                    xhat[j] = (src[r * d + j] - mu) * rs;
                    dxhat[j] = gr[j] * gamma[j];
                    dgamma[j] += gr[j] * xhat[j];
                    dbeta[j] += gr[j];
                    m1 += dxhat[j];
                    m2 += dxhat[j] * xhat[j];
                }
                m1 /= d as f32;
                m2 /= d as f32;
                for j in 0..d {
                    dx[r * d + j] = rs * (dxhat[j] - m1 - xhat[j] * m2);
                }
            }
            vec![want(0).then_some(dx), want(1).then_some(dgamma), want(2).then_some(dbeta)]
        }
        Op::Gelu => vec![Some(g.iter().zip(x[0].data()).map(|(g, &v)| g * kernels::gelu_grad(v)).collect())],
        Op::Embedding { indices } => {
            let d = x[0].shape()[1];
            let mut dt = vec![0.0; x[0].numel()];
            for (r, &i) in indices.iter().enumerate() {
                dt[i * d..(i + 1) * d].iter_mut().zip(&g[r * d..(r + 1) * d]).for_each(|(a, b)| *a += b);
            }
            vec![Some(dt)]
        }
        Op::Attention { heads, .. } => attention_backward(x, &saved[0], g, *heads, needs),
        Op::CrossEntropy { targets } => {
            let (n, v) = (x[0].shape()[0], x[0].shape()[1]);
            let scale = g[0] / n as f32;
            let mut d = saved[0].clone();
            for (r, &t) in targets.iter().enumerate() {
                d[r * v + t] -= 1.0;
            }
            d.iter_mut().for_each(|v| *v *= scale);
            vec![Some(d)]
        }
        Op::Mse => {
            let n = x[0].numel() as f32;
            let diff: Vec<f32> = x[0].data().iter().zip(x[1].data()).map(|(a, b)| 2.0 * (a - b) / n * g[0]).collect();
            let neg = want(1).then(|| diff.iter().map(|v| -v).collect());
            vec![want(0).then_some(diff), neg]
        }
        Op::Concat => {
            let mut off = 0;
            x.iter()
                .enumerate()
                .map(|(i, t)| {
                    let n = t.numel();
                    let part = want(i).then(|| g[off..off + n].to_vec());
                    off += n;
                    part
                })
                .collect()
        }
        Op::Reshape { .. } => vec![Some(g.to_vec())],
        Op::SliceRows { start, .. } => {
            let inner = x[0].numel() / x[0].shape()[0];
            let mut d = vec![0.0; x[0].numel()];
            d[start * inner..start * inner + g.len()].copy_from_slice(g);
            vec![Some(d)]
        }
        Op::Sum => vec![Some(vec![g[0]; x[0].numel()])],
        Op::Mean => vec![Some(vec![g[0] / x[0].numel() as f32; x[0].numel()])],
        Op::Clamp { lo, hi } => vec![Some(
            g.iter()
                .zip(x[0].data())
                .map(|(g, &v)| if v >= *lo && v <= *hi { *g } else { 0.0 })
                .collect(),
        )],
    };
    grads.resize(x.len(), None);
    debug_assert!(
        grads.iter().flatten().all(|v| v.iter().all(|g| g.is_finite())),
        "non-finite gradient from {}",
        op.name()
    );
    grads
}

fn attention_backward(x: &[&Tensor], probs: &[f32], g: &[f32], heads: usize, needs: &[bool]) -> Vec<Option<Vec<f32>>> {
    let (q, k, v) = (x[0], x[1], x[2]);
    let (nq, d) = (q.shape()[0], q.shape()[1]);
    let nk = k.shape()[0];
    let dh = d / heads;
    let scale = 1.0 / (dh as f32).sqrt();
    let mut dq = vec![0.0; nq * d];
    let mut dk = vec![0.0; nk * d];
    let mut dv = vec![0.0; nk * d];
    let mut dp = vec![0.0; nq * nk];
    for h in 0..heads {
        let p = &probs[h * nq * nk..(h + 1) * nq * nk];
        // dP = dO_h · v_hᵀ
        kernels::gemm(nq, dh, nk, 1.0, g, MatView::rm(d).at(h * dh), v.data(), MatView { off: h * dh, rs: 1, cs: d }, 0.0, &mut dp, MatView::rm(nk));
        if needs[2] {
            // dV_h = Pᵀ · dO_h
            kernels::gemm(nk, nq, dh, 1.0, p, MatView::rm_t(nk), g, MatView::rm(d).at(h * dh), 0.0, &mut dv, MatView::rm(d).at(h * dh));
        }
        // dS = P ⊙ (dP − rowsum(dP ⊙ P))
        for r in 0..nq {
            let pr = &p[r * nk..(r + 1) * nk];
            let dr = &mut dp[r * nk..(r + 1) * nk];
            let dot: f32 = pr.iter().zip(dr.iter()).map(|(a, b)| a * b).sum();
            dr.iter_mut().zip(pr).for_each(|(d, p)| *d = p * (*d - dot));
        }
        if needs[0] {
            kernels::gemm(nq, nk, dh, scale, &dp, MatView::rm(nk), k.data(), MatView::rm(d).at(h * dh), 0.0, &mut dq, MatView::rm(d).at(h * dh));
        }
        if needs[1] {
            kernels::gemm(nk, nq, dh, scale, &dp, MatView::rm_t(nk), q.data(), MatView::rm(d).at(h * dh), 0.0, &mut dk, MatView::rm(d).at(h * dh));
        }
    }
    vec![needs[0].then_some(dq), needs[1].then_some(dk), needs[2].then_some(dv)]
}
