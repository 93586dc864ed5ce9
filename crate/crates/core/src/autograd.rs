//! Tape-based reverse-mode differentiation.
//!
//! A [`Tape`] records every operation of a forward pass as a node holding its
//! cached value. Node indices grow in creation order, so the arena is already
//! topologically sorted and the backward sweep is a single reverse scan.
//!
//! Differentiable inputs are created with [`Tape::var`]; constants with
//! [`Tape::leaf`]. Interior nodes can be flagged with [`Tape::probe`] so that
//! their gradient survives the sweep. All other interior gradients are freed
//! as soon as they have been pushed to the node's parents.

use std::sync::atomic::{AtomicU32, Ordering};

use crate::error::{Error, Result};
use crate::tensor::{self, matmul, matmul_acc, matmul_nt, matmul_tn_acc, Tensor};

static NEXT_TAPE: AtomicU32 = AtomicU32::new(1);

/// Handle to a node on a specific tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId {
    tape: u32,
    index: u32,
}

impl NodeId {
    pub fn index(self) -> usize {
        self.index as usize
    }
}

/// Closed set of operations the tape knows how to differentiate.
#[derive(Clone, Debug)]
pub enum Op {
    Leaf,
    Var,
    /// `a · b`
    MatMul(usize, usize),
    /// `a · bᵀ`; weights stay in `[out × in]` orientation and multiply row batches.
    MatMulNT(usize, usize),
    Add(usize, usize),
    /// Adds a rank-1 bias to every row.
    AddBias(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    Tanh(usize),
    Sigmoid(usize),
    /// modReLU with a learned bias node.
    ModRelu(usize, usize),
    /// Row-wise softmax.
    Softmax(usize),
    /// Concatenation along axis 0 (rows) or 1 (columns).
    Concat { parts: Vec<usize>, axis: usize },
    SliceCols { src: usize, start: usize },
    Sum(usize),
    /// `out[b,k] = vᵀ tanh(ws[b] + keys[k][b])`, the additive alignment score.
    AdditiveScores { ws: usize, keys: Vec<usize>, v: usize },
    /// `out[b] = Σ_k w[b,k] · items[k][b]`.
    WeightedSum { weights: usize, items: Vec<usize> },
    /// `out[b] = picks[b][b]`: row `b` taken from its own source node.
    RowGather { picks: Vec<usize> },
    /// Weighted softmax cross-entropy against class indices.
    CrossEntropy { logits: usize, targets: Vec<usize>, weights: Vec<f64> },
}

impl Op {
    fn parents(&self) -> Vec<usize> {
        match self {
            Op::Leaf | Op::Var => vec![],
            Op::MatMul(a, b)
            | Op::MatMulNT(a, b)
            | Op::Add(a, b)
            | Op::AddBias(a, b)
            | Op::Mul(a, b)
            | Op::ModRelu(a, b) => vec![*a, *b],
            Op::Scale(a, _) | Op::Tanh(a) | Op::Sigmoid(a) | Op::Softmax(a) | Op::Sum(a) => vec![*a],
            Op::SliceCols { src, .. } => vec![*src],
            Op::Concat { parts, .. } => parts.clone(),
            Op::AdditiveScores { ws, keys, v } => {
                let mut p = vec![*ws, *v];
                p.extend(keys);
                p
            }
            Op::WeightedSum { weights, items } => {
                let mut p = vec![*weights];
                p.extend(items);
                p
            }
            Op::RowGather { picks } => picks.clone(),
            Op::CrossEntropy { logits, .. } => vec![*logits],
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Var => "var",
            Op::MatMul(..) => "matmul",
            Op::MatMulNT(..) => "matmul_nt",
            Op::Add(..) => "add",
            Op::AddBias(..) => "add_bias",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Tanh(..) => "tanh",
            Op::Sigmoid(..) => "sigmoid",
            Op::ModRelu(..) => "modrelu",
            Op::Softmax(..) => "softmax",
            Op::Concat { .. } => "concat",
            Op::SliceCols { .. } => "slice_cols",
            Op::Sum(..) => "sum",
            Op::AdditiveScores { .. } => "additive_scores",
            Op::WeightedSum { .. } => "weighted_sum",
            Op::RowGather { .. } => "row_gather",
            Op::CrossEntropy { .. } => "cross_entropy",
        }
    }
}

struct Node {
    op: Op,
    value: Tensor,
    /// Auxiliary forward cache (tanh activations, softmax probabilities).
    cache: Vec<Tensor>,
    probed: bool,
}

pub struct Tape {
    id: u32,
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
    swept: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            grads: Vec::new(),
            swept: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn idx(&self, id: NodeId) -> Result<usize> {
        if id.tape != self.id {
            return Err(Error::Usage(format!(
                "node from tape {} used on tape {}",
                id.tape, self.id
            )));
        }
        if id.index() >= self.nodes.len() {
            return Err(Error::Usage(format!("node {} does not exist", id.index)));
        }
        Ok(id.index())
    }

    fn idxs(&self, ids: &[NodeId]) -> Result<Vec<usize>> {
        ids.iter().map(|&i| self.idx(i)).collect()
    }

    fn push(&mut self, op: Op, value: Tensor, cache: Vec<Tensor>) -> NodeId {
        let index = self.nodes.len() as u32;
        self.nodes.push(Node {
            op,
            value,
            cache,
            probed: false,
        });
        NodeId { tape: self.id, index }
    }

    /// Appends a node after checking that its parents live on this tape.
    pub fn record(&mut self, op: Op, parents: &[NodeId], value: Tensor) -> Result<NodeId> {
        self.idxs(parents)?;
        Ok(self.push(op, value, Vec::new()))
    }

    /// Constant input; no gradient is reported for it.
    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Leaf, value, Vec::new())
    }

    /// Differentiable input (parameters, Jacobian inputs).
    pub fn var(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Var, value, Vec::new())
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.index()].value
    }

    pub fn op(&self, id: NodeId) -> &Op {
        &self.nodes[id.index()].op
    }

    /// Flags a node so its gradient is kept by the next backward sweep.
    pub fn probe(&mut self, id: NodeId) -> Result<()> {
        let i = self.idx(id)?;
        self.nodes[i].probed = true;
        Ok(())
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let v = matmul(&self.nodes[ia].value, &self.nodes[ib].value)?;
        Ok(self.push(Op::MatMul(ia, ib), v, Vec::new()))
    }

    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let v = matmul_nt(&self.nodes[ia].value, &self.nodes[ib].value)?;
        Ok(self.push(Op::MatMulNT(ia, ib), v, Vec::new()))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let v = self.nodes[ia].value.add(&self.nodes[ib].value)?;
        Ok(self.push(Op::Add(ia, ib), v, Vec::new()))
    }

    pub fn add_bias(&mut self, a: NodeId, bias: NodeId) -> Result<NodeId> {
        let (ia, ib) = (self.idx(a)?, self.idx(bias)?);
        let v = self.nodes[ia].value.add_row_bias(&self.nodes[ib].value)?;
        Ok(self.push(Op::AddBias(ia, ib), v, Vec::new()))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let v = self.nodes[ia].value.hadamard(&self.nodes[ib].value)?;
        Ok(self.push(Op::Mul(ia, ib), v, Vec::new()))
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> Result<NodeId> {
        let ia = self.idx(a)?;
        let v = self.nodes[ia].value.scale(factor);
        Ok(self.push(Op::Scale(ia, factor), v, Vec::new()))
    }

    pub fn tanh(&mut self, a: NodeId) -> Result<NodeId> {
        let ia = self.idx(a)?;
        let v = self.nodes[ia].value.map(f64::tanh);
        Ok(self.push(Op::Tanh(ia), v, Vec::new()))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> Result<NodeId> {
        let ia = self.idx(a)?;
        let v = self.nodes[ia].value.map(tensor::sigmoid);
        Ok(self.push(Op::Sigmoid(ia), v, Vec::new()))
    }

    pub fn modrelu(&mut self, a: NodeId, bias: NodeId) -> Result<NodeId> {
        let (ia, ib) = (self.idx(a)?, self.idx(bias)?);
        let kind = tensor::Nonlinearity::ModRelu(self.nodes[ib].value.clone());
        let v = tensor::nonlinearity(&kind, &self.nodes[ia].value)?;
        Ok(self.push(Op::ModRelu(ia, ib), v, Vec::new()))
    }

    pub fn softmax(&mut self, a: NodeId) -> Result<NodeId> {
        let ia = self.idx(a)?;
        let v = tensor::softmax_rows(&self.nodes[ia].value)?;
        Ok(self.push(Op::Softmax(ia), v, Vec::new()))
    }

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        let ia = self.idx(a)?;
        let v = Tensor::scalar(self.nodes[ia].value.sum());
        Ok(self.push(Op::Sum(ia), v, Vec::new()))
    }

    /// Concatenates rank-2 nodes along `axis` (0 stacks rows, 1 joins columns).
    pub fn concat(&mut self, parts: &[NodeId], axis: usize) -> Result<NodeId> {
        let ps = self.idxs(parts)?;
        let first = ps
            .first()
            .ok_or_else(|| Error::Usage("concat of zero parts".into()))?;
        let (r0, c0) = self.nodes[*first].value.dims2("concat")?;
        let mut shapes = Vec::with_capacity(ps.len());
        for &p in &ps {
            let (r, c) = self.nodes[p].value.dims2("concat")?;
            let ok = match axis {
                0 => c == c0,
                1 => r == r0,
                _ => return Err(Error::Usage(format!("concat axis {axis} out of range"))),
            };
            if !ok {
                return Err(Error::dim("concat", &[r0, c0], &[r, c]));
            }
            shapes.push((r, c));
        }
        let value = if axis == 0 {
            let rows: usize = shapes.iter().map(|s| s.0).sum();
            let mut data = Vec::with_capacity(rows * c0);
            for &p in &ps {
                data.extend_from_slice(self.nodes[p].value.data());
            }
            Tensor::from_vec(&[rows, c0], data)?
        } else {
            let cols: usize = shapes.iter().map(|s| s.1).sum();
            let mut data = Vec::with_capacity(r0 * cols);
            for r in 0..r0 {
                for &p in &ps {
                    data.extend_from_slice(self.nodes[p].value.row(r));
                }
            }
            Tensor::from_vec(&[r0, cols], data)?
        };
        Ok(self.push(Op::Concat { parts: ps, axis }, value, Vec::new()))
    }

    pub fn slice_cols(&mut self, src: NodeId, start: usize, end: usize) -> Result<NodeId> {
        let is = self.idx(src)?;
        let (r, c) = self.nodes[is].value.dims2("slice_cols")?;
        if start >= end || end > c {
            return Err(Error::dim("slice_cols", &[r, c], &[start, end]));
        }
        let mut data = Vec::with_capacity(r * (end - start));
        for i in 0..r {
            data.extend_from_slice(&self.nodes[is].value.row(i)[start..end]);
        }
        let v = Tensor::from_vec(&[r, end - start], data)?;
        Ok(self.push(Op::SliceCols { src: is, start }, v, Vec::new()))
    }

    /// Additive alignment scores of every key against the projected query.
    ///
    /// `ws` is `[B×n]` (already `W_a s`), each key is `[B×n]` (already
    /// `U_a h`), `v` holds `n` entries. Produces `[B×K]`.
    pub fn additive_scores(&mut self, ws: NodeId, keys: &[NodeId], v: NodeId) -> Result<NodeId> {
        let (iw, iv) = (self.idx(ws)?, self.idx(v)?);
        let ks = self.idxs(keys)?;
        if ks.is_empty() {
            return Err(Error::Usage("additive_scores needs at least one key".into()));
        }
        let wsv = &self.nodes[iw].value;
        let (b, n) = wsv.dims2("additive_scores")?;
        let vv = self.nodes[iv].value.data();
        if vv.len() != n {
            return Err(Error::dim("additive_scores", wsv.shape(), self.nodes[iv].value.shape()));
        }
        let k = ks.len();
        let mut out = Tensor::zeros(&[b, k]);
        let mut cache = Vec::with_capacity(k);
        for (j, &key) in ks.iter().enumerate() {
            let kv = &self.nodes[key].value;
            if kv.shape() != wsv.shape() {
                return Err(Error::dim("additive_scores", wsv.shape(), kv.shape()));
            }
            let mut th = wsv.clone();
            for (t, x) in th.data_mut().iter_mut().zip(kv.data()) {
                *t = (*t + x).tanh();
            }
            for r in 0..b {
                out.set2(r, j, tensor::dot(th.row(r), vv));
            }
            cache.push(th);
        }
        let op = Op::AdditiveScores { ws: iw, keys: ks, v: iv };
        Ok(self.push(op, out, cache))
    }

    pub fn weighted_sum(&mut self, weights: NodeId, items: &[NodeId]) -> Result<NodeId> {
        let iw = self.idx(weights)?;
        let is = self.idxs(items)?;
        let w = &self.nodes[iw].value;
        let (b, k) = w.dims2("weighted_sum")?;
        if k != is.len() || is.is_empty() {
            return Err(Error::dim("weighted_sum", w.shape(), &[is.len()]));
        }
        let shape = self.nodes[is[0]].value.shape().to_vec();
        if shape.len() != 2 || shape[0] != b {
            return Err(Error::dim("weighted_sum", w.shape(), &shape));
        }
        let mut out = Tensor::zeros(&shape);
        for (j, &item) in is.iter().enumerate() {
            let iv = &self.nodes[item].value;
            if iv.shape() != shape.as_slice() {
                return Err(Error::dim("weighted_sum", &shape, iv.shape()));
            }
            for r in 0..b {
                tensor::axpy(out.row_mut(r), w.get2(r, j), iv.row(r));
            }
        }
        let op = Op::WeightedSum { weights: iw, items: is };
        Ok(self.push(op, out, Vec::new()))
    }

    /// Builds a `[B×n]` node whose row `b` is row `b` of `picks[b]`.
    pub fn row_gather(&mut self, picks: &[NodeId]) -> Result<NodeId> {
        let ps = self.idxs(picks)?;
        let first = ps
            .first()
            .ok_or_else(|| Error::Usage("row_gather of zero rows".into()))?;
        let shape = self.nodes[*first].value.shape().to_vec();
        if shape.len() != 2 || shape[0] != ps.len() {
            return Err(Error::dim("row_gather", &shape, &[ps.len()]));
        }
        let mut out = Tensor::zeros(&shape);
        for (r, &p) in ps.iter().enumerate() {
            let pv = &self.nodes[p].value;
            if pv.shape() != shape.as_slice() {
                return Err(Error::dim("row_gather", &shape, pv.shape()));
            }
            out.row_mut(r).copy_from_slice(pv.row(r));
        }
        Ok(self.push(Op::RowGather { picks: ps }, out, Vec::new()))
    }

    /// `Σ_r weights[r] · (−log softmax(logits[r])[targets[r]])`, a scalar.
    pub fn cross_entropy(&mut self, logits: NodeId, targets: &[usize], weights: &[f64]) -> Result<NodeId> {
        let il = self.idx(logits)?;
        let lv = &self.nodes[il].value;
        let (rows, classes) = lv.dims2("cross_entropy")?;
        if targets.len() != rows || weights.len() != rows {
            return Err(Error::dim("cross_entropy", lv.shape(), &[targets.len(), weights.len()]));
        }
        if let Some(&t) = targets.iter().find(|&&t| t >= classes) {
            return Err(Error::Domain(format!("target class {t} out of range {classes}")));
        }
        let probs = tensor::softmax_rows(lv)?;
        let mut loss = 0.0;
        for r in 0..rows {
            if weights[r] != 0.0 {
                loss -= weights[r] * probs.get2(r, targets[r]).max(f64::MIN_POSITIVE).ln();
            }
        }
        let op = Op::CrossEntropy {
            logits: il,
            targets: targets.to_vec(),
            weights: weights.to_vec(),
        };
        Ok(self.push(op, Tensor::scalar(loss), vec![probs]))
    }

    /// Reverse sweep from a scalar loss; keeps gradients of vars and probes.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        let il = self.idx(loss)?;
        if !self.nodes[il].value.is_scalar() {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[il].value.shape()
            )));
        }
        self.backward_with_seed(loss, Tensor::filled(self.nodes[il].value.shape(), 1.0))
    }

    /// Reverse sweep seeded with an arbitrary output cotangent.
    pub fn backward_with_seed(&mut self, out: NodeId, seed: Tensor) -> Result<()> {
        let io = self.idx(out)?;
        let keep: Vec<bool> = self
            .nodes
            .iter()
            .map(|n| n.probed || matches!(n.op, Op::Var))
            .collect();
        self.grads = self.sweep(io, seed, &keep)?;
        self.swept = true;
        Ok(())
    }

    /// Gradient of the last backward sweep at a var or probed node.
    pub fn grad(&self, id: NodeId) -> Result<Tensor> {
        let i = self.idx(id)?;
        let node = &self.nodes[i];
        if !(node.probed || matches!(node.op, Op::Var)) {
            return Err(Error::Usage(format!("node {i} was not flagged as a probe")));
        }
        if !self.swept {
            return Err(Error::Usage("backward has not run".into()));
        }
        Ok(self
            .grads
            .get(i)
            .and_then(Clone::clone)
            .unwrap_or_else(|| Tensor::zeros(node.value.shape())))
    }

    /// Same as [`Tape::grad`] but restricted to probed nodes.
    pub fn probe_gradient(&self, id: NodeId) -> Result<Tensor> {
        let i = self.idx(id)?;
        if !self.nodes[i].probed {
            return Err(Error::Usage(format!("node {i} was not flagged as a probe")));
        }
        self.grad(id)
    }

    /// Full Jacobian `d out / d inp` as a `[len(out) × len(inp)]` matrix.
    ///
    /// Runs one sweep per output coordinate. If `inp` does not influence
    /// `out` the result is the zero matrix.
    pub fn jacobian(&self, out: NodeId, inp: NodeId) -> Result<Tensor> {
        let (io, ii) = (self.idx(out)?, self.idx(inp)?);
        let n_out = self.nodes[io].value.len();
        let n_in = self.nodes[ii].value.len();
        let mut jac = Tensor::zeros(&[n_out, n_in]);
        if ii > io {
            return Ok(jac);
        }
        let mut keep = vec![false; self.nodes.len()];
        keep[ii] = true;
        let shape = self.nodes[io].value.shape().to_vec();
        for r in 0..n_out {
            let mut seed = Tensor::zeros(&shape);
            seed.data_mut()[r] = 1.0;
            let grads = self.sweep(io, seed, &keep)?;
            if let Some(Some(g)) = grads.get(ii) {
                jac.row_mut(r).copy_from_slice(g.data());
            }
        }
        Ok(jac)
    }

    /// Nodes whose value depends on some `keep` node.
    fn needed(&self, upto: usize, keep: &[bool]) -> Vec<bool> {
        let mut need = vec![false; upto + 1];
        for i in 0..=upto {
            need[i] = keep[i] || self.nodes[i].op.parents().iter().any(|&p| need[p]);
        }
        need
    }

    fn sweep(&self, root: usize, seed: Tensor, keep: &[bool]) -> Result<Vec<Option<Tensor>>> {
        if seed.shape() != self.nodes[root].value.shape() {
            return Err(Error::dim("backward seed", self.nodes[root].value.shape(), seed.shape()));
        }
        let need = self.needed(root, keep);
        let mut grads: Vec<Option<Tensor>> = vec![None; root + 1];
        if need[root] {
            grads[root] = Some(seed);
        }
        for i in (0..=root).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.local_backward(i, &g, &need, &mut grads)?;
            if keep[i] {
                grads[i] = Some(g);
            }
        }
        Ok(grads)
    }

    fn local_backward(&self, i: usize, g: &Tensor, need: &[bool], grads: &mut [Option<Tensor>]) -> Result<()> {
        let node = &self.nodes[i];
        let val = |p: usize| &self.nodes[p].value;
        let acc = |grads: &mut [Option<Tensor>], p: usize, t: Tensor| -> Result<()> {
            match &mut grads[p] {
                Some(existing) => existing.add_assign(&t),
                slot => {
                    *slot = Some(t);
                    Ok(())
                }
            }
        };
        match &node.op {
            Op::Leaf | Op::Var => {}
            Op::MatMul(a, b) => {
                if need[*a] {
                    acc(grads, *a, matmul_nt(g, val(*b))?)?;
                }
                if need[*b] {
                    let mut gb = Tensor::zeros(val(*b).shape());
                    matmul_tn_acc(&mut gb, val(*a), g)?;
                    acc(grads, *b, gb)?;
                }
            }
            Op::MatMulNT(a, b) => {
                if need[*a] {
                    let mut ga = Tensor::zeros(val(*a).shape());
                    matmul_acc(&mut ga, g, val(*b))?;
                    acc(grads, *a, ga)?;
                }
                if need[*b] {
                    let mut gb = Tensor::zeros(val(*b).shape());
                    matmul_tn_acc(&mut gb, g, val(*a))?;
                    acc(grads, *b, gb)?;
                }
            }
            Op::Add(a, b) => {
                for p in [*a, *b] {
                    if need[p] {
                        acc(grads, p, g.clone())?;
                    }
                }
            }
            Op::AddBias(a, b) => {
                if need[*a] {
                    acc(grads, *a, g.clone())?;
                }
                if need[*b] {
                    let c = g.last_dim();
                    let mut gb = vec![0.0; c];
                    for row in g.data().chunks_exact(c) {
                        for (s, x) in gb.iter_mut().zip(row) {
                            *s += x;
                        }
                    }
                    acc(grads, *b, Tensor::from_vec(val(*b).shape(), gb)?)?;
                }
            }
            Op::Mul(a, b) => {
                if need[*a] {
                    acc(grads, *a, g.hadamard(val(*b))?)?;
                }
                if need[*b] {
                    acc(grads, *b, g.hadamard(val(*a))?)?;
                }
            }
            Op::Scale(a, f) => {
                if need[*a] {
                    acc(grads, *a, g.scale(*f))?;
                }
            }
            Op::Tanh(a) => {
                if need[*a] {
                    let mut ga = g.clone();
                    for (x, y) in ga.data_mut().iter_mut().zip(node.value.data()) {
                        *x *= 1.0 - y * y;
                    }
                    acc(grads, *a, ga)?;
                }
            }
            Op::Sigmoid(a) => {
                if need[*a] {
                    let mut ga = g.clone();
                    for (x, y) in ga.data_mut().iter_mut().zip(node.value.data()) {
                        *x *= y * (1.0 - y);
                    }
                    acc(grads, *a, ga)?;
                }
            }
            Op::ModRelu(a, b) => {
                let z = val(*a);
                let bias = val(*b).data();
                let c = z.last_dim();
                let mut ga = Tensor::zeros(z.shape());
                let mut gb = vec![0.0; c];
                for (k, (&zk, &gk)) in z.data().iter().zip(g.data()).enumerate() {
                    let j = k % c;
                    if zk != 0.0 && zk.abs() + bias[j] > 0.0 {
                        ga.data_mut()[k] = gk;
                        gb[j] += gk * zk.signum();
                    }
                }
                if need[*a] {
                    acc(grads, *a, ga)?;
                }
                if need[*b] {
                    acc(grads, *b, Tensor::from_vec(val(*b).shape(), gb)?)?;
                }
            }
            Op::Softmax(a) => {
                if need[*a] {
                    let y = &node.value;
                    let c = y.last_dim();
                    let mut ga = Tensor::zeros(y.shape());
                    for r in 0..y.rows() {
                        let (yr, gr) = (y.row(r), &g.data()[r * c..(r + 1) * c]);
                        let inner = tensor::dot(yr, gr);
                        for (o, (yy, gg)) in ga.row_mut(r).iter_mut().zip(yr.iter().zip(gr)) {
                            *o = yy * (gg - inner);
                        }
                    }
                    acc(grads, *a, ga)?;
                }
            }
            Op::Concat { parts, axis } => {
                let mut offset = 0;
                for &p in parts {
                    let (r, c) = val(p).dims2("concat")?;
                    if need[p] {
                        let gp = if *axis == 0 {
                            let cols = g.last_dim();
                            Tensor::from_vec(&[r, c], g.data()[offset * cols..(offset + r) * cols].to_vec())?
                        } else {
                            let mut data = Vec::with_capacity(r * c);
                            for row in 0..r {
                                data.extend_from_slice(&g.row(row)[offset..offset + c]);
                            }
                            Tensor::from_vec(&[r, c], data)?
                        };
                        acc(grads, p, gp)?;
                    }
                    offset += if *axis == 0 { r } else { c };
                }
            }
            Op::SliceCols { src, start } => {
                if need[*src] {
                    let mut gs = Tensor::zeros(val(*src).shape());
                    let w = g.last_dim();
                    for r in 0..g.rows() {
                        gs.row_mut(r)[*start..*start + w].copy_from_slice(g.row(r));
                    }
                    acc(grads, *src, gs)?;
                }
            }
            Op::Sum(a) => {
                if need[*a] {
                    acc(grads, *a, Tensor::filled(val(*a).shape(), g.item()))?;
                }
            }
            Op::AdditiveScores { ws, keys, v } => {
                let vv = val(*v).data();
                let (b, n) = val(*ws).dims2("additive_scores")?;
                let mut gws = Tensor::zeros(&[b, n]);
                let mut gv = vec![0.0; n];
                for (j, &key) in keys.iter().enumerate() {
                    let th = &node.cache[j];
                    let mut gk = Tensor::zeros(&[b, n]);
                    for r in 0..b {
                        let gs = g.get2(r, j);
                        if gs == 0.0 {
                            continue;
                        }
                        let tr = th.row(r);
                        tensor::axpy(&mut gv, gs, tr);
                        for ((o, t), vj) in gk.row_mut(r).iter_mut().zip(tr).zip(vv) {
                            *o = gs * vj * (1.0 - t * t);
                        }
                    }
                    if need[*ws] {
                        gws.add_assign(&gk)?;
                    }
                    if need[key] {
                        acc(grads, key, gk)?;
                    }
                }
                if need[*ws] {
                    acc(grads, *ws, gws)?;
                }
                if need[*v] {
                    acc(grads, *v, Tensor::from_vec(val(*v).shape(), gv)?)?;
                }
            }
            Op::WeightedSum { weights, items } => {
                let w = val(*weights);
                let (b, k) = w.dims2("weighted_sum")?;
                let mut gw = Tensor::zeros(&[b, k]);
                for (j, &item) in items.iter().enumerate() {
                    let iv = val(item);
                    let mut gi = Tensor::zeros(iv.shape());
                    for r in 0..b {
                        gw.set2(r, j, tensor::dot(g.row(r), iv.row(r)));
                        tensor::axpy(gi.row_mut(r), w.get2(r, j), g.row(r));
                    }
                    if need[item] {
                        acc(grads, item, gi)?;
                    }
                }
                if need[*weights] {
                    acc(grads, *weights, gw)?;
                }
            }
            Op::RowGather { picks } => {
                for (r, &p) in picks.iter().enumerate() {
                    if !need[p] {
                        continue;
                    }
                    let slot = grads[p].get_or_insert_with(|| Tensor::zeros(val(p).shape()));
                    tensor::axpy(slot.row_mut(r), 1.0, g.row(r));
                }
            }
            Op::CrossEntropy { logits, targets, weights } => {
                if need[*logits] {
                    let mut gl = node.cache[0].clone();
                    let scale = g.item();
                    for (r, (&t, &w)) in targets.iter().zip(weights).enumerate() {
                        let row = gl.row_mut(r);
                        row[t] -= 1.0;
                        let f = scale * w;
                        row.iter_mut().for_each(|x| *x *= f);
                    }
                    acc(grads, *logits, gl)?;
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vec1(v: &[f64]) -> Tensor {
        Tensor::from_vec(&[1, v.len()], v.to_vec()).unwrap()
    }

    #[test]
    fn sum_of_linear_map() {
        let mut tape = Tape::new();
        let w = tape.leaf(Tensor::eye(2));
        let x = tape.var(vec1(&[1.0, 1.0]));
        let y = tape.matmul_nt(x, w).unwrap();
        let loss = tape.sum(y).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[1.0, 1.0]);
    }

    #[test]
    fn tanh_at_zero() {
        let mut tape = Tape::new();
        let u = tape.var(Tensor::scalar(0.0));
        let y = tape.tanh(u).unwrap();
        tape.backward(y).unwrap();
        assert_eq!(tape.grad(u).unwrap().item(), 1.0);
    }

    #[test]
    fn jacobian_examples() {
        let mut tape = Tape::new();
        let x = tape.var(Tensor::scalar(3.0));
        let y = tape.scale(x, 2.0).unwrap();
        assert_eq!(tape.jacobian(y, x).unwrap().data(), &[2.0]);

        let z = tape.var(vec1(&[0.0, 0.0]));
        let s = tape.softmax(z).unwrap();
        let j = tape.jacobian(s, z).unwrap();
        assert_eq!(j.data(), &[0.25, -0.25, -0.25, 0.25]);

        let other = tape.var(Tensor::scalar(1.0));
        assert_eq!(tape.jacobian(y, other).unwrap().data(), &[0.0]);
    }

    #[test]
    fn fan_out_accumulates() {
        // y = tanh(x) + 3x  ⇒  dy/dx = 1 - tanh²(x) + 3
        let mut tape = Tape::new();
        let x = tape.var(Tensor::scalar(0.4));
        let f = tape.tanh(x).unwrap();
        let g = tape.scale(x, 3.0).unwrap();
        let y = tape.add(f, g).unwrap();
        tape.backward(y).unwrap();
        let want = 1.0 - 0.4f64.tanh().powi(2) + 3.0;
        assert!((tape.grad(x).unwrap().item() - want).abs() < 1e-15);
    }

    #[test]
    fn errors() {
        let mut a = Tape::new();
        let mut b = Tape::new();
        let xa = a.var(Tensor::scalar(1.0));
        assert!(matches!(b.tanh(xa), Err(Error::Usage(_))));
        let v = a.var(vec1(&[1.0, 2.0]));
        let t = a.tanh(v).unwrap();
        assert!(matches!(a.backward(t), Err(Error::Usage(_))));
        let loss = a.sum(t).unwrap();
        a.backward(loss).unwrap();
        assert!(matches!(a.probe_gradient(t), Err(Error::Usage(_))));
    }

    #[test]
    fn probes_survive_and_repeat_bitwise() {
        let mut tape = Tape::new();
        let x = tape.var(vec1(&[0.3, -0.7]));
        let h = tape.tanh(x).unwrap();
        tape.probe(h).unwrap();
        let m = tape.mul(h, h).unwrap();
        let loss = tape.sum(m).unwrap();
        tape.backward(loss).unwrap();
        let first = tape.probe_gradient(h).unwrap();
        let hv = tape.value(h).clone();
        assert_eq!(first, hv.scale(2.0));
        tape.backward(loss).unwrap();
        assert_eq!(tape.probe_gradient(h).unwrap(), first);
    }
}
