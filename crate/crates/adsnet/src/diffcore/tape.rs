//! Define-by-run tape over tensor-level primitives.
//!
//! Each op computes its output eagerly and records one node; `backward`
//! replays the node list in reverse (the recording order is topological by
//! construction) and accumulates gradients into reachable parameters.
//! Gradients of subtrees that contain no parameter are never materialized.
//!
//! Conventions:
//! - batch matrices are (B x D); biases are (1 x D) rows; scalars are (1 x 1);
//! - relu's derivative at exactly 0 is 0;
//! - bce clamps probabilities to [1e-12, 1 - 1e-12] before the logs, and its
//!   derivative is evaluated at the clamped value (the clamp is a numerical
//!   guard, not a saturation).

use super::params::{ParamArena, ParamId};
use super::tensor::{matmul_nn, matmul_nt, matmul_tn, Tensor};

/// Probability clamp for bce: log(p) is undefined at 0 and 1.
pub const BCE_CLAMP: f64 = 1e-12;

#[derive(Debug, thiserror::Error)]
pub enum DiffError {
    #[error("{op}: incompatible shapes {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("{op}: index {index} out of range (limit {limit})")]
    Index { op: &'static str, index: usize, limit: usize },
    #[error("backward: loss must be a 1x1 scalar, got {rows}x{cols}")]
    NonScalarLoss { rows: usize, cols: usize },
    #[error("non-finite value encountered in {context}")]
    NonFinite { context: String },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Debug)]
enum Op {
    Constant,
    Param(ParamId),
    /// Per-batch-row embedding lookup; gradient scatters into table rows.
    Lookup { table: ParamId, ids: Vec<usize> },
    /// Arbitrary (row, col) entries of a parameter as a 1 x N row.
    Gather { table: ParamId, at: Vec<(usize, usize)> },
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    /// (B x D) + (1 x D), broadcast over rows.
    AddRow(NodeId, NodeId),
    Mul(NodeId, NodeId),
    /// (B x D) * (1 x D), broadcast over rows.
    MulRow(NodeId, NodeId),
    /// (B x D) * (B x 1), broadcast over columns.
    MulCol(NodeId, NodeId),
    Scale(NodeId, f64),
    Relu(NodeId),
    Sigmoid(NodeId),
    Exp(NodeId),
    Recip(NodeId),
    /// Row-wise softmax.
    Softmax(NodeId),
    /// Column-axis concatenation of same-height matrices.
    Concat(Vec<NodeId>),
    SliceCol(NodeId, usize),
    SumCols(NodeId),
    /// Mean over all entries -> 1 x 1.
    Mean(NodeId),
    /// Elementwise binary cross-entropy of predictions against constant
    /// targets (targets get no gradient).
    Bce { pred: NodeId, target: NodeId },
    /// Mean squared error over all entries -> 1 x 1.
    Mse(NodeId, NodeId),
    /// Identity value, blocks gradient flow.
    Detach(#[allow(dead_code)] NodeId),
}

struct Node {
    op: Op,
    value: Tensor,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn shape_err(op: &'static str, detail: String) -> DiffError {
    DiffError::Shape { op, detail }
}

impl Graph {
    pub fn new() -> Graph {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Value of a 1x1 node.
    pub fn scalar(&self, id: NodeId) -> f64 {
        self.value(id).item()
    }

    fn push(&mut self, op: Op, value: Tensor, needs_grad: bool) -> NodeId {
        self.nodes.push(Node { op, value, needs_grad });
        NodeId(self.nodes.len() - 1)
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    // ----- leaves -----

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Constant, value, false)
    }

    /// A dense parameter enters the graph by value; backward adds into its
    /// arena gradient.
    pub fn param(&mut self, arena: &ParamArena, id: ParamId) -> NodeId {
        let value = arena.get(id).value.clone();
        self.push(Op::Param(id), value, true)
    }

    /// Batched embedding lookup: row b of the output is `table[ids[b]]`.
    pub fn lookup(
        &mut self,
        arena: &ParamArena,
        table: ParamId,
        ids: &[usize],
    ) -> Result<NodeId, DiffError> {
        let t = &arena.get(table).value;
        let mut out = Tensor::zeros(ids.len(), t.cols());
        for (b, &id) in ids.iter().enumerate() {
            if id >= t.rows() {
                return Err(DiffError::Index { op: "lookup", index: id, limit: t.rows() });
            }
            out.row_mut(b).copy_from_slice(t.row(id));
        }
        Ok(self.push(Op::Lookup { table, ids: ids.to_vec() }, out, true))
    }

    /// Selected entries of a parameter as a 1 x N row vector.
    pub fn gather(
        &mut self,
        arena: &ParamArena,
        table: ParamId,
        at: &[(usize, usize)],
    ) -> Result<NodeId, DiffError> {
        let t = &arena.get(table).value;
        let mut data = Vec::with_capacity(at.len());
        for &(r, c) in at {
            if r >= t.rows() || c >= t.cols() {
                return Err(DiffError::Index { op: "gather", index: r * t.cols() + c, limit: t.len() });
            }
            data.push(t.get(r, c));
        }
        Ok(self.push(Op::Gather { table, at: at.to_vec() }, Tensor::row_vector(data), true))
    }

    // ----- primitives -----

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, DiffError> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.cols() != vb.rows() {
            return Err(shape_err("matmul", format!("{:?} . {:?}", va.shape(), vb.shape())));
        }
        let value = matmul_nn(va, vb);
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Op::MatMul(a, b), value, ng))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, DiffError> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(shape_err("add", format!("{:?} + {:?}", va.shape(), vb.shape())));
        }
        let mut value = va.clone();
        value.add_assign(vb);
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Add(a, b), value, ng))
    }

    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> Result<NodeId, DiffError> {
        let (va, vr) = (self.value(a), self.value(row));
        if vr.rows() != 1 || va.cols() != vr.cols() {
            return Err(shape_err("add_row", format!("{:?} + {:?}", va.shape(), vr.shape())));
        }
        let mut value = va.clone();
        for r in 0..value.rows() {
            for (o, &b) in value.row_mut(r).iter_mut().zip(vr.row(0)) {
                *o += b;
            }
        }
        let ng = self.needs(a) || self.needs(row);
        Ok(self.push(Op::AddRow(a, row), value, ng))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, DiffError> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(shape_err("mul", format!("{:?} * {:?}", va.shape(), vb.shape())));
        }
        let mut value = va.clone();
        for (o, &b) in value.data_mut().iter_mut().zip(vb.data()) {
            *o *= b;
        }
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Mul(a, b), value, ng))
    }

    pub fn mul_row(&mut self, a: NodeId, row: NodeId) -> Result<NodeId, DiffError> {
        let (va, vr) = (self.value(a), self.value(row));
        if vr.rows() != 1 || va.cols() != vr.cols() {
            return Err(shape_err("mul_row", format!("{:?} * {:?}", va.shape(), vr.shape())));
        }
        let mut value = va.clone();
        for r in 0..value.rows() {
            for (o, &b) in value.row_mut(r).iter_mut().zip(vr.row(0)) {
                *o *= b;
            }
        }
        let ng = self.needs(a) || self.needs(row);
        Ok(self.push(Op::MulRow(a, row), value, ng))
    }

    pub fn mul_col(&mut self, a: NodeId, col: NodeId) -> Result<NodeId, DiffError> {
        let (va, vc) = (self.value(a), self.value(col));
        if vc.cols() != 1 || va.rows() != vc.rows() {
            return Err(shape_err("mul_col", format!("{:?} * {:?}", va.shape(), vc.shape())));
        }
        let mut value = va.clone();
        for r in 0..value.rows() {
            let s = vc.get(r, 0);
            for o in value.row_mut(r) {
                *o *= s;
            }
        }
        let ng = self.needs(a) || self.needs(col);
        Ok(self.push(Op::MulCol(a, col), value, ng))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let value = self.value(a).map(|v| v * c);
        let ng = self.needs(a);
        self.push(Op::Scale(a, c), value, ng)
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).map(|v| if v > 0.0 { v } else { 0.0 });
        let ng = self.needs(a);
        self.push(Op::Relu(a), value, ng)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).map(sigmoid_stable);
        let ng = self.needs(a);
        self.push(Op::Sigmoid(a), value, ng)
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).map(f64::exp);
        let ng = self.needs(a);
        self.push(Op::Exp(a), value, ng)
    }

    pub fn recip(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).map(f64::recip);
        let ng = self.needs(a);
        self.push(Op::Recip(a), value, ng)
    }

    /// Row-wise softmax; each output row is positive and sums to 1.
    pub fn softmax(&mut self, a: NodeId) -> NodeId {
        let va = self.value(a);
        let mut value = va.clone();
        for r in 0..value.rows() {
            let row = value.row_mut(r);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            for v in row.iter_mut() {
                *v /= sum;
            }
        }
        let ng = self.needs(a);
        self.push(Op::Softmax(a), value, ng)
    }

    pub fn concat(&mut self, parts: &[NodeId]) -> Result<NodeId, DiffError> {
        if parts.is_empty() {
            return Err(shape_err("concat", "no inputs".into()));
        }
        let rows = self.value(parts[0]).rows();
        if parts.iter().any(|&p| self.value(p).rows() != rows) {
            return Err(shape_err("concat", "inputs differ in row count".into()));
        }
        let cols: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut value = Tensor::zeros(rows, cols);
        for r in 0..rows {
            let mut at = 0;
            for &p in parts {
                let src = self.value(p).row(r);
                value.row_mut(r)[at..at + src.len()].copy_from_slice(src);
                at += src.len();
            }
        }
        let ng = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(Op::Concat(parts.to_vec()), value, ng))
    }

    pub fn slice_col(&mut self, a: NodeId, col: usize) -> Result<NodeId, DiffError> {
        let va = self.value(a);
        if col >= va.cols() {
            return Err(DiffError::Index { op: "slice_col", index: col, limit: va.cols() });
        }
        let data: Vec<f64> = (0..va.rows()).map(|r| va.get(r, col)).collect();
        let ng = self.needs(a);
        Ok(self.push(Op::SliceCol(a, col), Tensor::column_vector(data), ng))
    }

    /// (B x D) -> (B x 1) row sums.
    pub fn sum_cols(&mut self, a: NodeId) -> NodeId {
        let va = self.value(a);
        let data: Vec<f64> = (0..va.rows()).map(|r| va.row(r).iter().sum()).collect();
        let ng = self.needs(a);
        self.push(Op::SumCols(a), Tensor::column_vector(data), ng)
    }

    /// Mean over all entries -> scalar.
    pub fn mean(&mut self, a: NodeId) -> NodeId {
        let va = self.value(a);
        let m = va.data().iter().sum::<f64>() / va.len() as f64;
        let ng = self.needs(a);
        self.push(Op::Mean(a), Tensor::scalar(m), ng)
    }

    /// Elementwise binary cross-entropy against constant targets in [0, 1].
    pub fn bce(&mut self, pred: NodeId, target: NodeId) -> Result<NodeId, DiffError> {
        let (vp, vt) = (self.value(pred), self.value(target));
        if vp.shape() != vt.shape() {
            return Err(shape_err("bce", format!("{:?} vs {:?}", vp.shape(), vt.shape())));
        }
        assert!(!self.needs(target), "bce targets must be constants");
        let mut value = vp.clone();
        for (o, &y) in value.data_mut().iter_mut().zip(vt.data()) {
            let p = o.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
            *o = -y * p.ln() - (1.0 - y) * (1.0 - p).ln();
        }
        let ng = self.needs(pred);
        Ok(self.push(Op::Bce { pred, target }, value, ng))
    }

    /// Mean squared error over all entries -> scalar.
    pub fn mse(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, DiffError> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(shape_err("mse", format!("{:?} vs {:?}", va.shape(), vb.shape())));
        }
        let n = va.len() as f64;
        let sum: f64 = va.data().iter().zip(vb.data()).map(|(&x, &y)| (x - y) * (x - y)).sum();
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Mse(a, b), Tensor::scalar(sum / n), ng))
    }

    /// Same value, no gradient flow into the input subtree.
    pub fn detach(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).clone();
        self.push(Op::Detach(a), value, false)
    }

    // ----- reverse pass -----

    /// Accumulates d(loss)/d(param) into every reachable parameter's gradient.
    /// Gradients add up across calls; clear with `ParamArena::zero_grads`.
    pub fn backward(&self, loss: NodeId, arena: &mut ParamArena) -> Result<(), DiffError> {
        let lv = self.value(loss);
        if lv.shape() != (1, 1) {
            return Err(DiffError::NonScalarLoss { rows: lv.rows(), cols: lv.cols() });
        }
        if !self.needs(loss) {
            return Ok(()); // constant loss: no reachable parameters
        }

        let mut grads: Vec<Option<Tensor>> = Vec::with_capacity(loss.0 + 1);
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(Tensor::scalar(1.0));

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                grads[i] = None;
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(i, &g, &mut grads, arena);
        }
        Ok(())
    }

    fn backward_node(
        &self,
        i: usize,
        g: &Tensor,
        grads: &mut [Option<Tensor>],
        arena: &mut ParamArena,
    ) {
        // Adds `f(slot)` into the input's gradient buffer unless the input
        // subtree is parameter-free.
        macro_rules! acc {
            ($input:expr, $f:expr) => {{
                let id: NodeId = $input;
                if self.nodes[id.0].needs_grad {
                    let v = self.value(id);
                    let slot = grads[id.0]
                        .get_or_insert_with(|| Tensor::zeros(v.rows(), v.cols()));
                    #[allow(clippy::redundant_closure_call)]
                    $f(slot);
                }
            }};
        }

        match &self.nodes[i].op {
            Op::Constant | Op::Detach(_) => {}
            Op::Param(pid) => {
                arena.get_mut(*pid).grad.add_assign(g);
            }
            Op::Lookup { table, ids } => {
                let p = arena.get_mut(*table);
                for (b, &row) in ids.iter().enumerate() {
                    let src = g.row(b);
                    for (d, &gv) in p.grad.row_mut(row).iter_mut().zip(src) {
                        *d += gv;
                    }
                    p.touch(row);
                }
            }
            Op::Gather { table, at } => {
                let p = arena.get_mut(*table);
                for (k, &(r, c)) in at.iter().enumerate() {
                    let cur = p.grad.get(r, c);
                    p.grad.set(r, c, cur + g.get(0, k));
                    p.touch(r);
                }
            }
            Op::MatMul(a, b) => {
                acc!(*a, |s: &mut Tensor| s.add_assign(&matmul_nt(g, self.value(*b))));
                acc!(*b, |s: &mut Tensor| s.add_assign(&matmul_tn(self.value(*a), g)));
            }
            Op::Add(a, b) => {
                acc!(*a, |s: &mut Tensor| s.add_assign(g));
                acc!(*b, |s: &mut Tensor| s.add_assign(g));
            }
            Op::AddRow(a, row) => {
                acc!(*a, |s: &mut Tensor| s.add_assign(g));
                acc!(*row, |s: &mut Tensor| {
                    let dst = s.row_mut(0);
                    for r in 0..g.rows() {
                        for (d, &gv) in dst.iter_mut().zip(g.row(r)) {
                            *d += gv;
                        }
                    }
                });
            }
            Op::Mul(a, b) => {
                acc!(*a, |s: &mut Tensor| {
                    let vb = self.value(*b);
                    for ((d, &gv), &bv) in s.data_mut().iter_mut().zip(g.data()).zip(vb.data()) {
                        *d += gv * bv;
                    }
                });
                acc!(*b, |s: &mut Tensor| {
                    let va = self.value(*a);
                    for ((d, &gv), &av) in s.data_mut().iter_mut().zip(g.data()).zip(va.data()) {
                        *d += gv * av;
                    }
                });
            }
            Op::MulRow(a, row) => {
                acc!(*a, |s: &mut Tensor| {
                    let vr = self.value(*row);
                    for r in 0..g.rows() {
                        for ((d, &gv), &rv) in
                            s.row_mut(r).iter_mut().zip(g.row(r)).zip(vr.row(0))
                        {
                            *d += gv * rv;
                        }
                    }
                });
                acc!(*row, |s: &mut Tensor| {
                    let va = self.value(*a);
                    let dst = s.row_mut(0);
                    for r in 0..g.rows() {
                        for ((d, &gv), &av) in dst.iter_mut().zip(g.row(r)).zip(va.row(r)) {
                            *d += gv * av;
                        }
                    }
                });
            }
            Op::MulCol(a, col) => {
                acc!(*a, |s: &mut Tensor| {
                    let vc = self.value(*col);
                    for r in 0..g.rows() {
                        let cv = vc.get(r, 0);
                        for (d, &gv) in s.row_mut(r).iter_mut().zip(g.row(r)) {
                            *d += gv * cv;
                        }
                    }
                });
                acc!(*col, |s: &mut Tensor| {
                    let va = self.value(*a);
                    for r in 0..g.rows() {
                        let dot: f64 =
                            g.row(r).iter().zip(va.row(r)).map(|(&gv, &av)| gv * av).sum();
                        let cur = s.get(r, 0);
                        s.set(r, 0, cur + dot);
                    }
                });
            }
            Op::Scale(a, c) => {
                acc!(*a, |s: &mut Tensor| {
                    for (d, &gv) in s.data_mut().iter_mut().zip(g.data()) {
                        *d += gv * c;
                    }
                });
            }
            Op::Relu(a) => {
                acc!(*a, |s: &mut Tensor| {
                    let va = self.value(*a);
                    for ((d, &gv), &xv) in s.data_mut().iter_mut().zip(g.data()).zip(va.data()) {
                        if xv > 0.0 {
                            *d += gv;
                        }
                    }
                });
            }
            Op::Sigmoid(a) => {
                let y = &self.nodes[i].value;
                acc!(*a, |s: &mut Tensor| {
                    for ((d, &gv), &yv) in s.data_mut().iter_mut().zip(g.data()).zip(y.data()) {
                        *d += gv * yv * (1.0 - yv);
                    }
                });
            }
            Op::Exp(a) => {
                let y = &self.nodes[i].value;
                acc!(*a, |s: &mut Tensor| {
                    for ((d, &gv), &yv) in s.data_mut().iter_mut().zip(g.data()).zip(y.data()) {
                        *d += gv * yv;
                    }
                });
            }
            Op::Recip(a) => {
                let y = &self.nodes[i].value;
                acc!(*a, |s: &mut Tensor| {
                    for ((d, &gv), &yv) in s.data_mut().iter_mut().zip(g.data()).zip(y.data()) {
                        *d -= gv * yv * yv;
                    }
                });
            }
            Op::Softmax(a) => {
                // dx = y * (dy - <dy, y>) per row.
                let y = &self.nodes[i].value;
                acc!(*a, |s: &mut Tensor| {
                    for r in 0..y.rows() {
                        let yr = y.row(r);
                        let gr = g.row(r);
                        let dot: f64 = yr.iter().zip(gr).map(|(&yv, &gv)| yv * gv).sum();
                        for ((d, &yv), &gv) in s.row_mut(r).iter_mut().zip(yr).zip(gr) {
                            *d += yv * (gv - dot);
                        }
                    }
                });
            }
            Op::Concat(parts) => {
                let mut at = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    acc!(p, |s: &mut Tensor| {
                        for r in 0..g.rows() {
                            for (d, &gv) in s.row_mut(r).iter_mut().zip(&g.row(r)[at..at + w]) {
                                *d += gv;
                            }
                        }
                    });
                    at += w;
                }
            }
            Op::SliceCol(a, col) => {
                acc!(*a, |s: &mut Tensor| {
                    for r in 0..g.rows() {
                        let cur = s.get(r, *col);
                        s.set(r, *col, cur + g.get(r, 0));
                    }
                });
            }
            Op::SumCols(a) => {
                acc!(*a, |s: &mut Tensor| {
                    for r in 0..s.rows() {
                        let gv = g.get(r, 0);
                        for d in s.row_mut(r) {
                            *d += gv;
                        }
                    }
                });
            }
            Op::Mean(a) => {
                acc!(*a, |s: &mut Tensor| {
                    let gv = g.item() / s.len() as f64;
                    for d in s.data_mut() {
                        *d += gv;
                    }
                });
            }
            Op::Bce { pred, target } => {
                acc!(*pred, |s: &mut Tensor| {
                    let vp = self.value(*pred);
                    let vt = self.value(*target);
                    for (((d, &gv), &pv), &yv) in
                        s.data_mut().iter_mut().zip(g.data()).zip(vp.data()).zip(vt.data())
                    {
                        let p = pv.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
                        *d += gv * (p - yv) / (p * (1.0 - p));
                    }
                });
            }
            Op::Mse(a, b) => {
                let n = self.value(*a).len() as f64;
                let gv = g.item();
                acc!(*a, |s: &mut Tensor| {
                    let (va, vb) = (self.value(*a), self.value(*b));
                    for ((d, &x), &y) in s.data_mut().iter_mut().zip(va.data()).zip(vb.data()) {
                        *d += gv * 2.0 * (x - y) / n;
                    }
                });
                acc!(*b, |s: &mut Tensor| {
                    let (va, vb) = (self.value(*a), self.value(*b));
                    for ((d, &x), &y) in s.data_mut().iter_mut().zip(va.data()).zip(vb.data()) {
                        *d -= gv * 2.0 * (x - y) / n;
                    }
                });
            }
        }
    }
}

fn sigmoid_stable(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_param(arena: &mut ParamArena, name: &str, v: f64) -> ParamId {
        arena.add_dense(name, Tensor::scalar(v))
    }

    // === forward values ===

    #[test]
    fn sigmoid_symmetry_point() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::scalar(0.0));
        let y = g.sigmoid(x);
        assert_eq!(g.scalar(y), 0.5);
    }

    #[test]
    fn softmax_shift_invariance_and_symmetry() {
        for c in [-3.0, 0.0, 42.0] {
            let mut g = Graph::new();
            let x = g.constant(Tensor::row_vector(vec![c, c, c]));
            let y = g.softmax(x);
            for &v in g.value(y).data() {
                assert!((v - 1.0 / 3.0).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_rows(&[vec![1.0, -4.0, 2.5], vec![100.0, 99.0, 98.0]]));
        let y = g.softmax(x);
        for r in 0..2 {
            let s: f64 = g.value(y).row(r).iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
            assert!(g.value(y).row(r).iter().all(|&v| v > 0.0));
        }
    }

    #[test]
    fn bce_half_is_ln2() {
        let mut g = Graph::new();
        let p = g.constant(Tensor::scalar(0.5));
        let y = g.constant(Tensor::scalar(1.0));
        let l = g.bce(p, y).unwrap();
        assert!((g.scalar(l) - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn bce_clamps_at_zero_and_one() {
        let mut g = Graph::new();
        let p = g.constant(Tensor::row_vector(vec![0.0, 1.0]));
        let y = g.constant(Tensor::row_vector(vec![0.0, 1.0]));
        let l = g.bce(p, y).unwrap();
        assert!(g.value(l).all_finite());
        assert!(g.value(l).data().iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn shape_mismatch_names_primitive_and_shapes() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(2, 3));
        let b = g.constant(Tensor::zeros(2, 3));
        let err = g.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("matmul"), "{err}");
        assert!(err.contains("(2, 3)"), "{err}");
    }

    // === backward ===

    #[test]
    fn identity_loss_grad_is_one() {
        let mut arena = ParamArena::new();
        let x = scalar_param(&mut arena, "x", 3.0);
        let mut g = Graph::new();
        let xn = g.param(&arena, x);
        g.backward(xn, &mut arena).unwrap();
        assert_eq!(arena.get(x).grad.item(), 1.0);
    }

    #[test]
    fn sum_of_squares_grad_is_two_x() {
        let mut arena = ParamArena::new();
        let x = arena.add_dense("x", Tensor::row_vector(vec![1.0, 2.0, 3.0]));
        let mut g = Graph::new();
        let xn = g.param(&arena, x);
        let sq = g.mul(xn, xn).unwrap();
        let s = g.sum_cols(sq);
        // sum over the one row, then take the scalar via mean of the 1x1.
        let loss = g.mean(s);
        g.backward(loss, &mut arena).unwrap();
        assert_eq!(arena.get(x).grad.data(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut arena = ParamArena::new();
        let x = arena.add_dense("x", Tensor::zeros(2, 2));
        let mut g = Graph::new();
        let xn = g.param(&arena, x);
        let err = g.backward(xn, &mut arena).unwrap_err();
        assert!(matches!(err, DiffError::NonScalarLoss { rows: 2, cols: 2 }));
    }

    #[test]
    fn accumulation_is_additive() {
        // backward(l1) + backward(l2) == backward(l1 + l2)
        let build = |g: &mut Graph, arena: &ParamArena, x: ParamId| {
            let xn = g.param(arena, x);
            let sq = g.mul(xn, xn).unwrap();
            let l1 = g.mean(sq);
            let sig = g.sigmoid(xn);
            let l2 = g.mean(sig);
            (l1, l2)
        };

        let mut arena = ParamArena::new();
        let x = arena.add_dense("x", Tensor::row_vector(vec![0.3, -1.2, 2.0]));

        let mut g = Graph::new();
        let (l1, l2) = build(&mut g, &arena, x);
        g.backward(l1, &mut arena).unwrap();
        g.backward(l2, &mut arena).unwrap();
        let separate = arena.get(x).grad.clone();

        arena.zero_grads();
        let mut g = Graph::new();
        let (l1, l2) = build(&mut g, &arena, x);
        let total = g.add(l1, l2).unwrap();
        g.backward(total, &mut arena).unwrap();
        let joint = arena.get(x).grad.clone();

        for (a, b) in separate.data().iter().zip(joint.data()) {
            assert!((a - b).abs() < 1e-15, "{a} vs {b}");
        }
    }

    #[test]
    fn lookup_scatters_into_touched_rows_only() {
        let mut arena = ParamArena::new();
        let t = arena.add_sparse("table", Tensor::from_rows(&[
            vec![1.0, 2.0],
            vec![3.0, 4.0],
            vec![5.0, 6.0],
        ]));
        let mut g = Graph::new();
        let e = g.lookup(&arena, t, &[2, 2, 0]).unwrap();
        let loss = g.mean(e);
        g.backward(loss, &mut arena).unwrap();

        let p = arena.get(t);
        let touched: Vec<usize> = p.touched_rows().collect();
        assert_eq!(touched, vec![0, 2]);
        assert!(p.grad.row(1).iter().all(|&v| v == 0.0));
        // row 2 looked up twice: grad 2/6 per entry; row 0 once: 1/6.
        assert!((p.grad.get(2, 0) - 2.0 / 6.0).abs() < 1e-15);
        assert!((p.grad.get(0, 0) - 1.0 / 6.0).abs() < 1e-15);
    }

    #[test]
    fn lookup_out_of_range_rejected() {
        let mut arena = ParamArena::new();
        let t = arena.add_sparse("table", Tensor::zeros(3, 2));
        let mut g = Graph::new();
        let err = g.lookup(&arena, t, &[3]).unwrap_err();
        assert!(matches!(err, DiffError::Index { op: "lookup", index: 3, limit: 3 }));
    }

    #[test]
    fn detach_blocks_gradient() {
        let mut arena = ParamArena::new();
        let x = scalar_param(&mut arena, "x", 2.0);
        let mut g = Graph::new();
        let xn = g.param(&arena, x);
        let d = g.detach(xn);
        let sq = g.mul(d, d).unwrap();
        g.backward(sq, &mut arena).unwrap();
        assert_eq!(arena.get(x).grad.item(), 0.0);
        assert_eq!(g.scalar(sq), 4.0);
    }

    #[test]
    fn detached_value_still_usable_while_other_path_gets_grads() {
        // loss = x * detach(x): d/dx = detach(x) = value of x.
        let mut arena = ParamArena::new();
        let x = scalar_param(&mut arena, "x", 3.0);
        let mut g = Graph::new();
        let xn = g.param(&arena, x);
        let d = g.detach(xn);
        let loss = g.mul(xn, d).unwrap();
        g.backward(loss, &mut arena).unwrap();
        assert_eq!(arena.get(x).grad.item(), 3.0);
    }

    #[test]
    fn replay_same_graph_is_bit_identical() {
        let run = || {
            let mut arena = ParamArena::new();
            let x = arena.add_dense("x", Tensor::from_rows(&[vec![0.1, -0.7], vec![1.3, 0.4]]));
            let w = arena.add_dense("w", Tensor::from_rows(&[vec![0.5, -0.2], vec![0.8, 0.3]]));
            let mut g = Graph::new();
            let xn = g.param(&arena, x);
            let wn = g.param(&arena, w);
            let h = g.matmul(xn, wn).unwrap();
            let a = g.sigmoid(h);
            let loss = g.mean(a);
            g.backward(loss, &mut arena).unwrap();
            (g.scalar(loss).to_bits(), arena.get(w).grad.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>())
        };
        assert_eq!(run(), run());
    }
}
