//! Reverse-mode differentiation over [`Matrix`] values.
//!
//! Every primitive appends one node holding its output value. Nodes are only
//! ever appended after their inputs, so index order is a topological order
//! and backward simply walks the node list from the loss down to zero.

use std::borrow::Cow;

use crate::error::{Error, Result};
use crate::matrix::{
    self, gelu, gelu_grad, matmul_nt_unchecked, matmul_tn_unchecked, matmul_unchecked, row_stats,
    Matrix,
};

/// Handle to a node recorded on a [`GradTape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    /// Constant input; receives a gradient but is not a parameter.
    Input,
    /// Trainable parameter with a caller-chosen key.
    Param(usize),
    MatMul(NodeId, NodeId),
    /// `a · bᵀ`
    MatMulNt(NodeId, NodeId),
    Transpose(NodeId),
    Add(NodeId, NodeId),
    /// Adds a 1 x c row vector to every row.
    AddRow(NodeId, NodeId),
    Scale(NodeId, f64),
    /// Multiplies row i by a fixed positive factor.
    ScaleRows(NodeId, Vec<f64>),
    /// Divides every entry by the value of a 1 x 1 node.
    DivScalar(NodeId, NodeId),
    FrobeniusNorm(NodeId),
    SoftmaxRows(NodeId),
    LayerNorm {
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
        eps: f64,
    },
    Gelu(NodeId),
    /// Row lookup into an embedding table.
    Gather(NodeId, Vec<usize>),
    SliceCols {
        x: NodeId,
        start: usize,
        len: usize,
    },
    ConcatCols(Vec<NodeId>),
    /// Summed cross-entropy of `(row, class)` targets under row softmax.
    CrossEntropy(NodeId, Vec<(usize, usize)>),
}

/// Single-owner record of a forward computation.
///
/// Parameter values are borrowed rather than copied, so a tape lives no
/// longer than the model it was built from.
pub struct GradTape<'a> {
    ops: Vec<Op>,
    values: Vec<Cow<'a, Matrix>>,
}

impl Default for GradTape<'_> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'a> GradTape<'a> {
    pub fn new() -> Self {
        Self {
            ops: Vec::new(),
            values: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.ops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ops.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Matrix {
        &self.values[id.0]
    }

    fn push(&mut self, op: Op, value: Matrix) -> NodeId {
        self.ops.push(op);
        self.values.push(Cow::Owned(value));
        NodeId(self.ops.len() - 1)
    }

    fn record(&mut self, op: Op) -> NodeId {
        let value = self.eval(&op);
        self.push(op, value)
    }

    fn shape(&self, id: NodeId) -> (usize, usize) {
        self.values[id.0].shape()
    }

    pub fn input(&mut self, value: Matrix) -> NodeId {
        self.push(Op::Input, value)
    }

    /// Registers a borrowed parameter under `key`.
    pub fn param(&mut self, key: usize, value: &'a Matrix) -> NodeId {
        self.ops.push(Op::Param(key));
        self.values.push(Cow::Borrowed(value));
        NodeId(self.ops.len() - 1)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.1 != sb.0 {
            return Err(Error::shape("matmul", sa, sb));
        }
        Ok(self.record(Op::MatMul(a, b)))
    }

    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.1 != sb.1 {
            return Err(Error::shape("matmul_nt", sa, sb));
        }
        Ok(self.record(Op::MatMulNt(a, b)))
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        self.record(Op::Transpose(a))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::shape("add", sa, sb));
        }
        Ok(self.record(Op::Add(a, b)))
    }

    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a), self.shape(row));
        if sb.0 != 1 || sa.1 != sb.1 {
            return Err(Error::shape("add_row", sa, sb));
        }
        Ok(self.record(Op::AddRow(a, row)))
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> NodeId {
        self.record(Op::Scale(a, factor))
    }

    pub fn scale_rows(&mut self, a: NodeId, factors: Vec<f64>) -> Result<NodeId> {
        let sa = self.shape(a);
        if factors.len() != sa.0 {
            return Err(Error::shape("scale_rows", sa, (factors.len(), 1)));
        }
        Ok(self.record(Op::ScaleRows(a, factors)))
    }

    pub fn div_scalar(&mut self, a: NodeId, s: NodeId) -> Result<NodeId> {
        let ss = self.shape(s);
        if ss != (1, 1) {
            return Err(Error::shape("div_scalar", self.shape(a), ss));
        }
        Ok(self.record(Op::DivScalar(a, s)))
    }

    pub fn frobenius_norm(&mut self, a: NodeId) -> NodeId {
        self.record(Op::FrobeniusNorm(a))
    }

    pub fn softmax_rows(&mut self, a: NodeId) -> NodeId {
        self.record(Op::SoftmaxRows(a))
    }

    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId, eps: f64) -> Result<NodeId> {
        let (sx, sg, sb) = (self.shape(x), self.shape(gain), self.shape(bias));
        if sg != (1, sx.1) || sb != (1, sx.1) {
            return Err(Error::shape("layer_norm", sx, sg));
        }
        if !(eps > 0.0) {
            return Err(Error::Contract(format!("layer_norm eps must be > 0, got {eps}")));
        }
        Ok(self.record(Op::LayerNorm { x, gain, bias, eps }))
    }

    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        self.record(Op::Gelu(a))
    }

    pub fn gather(&mut self, table: NodeId, ids: Vec<usize>) -> Result<NodeId> {
        let rows = self.shape(table).0;
        if let Some(&bad) = ids.iter().find(|&&i| i >= rows) {
            return Err(Error::Vocab {
                kind: "embedding",
                id: bad,
                size: rows,
            });
        }
        Ok(self.record(Op::Gather(table, ids)))
    }

    pub fn slice_cols(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let sx = self.shape(x);
        if start + len > sx.1 {
            return Err(Error::shape("slice_cols", sx, (start, len)));
        }
        Ok(self.record(Op::SliceCols { x, start, len }))
    }

    pub fn concat_cols(&mut self, parts: Vec<NodeId>) -> Result<NodeId> {
        let rows = parts.first().map(|&p| self.shape(p).0).unwrap_or(0);
        for &p in &parts {
            if self.shape(p).0 != rows {
                return Err(Error::shape("concat_cols", (rows, 0), self.shape(p)));
            }
        }
        Ok(self.record(Op::ConcatCols(parts)))
    }

    /// Sum over targets of `-log softmax(logits[row])[class]`, as a 1 x 1 node.
    pub fn cross_entropy(&mut self, logits: NodeId, targets: Vec<(usize, usize)>) -> Result<NodeId> {
        let (rows, cols) = self.shape(logits);
        for &(r, c) in &targets {
            if r >= rows || c >= cols {
                return Err(Error::shape("cross_entropy", (rows, cols), (r, c)));
            }
        }
        Ok(self.record(Op::CrossEntropy(logits, targets)))
    }

    fn eval(&self, op: &Op) -> Matrix {
        let v = |id: &NodeId| -> &Matrix { &self.values[id.0] };
        match op {
            Op::Input | Op::Param(_) => unreachable!("leaves are not evaluated"),
            Op::MatMul(a, b) => matmul_unchecked(v(a), v(b)),
            Op::MatMulNt(a, b) => matmul_nt_unchecked(v(a), v(b)),
            Op::Transpose(a) => v(a).transpose(),
            Op::Add(a, b) => {
                let mut out = v(a).clone();
                out.add_assign(v(b));
                out
            }
            Op::AddRow(a, row) => {
                let mut out = v(a).clone();
                let row = v(row).row(0);
                for r in 0..out.rows() {
                    for (x, b) in out.row_mut(r).iter_mut().zip(row) {
                        *x += b;
                    }
                }
                out
            }
            Op::Scale(a, f) => v(a).scale(*f),
            Op::ScaleRows(a, factors) => {
                let mut out = v(a).clone();
                for (r, f) in factors.iter().enumerate() {
                    out.row_mut(r).iter_mut().for_each(|x| *x *= f);
                }
                out
            }
            Op::DivScalar(a, s) => {
                let s = v(s).data()[0];
                v(a).map(|x| x / s)
            }
            Op::FrobeniusNorm(a) => Matrix::scalar(matrix::frobenius_norm(v(a))),
            Op::SoftmaxRows(a) => matrix::softmax_rows(v(a)),
            Op::LayerNorm { x, gain, bias, eps } => {
                matrix::layer_norm(v(x), v(gain).row(0), v(bias).row(0), *eps)
                    .expect("shapes checked at record time")
            }
            Op::Gelu(a) => v(a).map(gelu),
            Op::Gather(table, ids) => v(table).select_rows(ids),
            Op::SliceCols { x, start, len } => {
                let x = v(x);
                Matrix::from_fn(x.rows(), *len, |r, c| x.get(r, start + c))
            }
            Op::ConcatCols(parts) => {
                let rows = v(&parts[0]).rows();
                let cols: usize = parts.iter().map(|p| v(p).cols()).sum();
                let mut out = Matrix::zeros(rows, cols);
                for r in 0..rows {
                    let mut offset = 0;
                    for p in parts {
                        let pr = v(p).row(r);
                        out.row_mut(r)[offset..offset + pr.len()].copy_from_slice(pr);
                        offset += pr.len();
                    }
                }
                out
            }
            Op::CrossEntropy(logits, targets) => {
                let logits = v(logits);
                let mut total = 0.0;
                for &(r, c) in targets {
                    let row = logits.row(r);
                    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    let lse = row.iter().map(|x| (x - max).exp()).sum::<f64>().ln() + max;
                    total += lse - row[c];
                }
                Matrix::scalar(total)
            }
        }
    }

    /// Recomputes every non-leaf node from its recorded inputs and reports
    /// whether all of them reproduce the recorded values bit for bit.
    pub fn replay_matches(&self) -> bool {
        self.ops.iter().enumerate().all(|(i, op)| match op {
            Op::Input | Op::Param(_) => true,
            _ => {
                let again = self.eval(op);
                let recorded: &Matrix = &self.values[i];
                again.shape() == recorded.shape()
                    && again
                        .data()
                        .iter()
                        .zip(recorded.data())
                        .all(|(a, b)| a.to_bits() == b.to_bits())
            }
        })
    }

    /// Reverse accumulation from a 1 x 1 `loss` node.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        if self.shape(loss) != (1, 1) {
            let (r, c) = self.shape(loss);
            return Err(Error::Contract(format!(
                "backward needs a scalar loss node, got {r}x{c}"
            )));
        }
        let mut grads: Vec<Option<Matrix>> = vec![None; self.ops.len()];
        grads[loss.0] = Some(Matrix::scalar(1.0));

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }

        let mut params = Vec::new();
        for (i, op) in self.ops.iter().enumerate() {
            if let Op::Param(key) = op {
                let (r, c) = self.values[i].shape();
                let g = grads[i].take().unwrap_or_else(|| Matrix::zeros(r, c));
                params.push((*key, g));
            }
        }
        Ok(Gradients { nodes: grads, params })
    }

    fn propagate(&self, i: usize, g: &Matrix, grads: &mut [Option<Matrix>]) {
        let v = |id: &NodeId| -> &Matrix { &self.values[id.0] };
        match &self.ops[i] {
            Op::Input | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                accumulate(grads, *a, matmul_nt_unchecked(g, v(b)));
                accumulate(grads, *b, matmul_tn_unchecked(v(a), g));
            }
            Op::MatMulNt(a, b) => {
                accumulate(grads, *a, matmul_unchecked(g, v(b)));
                accumulate(grads, *b, matmul_tn_unchecked(g, v(a)));
            }
            Op::Transpose(a) => accumulate(grads, *a, g.transpose()),
            Op::Add(a, b) => {
                accumulate(grads, *a, g.clone());
                accumulate(grads, *b, g.clone());
            }
            Op::AddRow(a, row) => {
                accumulate(grads, *a, g.clone());
                let mut sums = Matrix::zeros(1, g.cols());
                for r in 0..g.rows() {
                    for (s, x) in sums.row_mut(0).iter_mut().zip(g.row(r)) {
                        *s += x;
                    }
                }
                accumulate(grads, *row, sums);
            }
            Op::Scale(a, f) => accumulate(grads, *a, g.scale(*f)),
            Op::ScaleRows(a, factors) => {
                let mut out = g.clone();
                for (r, f) in factors.iter().enumerate() {
                    out.row_mut(r).iter_mut().for_each(|x| *x *= f);
                }
                accumulate(grads, *a, out);
            }
            Op::DivScalar(a, s) => {
                let sv = v(s).data()[0];
                accumulate(grads, *a, g.scale(1.0 / sv));
                let ds: f64 = g
                    .data()
                    .iter()
                    .zip(v(a).data())
                    .map(|(gi, ai)| gi * ai)
                    .sum::<f64>()
                    * (-1.0 / (sv * sv));
                accumulate(grads, *s, Matrix::scalar(ds));
            }
            Op::FrobeniusNorm(a) => {
                let norm = self.values[i].data()[0];
                let ga = if norm > 0.0 {
                    v(a).scale(g.data()[0] / norm)
                } else {
                    let (r, c) = v(a).shape();
                    Matrix::zeros(r, c)
                };
                accumulate(grads, *a, ga);
            }
            Op::SoftmaxRows(a) => {
                let y: &Matrix = &self.values[i];
                let mut out = Matrix::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let (yr, gr) = (y.row(r), g.row(r));
                    let inner = matrix::dot(yr, gr);
                    for (o, (yv, gv)) in out.row_mut(r).iter_mut().zip(yr.iter().zip(gr)) {
                        *o = yv * (gv - inner);
                    }
                }
                accumulate(grads, *a, out);
            }
            Op::LayerNorm { x, gain, bias, eps } => {
                let (xv, gainv) = (v(x), v(gain).row(0));
                let cols = xv.cols();
                let n = cols as f64;
                let mut dx = Matrix::zeros(xv.rows(), cols);
                let mut dgain = Matrix::zeros(1, cols);
                let mut dbias = Matrix::zeros(1, cols);
                let mut xhat = vec![0.0; cols];
                let mut dxhat = vec![0.0; cols];
                for r in 0..xv.rows() {
                    let (mean, rstd) = row_stats(xv.row(r), *eps);
                    let gr = g.row(r);
                    for c in 0..cols {
                        xhat[c] = (xv.get(r, c) - mean) * rstd;
                        dxhat[c] = gr[c] * gainv[c];
                        dgain.row_mut(0)[c] += gr[c] * xhat[c];
                        dbias.row_mut(0)[c] += gr[c];
                    }
                    let mean_d = dxhat.iter().sum::<f64>() / n;
                    let mean_dx = matrix::dot(&dxhat, &xhat) / n;
                    for (c, o) in dx.row_mut(r).iter_mut().enumerate() {
                        *o = rstd * (dxhat[c] - mean_d - xhat[c] * mean_dx);
                    }
                }
                accumulate(grads, *x, dx);
                accumulate(grads, *gain, dgain);
                accumulate(grads, *bias, dbias);
            }
            Op::Gelu(a) => {
                let av = v(a);
                let mut out = g.clone();
                for (o, x) in out.data_mut().iter_mut().zip(av.data()) {
                    *o *= gelu_grad(*x);
                }
                accumulate(grads, *a, out);
            }
            Op::Gather(table, ids) => {
                let (rows, cols) = v(table).shape();
                let mut out = Matrix::zeros(rows, cols);
                for (r, &id) in ids.iter().enumerate() {
                    for (o, x) in out.row_mut(id).iter_mut().zip(g.row(r)) {
                        *o += x;
                    }
                }
                accumulate(grads, *table, out);
            }
            Op::SliceCols { x, start, len } => {
                let (rows, cols) = v(x).shape();
                let mut out = Matrix::zeros(rows, cols);
                for r in 0..rows {
                    out.row_mut(r)[*start..start + len].copy_from_slice(g.row(r));
                }
                accumulate(grads, *x, out);
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for p in parts {
                    let w = v(p).cols();
                    let piece = Matrix::from_fn(g.rows(), w, |r, c| g.get(r, offset + c));
                    accumulate(grads, *p, piece);
                    offset += w;
                }
            }
            Op::CrossEntropy(logits, targets) => {
                let lv = v(logits);
                let scale = g.data()[0];
                let mut out = Matrix::zeros(lv.rows(), lv.cols());
                for &(r, c) in targets {
                    let row = lv.row(r);
                    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    let total: f64 = row.iter().map(|x| (x - max).exp()).sum();
                    let out_row = out.row_mut(r);
                    for (o, x) in out_row.iter_mut().zip(row) {
                        *o += scale * (x - max).exp() / total;
                    }
                    out_row[c] -= scale;
                }
                accumulate(grads, *logits, out);
            }
        }
    }
}

fn accumulate(grads: &mut [Option<Matrix>], id: NodeId, g: Matrix) {
    match &mut grads[id.0] {
        Some(existing) => existing.add_assign(&g),
        slot => *slot = Some(g),
    }
}

/// Result of [`GradTape::backward`].
pub struct Gradients {
    nodes: Vec<Option<Matrix>>,
    params: Vec<(usize, Matrix)>,
}

impl Gradients {
    /// Gradient w.r.t. any recorded node; `None` when the loss does not
    /// depend on it.
    pub fn node(&self, id: NodeId) -> Option<&Matrix> {
        self.nodes[id.0].as_ref()
    }

    /// Gradient of the parameter registered under `key`; all-zero when the
    /// loss does not reach it. Sums over repeated registrations.
    pub fn param(&self, key: usize) -> Option<Matrix> {
        let mut found: Option<Matrix> = None;
        for (k, g) in &self.params {
            if *k == key {
                match &mut found {
                    Some(acc) => acc.add_assign(g),
                    None => found = Some(g.clone()),
                }
            }
        }
        found
    }

    /// `(key, gradient)` per parameter registration, in registration order.
    pub fn params(&self) -> &[(usize, Matrix)] {
        &self.params
    }

    pub fn into_params(self) -> Vec<(usize, Matrix)> {
        self.params
    }
}
