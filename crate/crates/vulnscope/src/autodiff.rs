//! A small reverse-mode autodiff tape over `ndarray::Array2<f64>`.
//!
//! Values are computed eagerly as nodes are appended; [`Graph::backward`]
//! then walks the tape in reverse, accumulating gradients. The op set is
//! exactly what the encoder/GCN/head stack needs — matrix products, bias
//! rows, ReLU, row softmax, row layer-norm, embedding gathers, row pooling,
//! column slicing/concatenation — nothing speculative.
//!
//! Shapes are validated with panics, not `Result`: a mismatch is a bug in
//! the caller's graph construction, never a data-dependent condition.

use ndarray::{concatenate, Array1, Array2, Axis};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    Add(NodeId, NodeId),
    /// `a + bias` where bias is 1×n, broadcast over a's rows.
    AddBiasRow(NodeId, NodeId),
    /// `a + c` for a constant matrix `c` (not a node; receives no gradient).
    AddConst(NodeId),
    Scale(NodeId, f64),
    Relu(NodeId),
    SoftmaxRows(NodeId),
    /// Row-wise layer norm with learned gain/bias (both 1×n).
    LayerNormRows {
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
        eps: f64,
    },
    /// Gather `table` rows by index; backward scatter-adds into the table.
    Embed { table: NodeId, ids: Vec<usize> },
    /// Mean of a fixed subset of rows; 1×d output.
    MeanRows { x: NodeId, rows: Vec<usize> },
    SliceCols { x: NodeId, from: usize, to: usize },
    ConcatCols(Vec<NodeId>),
}

struct Node {
    op: Op,
    value: Array2<f64>,
    grad: Option<Array2<f64>>,
}

/// An append-only computation tape.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Graph {
        Graph::default()
    }

    fn push(&mut self, op: Op, value: Array2<f64>) -> NodeId {
        self.nodes.push(Node {
            op,
            value,
            grad: None,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn value(&self, id: NodeId) -> &Array2<f64> {
        &self.nodes[id.0].value
    }

    /// The gradient accumulated at `id` by the last [`Graph::backward`] call.
    pub fn grad(&self, id: NodeId) -> Option<&Array2<f64>> {
        self.nodes[id.0].grad.as_ref()
    }

    /// A leaf holding `value`. Parameters, inputs, and constants are all
    /// leaves; gradients accumulate on any of them that the output depends on.
    pub fn leaf(&mut self, value: Array2<f64>) -> NodeId {
        self.push(Op::Leaf, value)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let value = self.nodes[a.0].value.dot(&self.nodes[b.0].value);
        self.push(Op::MatMul(a, b), value)
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let value = self.nodes[a.0].value.t().to_owned();
        self.push(Op::Transpose(a), value)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.nodes[a.0].value.dim(), self.nodes[b.0].value.dim());
        let value = &self.nodes[a.0].value + &self.nodes[b.0].value;
        self.push(Op::Add(a, b), value)
    }

    pub fn add_bias_row(&mut self, a: NodeId, bias: NodeId) -> NodeId {
        let (rows_b, cols_b) = self.nodes[bias.0].value.dim();
        assert_eq!(rows_b, 1, "bias must be a single row");
        assert_eq!(self.nodes[a.0].value.ncols(), cols_b);
        let value = &self.nodes[a.0].value + &self.nodes[bias.0].value;
        self.push(Op::AddBiasRow(a, bias), value)
    }

    pub fn add_const(&mut self, a: NodeId, c: &Array2<f64>) -> NodeId {
        assert_eq!(self.nodes[a.0].value.dim(), c.dim());
        let value = &self.nodes[a.0].value + c;
        self.push(Op::AddConst(a), value)
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> NodeId {
        let value = self.nodes[a.0].value.mapv(|v| v * factor);
        self.push(Op::Scale(a, factor), value)
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let value = self.nodes[a.0].value.mapv(|v| v.max(0.0));
        self.push(Op::Relu(a), value)
    }

    pub fn softmax_rows(&mut self, a: NodeId) -> NodeId {
        let mut value = self.nodes[a.0].value.clone();
        for mut row in value.rows_mut() {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            row.mapv_inplace(|v| (v - max).exp());
            let sum = row.sum();
            row.mapv_inplace(|v| v / sum);
        }
        self.push(Op::SoftmaxRows(a), value)
    }

    pub fn layernorm_rows(&mut self, x: NodeId, gain: NodeId, bias: NodeId, eps: f64) -> NodeId {
        let xv = &self.nodes[x.0].value;
        let n = xv.ncols() as f64;
        let mut value = xv.clone();
        for mut row in value.rows_mut() {
            let mean = row.sum() / n;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            let s = (var + eps).sqrt();
            row.mapv_inplace(|v| (v - mean) / s);
        }
        let value = &value * &self.nodes[gain.0].value + &self.nodes[bias.0].value;
        self.push(Op::LayerNormRows { x, gain, bias, eps }, value)
    }

    pub fn embed(&mut self, table: NodeId, ids: &[usize]) -> NodeId {
        let t = &self.nodes[table.0].value;
        let mut value = Array2::zeros((ids.len(), t.ncols()));
        for (i, &id) in ids.iter().enumerate() {
            value.row_mut(i).assign(&t.row(id));
        }
        self.push(
            Op::Embed {
                table,
                ids: ids.to_vec(),
            },
            value,
        )
    }

    pub fn mean_rows(&mut self, x: NodeId, rows: &[usize]) -> NodeId {
        assert!(!rows.is_empty());
        let xv = &self.nodes[x.0].value;
        let mut acc = Array1::zeros(xv.ncols());
        for &r in rows {
            acc = acc + xv.row(r);
        }
        acc /= rows.len() as f64;
        let value = acc.insert_axis(Axis(0));
        self.push(
            Op::MeanRows {
                x,
                rows: rows.to_vec(),
            },
            value,
        )
    }

    pub fn slice_cols(&mut self, x: NodeId, from: usize, to: usize) -> NodeId {
        let value = self.nodes[x.0]
            .value
            .slice(ndarray::s![.., from..to])
            .to_owned();
        self.push(Op::SliceCols { x, from, to }, value)
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> NodeId {
        let views: Vec<_> = parts.iter().map(|p| self.nodes[p.0].value.view()).collect();
        let value = concatenate(Axis(1), &views).expect("column concat shapes");
        self.push(Op::ConcatCols(parts.to_vec()), value)
    }

    fn accumulate(&mut self, id: NodeId, delta: Array2<f64>) {
        match &mut self.nodes[id.0].grad {
            Some(g) => *g += &delta,
            slot @ None => *slot = Some(delta),
        }
    }

    /// Clears gradients and back-propagates from the given `(node, seed)`
    /// pairs. Each seed must match its node's shape. After this call,
    /// [`Graph::grad`] yields d(Σ seedᵢ·outᵢ)/d(node).
    pub fn backward(&mut self, seeds: &[(NodeId, Array2<f64>)]) {
        for node in &mut self.nodes {
            node.grad = None;
        }
        for (id, seed) in seeds {
            assert_eq!(self.nodes[id.0].value.dim(), seed.dim(), "seed shape");
            self.accumulate(*id, seed.clone());
        }

        for i in (0..self.nodes.len()).rev() {
            let Some(grad) = self.nodes[i].grad.clone() else {
                continue;
            };
            match self.nodes[i].op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let da = grad.dot(&self.nodes[b.0].value.t());
                    let db = self.nodes[a.0].value.t().dot(&grad);
                    self.accumulate(a, da);
                    self.accumulate(b, db);
                }
                Op::Transpose(a) => {
                    self.accumulate(a, grad.t().to_owned());
                }
                Op::Add(a, b) => {
                    self.accumulate(a, grad.clone());
                    self.accumulate(b, grad);
                }
                Op::AddBiasRow(a, bias) => {
                    let db = grad.sum_axis(Axis(0)).insert_axis(Axis(0));
                    self.accumulate(a, grad);
                    self.accumulate(bias, db);
                }
                Op::AddConst(a) => {
                    self.accumulate(a, grad);
                }
                Op::Scale(a, factor) => {
                    self.accumulate(a, grad.mapv(|v| v * factor));
                }
                Op::Relu(a) => {
                    let mask = self.nodes[a.0].value.mapv(|v| if v > 0.0 { 1.0 } else { 0.0 });
                    self.accumulate(a, grad * mask);
                }
                Op::SoftmaxRows(a) => {
                    let y = &self.nodes[i].value;
                    let mut dx = grad.clone();
                    for (mut drow, yrow) in dx.rows_mut().into_iter().zip(y.rows()) {
                        let dot: f64 = drow.iter().zip(yrow.iter()).map(|(d, y)| d * y).sum();
                        for (d, &yv) in drow.iter_mut().zip(yrow.iter()) {
                            *d = yv * (*d - dot);
                        }
                    }
                    self.accumulate(a, dx);
                }
                Op::LayerNormRows { x, gain, bias, eps } => {
                    let xv = self.nodes[x.0].value.clone();
                    let g = self.nodes[gain.0].value.clone();
                    let n = xv.ncols() as f64;

                    // Recompute per-row normalization.
                    let mut xhat = xv.clone();
                    let mut inv_s = Vec::with_capacity(xv.nrows());
                    for mut row in xhat.rows_mut() {
                        let mean = row.sum() / n;
                        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
                        let s = (var + eps).sqrt();
                        inv_s.push(1.0 / s);
                        row.mapv_inplace(|v| (v - mean) / s);
                    }

                    let dgain = (&grad * &xhat).sum_axis(Axis(0)).insert_axis(Axis(0));
                    let dbias = grad.sum_axis(Axis(0)).insert_axis(Axis(0));
                    let dxhat = &grad * &g;
                    let mut dx = dxhat.clone();
                    for (r, mut drow) in dx.rows_mut().into_iter().enumerate() {
                        let dxh = dxhat.row(r);
                        let xh = xhat.row(r);
                        let mean_dxh = dxh.sum() / n;
                        let mean_dxh_xh: f64 =
                            dxh.iter().zip(xh.iter()).map(|(a, b)| a * b).sum::<f64>() / n;
                        for (j, d) in drow.iter_mut().enumerate() {
                            *d = inv_s[r] * (dxh[j] - mean_dxh - xh[j] * mean_dxh_xh);
                        }
                    }
                    self.accumulate(x, dx);
                    self.accumulate(gain, dgain);
                    self.accumulate(bias, dbias);
                }
                Op::Embed { table, ref ids } => {
                    let ids = ids.clone();
                    let mut dt = Array2::zeros(self.nodes[table.0].value.dim());
                    for (row, &id) in ids.iter().enumerate() {
                        let mut slot = dt.row_mut(id);
                        slot += &grad.row(row);
                    }
                    self.accumulate(table, dt);
                }
                Op::MeanRows { x, ref rows } => {
                    let rows = rows.clone();
                    let k = rows.len() as f64;
                    let mut dx = Array2::zeros(self.nodes[x.0].value.dim());
                    for &r in &rows {
                        let mut slot = dx.row_mut(r);
                        slot += &grad.row(0).mapv(|v| v / k);
                    }
                    self.accumulate(x, dx);
                }
                Op::SliceCols { x, from, to } => {
                    let mut dx = Array2::zeros(self.nodes[x.0].value.dim());
                    dx.slice_mut(ndarray::s![.., from..to]).assign(&grad);
                    self.accumulate(x, dx);
                }
                Op::ConcatCols(ref parts) => {
                    let parts = parts.clone();
                    let mut col = 0;
                    for p in parts {
                        let w = self.nodes[p.0].value.ncols();
                        let dp = grad.slice(ndarray::s![.., col..col + w]).to_owned();
                        self.accumulate(p, dp);
                        col += w;
                    }
                }
            }
        }
    }
}
