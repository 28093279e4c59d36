use ndarray::{s, Axis};

use super::ops::{sigmoid, softmax_rows, PROB_FLOOR};
use super::{dims, ensure_finite, Mask, NumArray, ParamId, ParamStore, Result, TensorError};

const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a node on a [`Graph`] tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    /// `a · bᵀ`
    MatMulT(Var, Var),
    Add(Var, Var),
    /// `a + b` with `b` a single row broadcast over rows of `a`.
    AddRow(Var, Var),
    /// `a * b` with `b` either `rows × 1` or `1 × 1`, broadcast over columns.
    MulBroadcast(Var, Var),
    Scale(Var, f64),
    OneMinus(Var),
    Relu(Var),
    Sigmoid(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: NumArray,
        inv_std: Vec<f64>,
    },
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    ScatterCols {
        x: Var,
        ids: Vec<usize>,
    },
    PadCols(Var),
    NegLogPick {
        p: Var,
        gold: Vec<usize>,
    },
    Sum(Var),
}

#[derive(Debug)]
struct Node {
    op: Op,
    /// `None` for parameters, whose value lives in the store.
    value: Option<NumArray>,
}

/// Tape of operations over one forward pass.
///
/// Parameters are borrowed from the [`ParamStore`] rather than copied, so a
/// graph is cheap to build per example and can be dropped after
/// [`Graph::backward`].
pub struct Graph<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
    param_vars: Vec<Option<Var>>,
}

/// Per-parameter gradients produced by [`Graph::backward`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    grads: Vec<Option<NumArray>>,
}

impl Gradients {
    pub fn get(&self, id: ParamId) -> Option<&NumArray> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &NumArray)> {
        self.grads
            .iter()
            .enumerate()
            .filter_map(|(i, g)| g.as_ref().map(|g| (ParamId(i), g)))
    }
}

fn mismatch(op: &'static str, a: &NumArray, b: &NumArray) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        left: dims(a),
        right: dims(b),
    }
}

fn accumulate(slot: &mut Option<NumArray>, g: NumArray) {
    match slot {
        Some(existing) => *existing += &g,
        None => *slot = Some(g),
    }
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Self {
            params,
            nodes: Vec::new(),
            param_vars: vec![None; params.len()],
        }
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &NumArray {
        let node = &self.nodes[v.0];
        match (&node.op, &node.value) {
            (_, Some(value)) => value,
            (Op::Param(id), None) => self.params.value(*id),
            _ => unreachable!("non-parameter node without a value"),
        }
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v)[[0, 0]]
    }

    fn push(&mut self, op: Op, value: NumArray, name: &'static str) -> Result<Var> {
        ensure_finite(name, &value)?;
        self.nodes.push(Node {
            op,
            value: Some(value),
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn constant(&mut self, value: NumArray) -> Result<Var> {
        self.push(Op::Leaf, value, "constant")
    }

    /// Node for a stored parameter; repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.0] {
            return v;
        }
        self.nodes.push(Node {
            op: Op::Param(id),
            value: None,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars[id.0] = Some(v);
        v
    }

    pub fn param_named(&mut self, name: &str) -> Result<Var> {
        let id = self.params.id(name)?;
        Ok(self.param(id))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if x.ncols() != y.nrows() {
            return Err(mismatch("matmul", x, y));
        }
        let out = x.dot(y);
        self.push(Op::MatMul(a, b), out, "matmul")
    }

    /// `a · bᵀ`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if x.ncols() != y.ncols() {
            return Err(mismatch("matmul_t", x, y));
        }
        let out = x.dot(&y.t());
        self.push(Op::MatMulT(a, b), out, "matmul_t")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if x.dim() != y.dim() {
            return Err(mismatch("add", x, y));
        }
        let out = x + y;
        self.push(Op::Add(a, b), out, "add")
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(row));
        if y.nrows() != 1 || x.ncols() != y.ncols() {
            return Err(mismatch("add_row", x, y));
        }
        let out = x + y;
        self.push(Op::AddRow(a, row), out, "add_row")
    }

    /// Multiplies each row of `a` by the matching entry of the column `b`
    /// (`rows × 1`), or every entry by `b` when it is `1 × 1`.
    pub fn mul_broadcast(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        let ok = y.ncols() == 1 && (y.nrows() == 1 || y.nrows() == x.nrows());
        if !ok {
            return Err(mismatch("mul_broadcast", x, y));
        }
        let out = x * y;
        self.push(Op::MulBroadcast(a, b), out, "mul_broadcast")
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        let out = self.value(a) * factor;
        self.push(Op::Scale(a, factor), out, "scale")
    }

    pub fn one_minus(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).mapv(|v| 1.0 - v);
        self.push(Op::OneMinus(a), out, "one_minus")
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).mapv(|v| v.max(0.0));
        self.push(Op::Relu(a), out, "relu")
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).mapv(sigmoid);
        self.push(Op::Sigmoid(a), out, "sigmoid")
    }

    /// Row-wise softmax; entries where `mask` is `false` are exactly zero.
    pub fn softmax(&mut self, a: Var, mask: Option<&Mask>) -> Result<Var> {
        let out = softmax_rows(self.value(a), mask)?;
        self.push(Op::Softmax(a), out, "softmax")
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let xv = self.value(x);
        let (g, b) = (self.value(gamma), self.value(beta));
        if g.dim() != (1, xv.ncols()) || b.dim() != (1, xv.ncols()) {
            return Err(mismatch("layer_norm", xv, g));
        }
        let n = xv.ncols() as f64;
        let mut xhat = NumArray::zeros(xv.dim());
        let mut inv_std = Vec::with_capacity(xv.nrows());
        for (row, mut out) in xv.axis_iter(Axis(0)).zip(xhat.axis_iter_mut(Axis(0))) {
            let mean = row.sum() / n;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            out.assign(&row.mapv(|v| (v - mean) * inv));
            inv_std.push(inv);
        }
        let out = &xhat * g + b;
        self.push(
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            out,
            "layer_norm",
        )
    }

    /// Selects rows of `table` by index.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let t = self.value(table);
        let mut out = NumArray::zeros((ids.len(), t.ncols()));
        for (r, &id) in ids.iter().enumerate() {
            if id >= t.nrows() {
                return Err(TensorError::IndexOutOfRange {
                    op: "gather",
                    index: id,
                    len: t.nrows(),
                });
            }
            out.row_mut(r).assign(&t.row(id));
        }
        self.push(
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            out,
            "gather",
        )
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xv = self.value(x);
        if start + len > xv.ncols() {
            return Err(TensorError::IndexOutOfRange {
                op: "slice_cols",
                index: start + len,
                len: xv.ncols(),
            });
        }
        let out = xv.slice(s![.., start..start + len]).to_owned();
        self.push(Op::SliceCols { x, start }, out, "slice_cols")
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let out =
            ndarray::concatenate(Axis(1), &views).map_err(|_| TensorError::ShapeMismatch {
                op: "concat_cols",
                left: views.first().map(|v| v.dim()).unwrap_or((0, 0)),
                right: views.last().map(|v| v.dim()).unwrap_or((0, 0)),
            })?;
        self.push(Op::ConcatCols(parts.to_vec()), out, "concat_cols")
    }

    /// `out[r, ids[c]] += x[r, c]` into `width` columns.
    pub fn scatter_cols(&mut self, x: Var, ids: &[usize], width: usize) -> Result<Var> {
        let xv = self.value(x);
        if ids.len() != xv.ncols() {
            return Err(TensorError::ShapeMismatch {
                op: "scatter_cols",
                left: xv.dim(),
                right: (1, ids.len()),
            });
        }
        let mut out = NumArray::zeros((xv.nrows(), width));
        for (c, &id) in ids.iter().enumerate() {
            if id >= width {
                return Err(TensorError::IndexOutOfRange {
                    op: "scatter_cols",
                    index: id,
                    len: width,
                });
            }
            for r in 0..xv.nrows() {
                out[[r, id]] += xv[[r, c]];
            }
        }
        self.push(
            Op::ScatterCols {
                x,
                ids: ids.to_vec(),
            },
            out,
            "scatter_cols",
        )
    }

    /// Right-pads `x` with zero columns up to `width`.
    pub fn pad_cols(&mut self, x: Var, width: usize) -> Result<Var> {
        let xv = self.value(x);
        if width < xv.ncols() {
            return Err(TensorError::IndexOutOfRange {
                op: "pad_cols",
                index: xv.ncols(),
                len: width,
            });
        }
        let mut out = NumArray::zeros((xv.nrows(), width));
        out.slice_mut(s![.., ..xv.ncols()]).assign(xv);
        self.push(Op::PadCols(x), out, "pad_cols")
    }

    /// Mean over rows of `-ln(max(p[r, gold[r]], 1e-12))`.
    pub fn neg_log_pick(&mut self, p: Var, gold: &[usize]) -> Result<Var> {
        let pv = self.value(p);
        if gold.len() != pv.nrows() || gold.is_empty() {
            return Err(TensorError::ShapeMismatch {
                op: "neg_log_pick",
                left: pv.dim(),
                right: (gold.len(), 1),
            });
        }
        let mut total = 0.0;
        for (r, &g) in gold.iter().enumerate() {
            if g >= pv.ncols() {
                return Err(TensorError::IndexOutOfRange {
                    op: "neg_log_pick",
                    index: g,
                    len: pv.ncols(),
                });
            }
            total -= pv[[r, g]].max(PROB_FLOOR).ln();
        }
        let out = NumArray::from_elem((1, 1), total / gold.len() as f64);
        self.push(
            Op::NegLogPick {
                p,
                gold: gold.to_vec(),
            },
            out,
            "neg_log_pick",
        )
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let out = NumArray::from_elem((1, 1), self.value(x).sum());
        self.push(Op::Sum(x), out, "sum")
    }

    /// Reverse pass from a `1 × 1` node. Parameters that do not influence
    /// `loss` get no entry (treat as zero).
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let shape = self.value(loss).dim();
        if shape != (1, 1) {
            return Err(TensorError::NotScalar(shape));
        }
        let mut adj: Vec<Option<NumArray>> = (0..=loss.0).map(|_| None).collect();
        let mut grads: Vec<Option<NumArray>> = vec![None; self.params.len()];
        adj[loss.0] = Some(NumArray::ones((1, 1)));

        for i in (0..=loss.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf => {}
                Op::Param(id) => accumulate(&mut grads[id.0], g),
                Op::MatMul(a, b) => {
                    let da = g.dot(&self.value(*b).t());
                    let db = self.value(*a).t().dot(&g);
                    accumulate(&mut adj[a.0], da);
                    accumulate(&mut adj[b.0], db);
                }
                Op::MatMulT(a, b) => {
                    let da = g.dot(self.value(*b));
                    let db = g.t().dot(self.value(*a));
                    accumulate(&mut adj[a.0], da);
                    accumulate(&mut adj[b.0], db);
                }
                Op::Add(a, b) => {
                    accumulate(&mut adj[b.0], g.clone());
                    accumulate(&mut adj[a.0], g);
                }
                Op::AddRow(a, row) => {
                    let dr = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    accumulate(&mut adj[row.0], dr);
                    accumulate(&mut adj[a.0], g);
                }
                Op::MulBroadcast(a, b) => {
                    let (x, y) = (self.value(*a), self.value(*b));
                    let prod = &g * x;
                    let db = if y.nrows() == 1 {
                        NumArray::from_elem((1, 1), prod.sum())
                    } else {
                        prod.sum_axis(Axis(1)).insert_axis(Axis(1))
                    };
                    accumulate(&mut adj[a.0], &g * y);
                    accumulate(&mut adj[b.0], db);
                }
                Op::Scale(a, f) => accumulate(&mut adj[a.0], g * *f),
                Op::OneMinus(a) => accumulate(&mut adj[a.0], -g),
                Op::Relu(a) => {
                    let x = self.value(*a);
                    let mut d = g;
                    ndarray::Zip::from(&mut d).and(x).for_each(|d, &x| {
                        if x <= 0.0 {
                            *d = 0.0;
                        }
                    });
                    accumulate(&mut adj[a.0], d);
                }
                Op::Sigmoid(a) => {
                    let y = node.value.as_ref().expect("sigmoid value");
                    let d = &g * &y.mapv(|y| y * (1.0 - y));
                    accumulate(&mut adj[a.0], d);
                }
                Op::Softmax(a) => {
                    let y = node.value.as_ref().expect("softmax value");
                    let gy = &g * y;
                    let dots = gy.sum_axis(Axis(1)).insert_axis(Axis(1));
                    let d = y * &(&g - &dots);
                    accumulate(&mut adj[a.0], d);
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                } => {
                    let gam = self.value(*gamma);
                    let dgamma = (&g * xhat).sum_axis(Axis(0)).insert_axis(Axis(0));
                    let dbeta = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    let dxhat = &g * gam;
                    let n = xhat.ncols() as f64;
                    let mut dx = NumArray::zeros(xhat.dim());
                    for r in 0..xhat.nrows() {
                        let dh = dxhat.row(r);
                        let xh = xhat.row(r);
                        let mean_dh = dh.sum() / n;
                        let mean_dh_xh = dh.dot(&xh) / n;
                        let inv = inv_std[r];
                        for c in 0..xhat.ncols() {
                            dx[[r, c]] = inv * (dh[c] - mean_dh - xh[c] * mean_dh_xh);
                        }
                    }
                    accumulate(&mut adj[gamma.0], dgamma);
                    accumulate(&mut adj[beta.0], dbeta);
                    accumulate(&mut adj[x.0], dx);
                }
                Op::Gather { table, ids } => {
                    let mut d = NumArray::zeros(self.value(*table).dim());
                    for (r, &id) in ids.iter().enumerate() {
                        let mut dst = d.row_mut(id);
                        dst += &g.row(r);
                    }
                    accumulate(&mut adj[table.0], d);
                }
                Op::SliceCols { x, start } => {
                    let mut d = NumArray::zeros(self.value(*x).dim());
                    d.slice_mut(s![.., *start..*start + g.ncols()]).assign(&g);
                    accumulate(&mut adj[x.0], d);
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let w = self.value(*p).ncols();
                        let d = g.slice(s![.., offset..offset + w]).to_owned();
                        accumulate(&mut adj[p.0], d);
                        offset += w;
                    }
                }
                Op::ScatterCols { x, ids } => {
                    let mut d = NumArray::zeros(self.value(*x).dim());
                    for (c, &id) in ids.iter().enumerate() {
                        d.column_mut(c).assign(&g.column(id));
                    }
                    accumulate(&mut adj[x.0], d);
                }
                Op::PadCols(x) => {
                    let w = self.value(*x).ncols();
                    accumulate(&mut adj[x.0], g.slice(s![.., ..w]).to_owned());
                }
                Op::NegLogPick { p, gold } => {
                    let pv = self.value(*p);
                    let upstream = g[[0, 0]];
                    let n = gold.len() as f64;
                    let mut d = NumArray::zeros(pv.dim());
                    for (r, &k) in gold.iter().enumerate() {
                        let prob = pv[[r, k]];
                        if prob > PROB_FLOOR {
                            d[[r, k]] = -upstream / (n * prob);
                        }
                    }
                    accumulate(&mut adj[p.0], d);
                }
                Op::Sum(x) => {
                    let d = NumArray::from_elem(self.value(*x).dim(), g[[0, 0]]);
                    accumulate(&mut adj[x.0], d);
                }
            }
        }
        Ok(Gradients { grads })
    }
}
