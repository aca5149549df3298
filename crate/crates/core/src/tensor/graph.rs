use super::{cross_entropy_rows, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`] tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Sum(Var),
    Ln(Var),
    Exp(Var),
    Reshape(Var),
    ColumnSoftmax(Var),
    ColumnLogSoftmax(Var),
    CrossEntropy { logits: Var, labels: Vec<usize>, probs: Tensor },
    PrefixRows(Var),
    PrefixCols(Var),
    GatherLevels { src: Var, levels: Vec<usize> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    grad: Option<Tensor>,
    op: Op,
}

/// Append-only tape. Nodes are stored in creation order, which is a
/// topological order, so backward is a single reverse sweep.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, grad: None, op });
        Var(self.nodes.len() - 1)
    }

    fn checked(&mut self, value: Tensor, op: Op, name: &str) -> Result<Var> {
        value.ensure_finite(name)?;
        Ok(self.push(value, op))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Accumulated gradient of `v`; zeros when no backward pass reached it.
    pub fn grad(&self, v: Var) -> Tensor {
        let node = &self.nodes[v.0];
        node.grad
            .clone()
            .unwrap_or_else(|| Tensor::zeros(node.value.shape()))
    }

    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        self.checked(out, Op::MatMul(a, b), "matmul")
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul_nt(self.value(b))?;
        self.checked(out, Op::MatMulNt(a, b), "matmul_nt")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).add(self.value(b))?;
        self.checked(out, Op::Add(a, b), "add")
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let out = self.value(a).add_row(self.value(row))?;
        self.checked(out, Op::AddRow(a, row), "add_row")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).mul(self.value(b))?;
        self.checked(out, Op::Mul(a, b), "mul")
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        let out = self.value(a).scale(factor);
        self.checked(out, Op::Scale(a, factor), "scale")
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).relu();
        Ok(self.push(out, Op::Relu(a)))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(a).sum());
        self.checked(out, Op::Sum(a), "sum")
    }

    pub fn ln(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(f64::ln);
        self.checked(out, Op::Ln(a), "ln")
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(f64::exp);
        self.checked(out, Op::Exp(a), "exp")
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).reshape(shape)?;
        Ok(self.push(out, Op::Reshape(a)))
    }

    pub fn column_softmax(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).column_softmax()?;
        self.checked(out, Op::ColumnSoftmax(a), "column_softmax")
    }

    pub fn column_log_softmax(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).column_log_softmax()?;
        self.checked(out, Op::ColumnLogSoftmax(a), "column_log_softmax")
    }

    /// Mean cross-entropy over the rows of `logits[b×k]`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (loss, probs) = cross_entropy_rows(self.value(logits), labels)?;
        let op = Op::CrossEntropy {
            logits,
            labels: labels.to_vec(),
            probs,
        };
        self.checked(Tensor::scalar(loss), op, "cross_entropy")
    }

    pub fn prefix_rows(&mut self, a: Var, rows: usize) -> Result<Var> {
        let out = self.value(a).prefix_rows(rows)?;
        Ok(self.push(out, Op::PrefixRows(a)))
    }

    pub fn prefix_cols(&mut self, a: Var, cols: usize) -> Result<Var> {
        let out = self.value(a).prefix_cols(cols)?;
        Ok(self.push(out, Op::PrefixCols(a)))
    }

    /// For `src[b×h×n]` and one level per column, returns the length-`b`
    /// vector `Σ_i src[s, levels[i], i]`.
    pub fn gather_levels(&mut self, src: Var, levels: &[usize]) -> Result<Var> {
        let value = self.value(src);
        let (b, h, n) = match value.shape() {
            [b, h, n] => (*b, *h, *n),
            s => return Err(Error::shape("gather_levels", s, &[levels.len()])),
        };
        if levels.len() != n {
            return Err(Error::shape("gather_levels", value.shape(), &[levels.len()]));
        }
        if let Some(&bad) = levels.iter().find(|&&l| l >= h) {
            return Err(Error::Index { index: bad, len: h });
        }
        let data = value.data();
        let out: Vec<f64> = (0..b)
            .map(|s| {
                levels
                    .iter()
                    .enumerate()
                    .map(|(i, &l)| data[s * h * n + l * n + i])
                    .sum()
            })
            .collect();
        let out = Tensor::new(vec![b], out)?;
        let op = Op::GatherLevels {
            src,
            levels: levels.to_vec(),
        };
        self.checked(out, op, "gather_levels")
    }

    /// Reverse sweep from a scalar root. Gradients add onto whatever earlier
    /// calls left behind; call [`Graph::zero_grad`] to reset.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.nodes[root.0].value.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward root must be scalar, got shape {:?}",
                self.nodes[root.0].value.shape()
            )));
        }
        let mut pending: Vec<Option<Tensor>> = vec![None; root.0 + 1];
        pending[root.0] = Some(Tensor::ones(self.nodes[root.0].value.shape()));

        for idx in (0..=root.0).rev() {
            let Some(g) = pending[idx].take() else {
                continue;
            };
            let contributions = self.local_backward(idx, &g)?;
            for (Var(p), contrib) in contributions {
                match &mut pending[p] {
                    Some(acc) => acc.add_assign(&contrib)?,
                    slot @ None => *slot = Some(contrib),
                }
            }
            let node = &mut self.nodes[idx];
            match &mut node.grad {
                Some(acc) => acc.add_assign(&g)?,
                slot @ None => *slot = Some(g),
            }
        }
        Ok(())
    }

    fn local_backward(&self, idx: usize, g: &Tensor) -> Result<Vec<(Var, Tensor)>> {
        let node = &self.nodes[idx];
        let val = |v: Var| &self.nodes[v.0].value;
        let out = match &node.op {
            Op::Leaf => Vec::new(),
            Op::MatMul(a, b) => vec![
                (*a, g.matmul_nt(val(*b))?),
                (*b, val(*a).matmul_tn(g)?),
            ],
            Op::MatMulNt(a, b) => vec![(*a, g.matmul(val(*b))?), (*b, g.matmul_tn(val(*a))?)],
            Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
            Op::AddRow(a, row) => {
                let cols = val(*row).numel();
                let mut gr = vec![0.0; cols];
                for chunk in g.data().chunks(cols) {
                    for (acc, &v) in gr.iter_mut().zip(chunk) {
                        *acc += v;
                    }
                }
                vec![(*a, g.clone()), (*row, Tensor::new(vec![cols], gr)?)]
            }
            Op::Mul(a, b) => vec![(*a, g.mul(val(*b))?), (*b, g.mul(val(*a))?)],
            Op::Scale(a, c) => vec![(*a, g.scale(*c))],
            Op::Relu(a) => {
                let x = val(*a);
                let data = g
                    .data()
                    .iter()
                    .zip(x.data())
                    .map(|(&gv, &xv)| if xv > 0.0 { gv } else { 0.0 })
                    .collect();
                vec![(*a, Tensor::new(x.shape().to_vec(), data)?)]
            }
            Op::Sum(a) => vec![(*a, Tensor::full(val(*a).shape(), g.item()?))],
            Op::Ln(a) => {
                let x = val(*a);
                let data = g.data().iter().zip(x.data()).map(|(&gv, &xv)| gv / xv).collect();
                vec![(*a, Tensor::new(x.shape().to_vec(), data)?)]
            }
            Op::Exp(a) => vec![(*a, g.mul(&node.value)?)],
            Op::Reshape(a) => vec![(*a, g.reshape(val(*a).shape())?)],
            Op::ColumnSoftmax(a) => {
                let y = &node.value;
                vec![(*a, column_apply(y, g, |ys, gs, out| {
                    let dotp: f64 = ys.iter().zip(gs.iter()).map(|(y, g)| y * g).sum();
                    for l in 0..ys.len() {
                        out[l] = ys[l] * (gs[l] - dotp);
                    }
                })?)]
            }
            Op::ColumnLogSoftmax(a) => {
                let lp = &node.value;
                vec![(*a, column_apply(lp, g, |ls, gs, out| {
                    let total: f64 = gs.iter().sum();
                    for l in 0..ls.len() {
                        out[l] = gs[l] - ls[l].exp() * total;
                    }
                })?)]
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let scale = g.item()? / labels.len() as f64;
                let k = probs.shape()[1];
                let mut data = probs.data().to_vec();
                for (r, &label) in labels.iter().enumerate() {
                    data[r * k + label] -= 1.0;
                }
                for v in &mut data {
                    *v *= scale;
                }
                vec![(*logits, Tensor::new(probs.shape().to_vec(), data)?)]
            }
            Op::PrefixRows(a) => {
                let src = val(*a);
                let mut data = vec![0.0; src.numel()];
                data[..g.numel()].copy_from_slice(g.data());
                vec![(*a, Tensor::new(src.shape().to_vec(), data)?)]
            }
            Op::PrefixCols(a) => {
                let src = val(*a);
                let (r, c) = (src.shape()[0], src.shape()[1]);
                let w = g.shape()[1];
                let mut data = vec![0.0; r * c];
                for i in 0..r {
                    data[i * c..i * c + w].copy_from_slice(&g.data()[i * w..(i + 1) * w]);
                }
                vec![(*a, Tensor::new(vec![r, c], data)?)]
            }
            Op::GatherLevels { src, levels } => {
                let shape = val(*src).shape();
                let (b, h, n) = (shape[0], shape[1], shape[2]);
                let mut data = vec![0.0; b * h * n];
                for s in 0..b {
                    for (i, &l) in levels.iter().enumerate() {
                        data[s * h * n + l * n + i] += g.data()[s];
                    }
                }
                vec![(*src, Tensor::new(shape.to_vec(), data)?)]
            }
        };
        Ok(out)
    }
}

/// Applies a per-column backward rule over `[h×n]` / `[b×h×n]` layouts.
fn column_apply(
    y: &Tensor,
    g: &Tensor,
    rule: impl Fn(&[f64], &[f64], &mut [f64]),
) -> Result<Tensor> {
    let (b, h, n) = match y.shape() {
        [h, n] => (1, *h, *n),
        [b, h, n] => (*b, *h, *n),
        s => return Err(Error::shape("column backward", s, g.shape())),
    };
    let mut out = vec![0.0; y.numel()];
    let mut ys = vec![0.0; h];
    let mut gs = vec![0.0; h];
    let mut col = vec![0.0; h];
    for s in 0..b {
        let base = s * h * n;
        for i in 0..n {
            for l in 0..h {
                ys[l] = y.data()[base + l * n + i];
                gs[l] = g.data()[base + l * n + i];
            }
            rule(&ys, &gs, &mut col);
            for l in 0..h {
                out[base + l * n + i] = col[l];
            }
        }
    }
    Tensor::new(y.shape().to_vec(), out)
}
