//! Reverse-mode automatic differentiation over dense 2-D `f64` arrays.
//!
//! A [`Graph`] is an append-only tape: every operation records its inputs and
//! its computed value, and [`Graph::backward`] walks the tape in reverse to
//! accumulate gradients. Leaves flagged `requires_grad = false` (frozen
//! parameters, masks, cached activations) receive no gradient storage and are
//! skipped during accumulation, so a mostly-frozen model costs little beyond
//! the gradient path that is actually live.
//!
//! Row/column conventions: activations are `n × d` (one row per position);
//! bias vectors are `1 × d` rows; scalars are `1 × 1`.

use ndarray::{Array2, Axis};

use crate::error::{Error, Result};

const SQRT_2: f64 = std::f64::consts::SQRT_2;
const INV_SQRT_2PI: f64 = 0.3989422804014326779399461;

fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / SQRT_2))
}

fn gelu_grad_scalar(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x / SQRT_2)) + x * INV_SQRT_2PI * (-0.5 * x * x).exp()
}

/// Handle to a node in one specific [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

enum Op {
    Leaf,
    Matmul(NodeId, NodeId),
    Transpose(NodeId),
    Add(NodeId, NodeId),
    /// Broadcast-add a `1 × m` row onto every row of an `n × m` input.
    AddRow(NodeId, NodeId),
    Scale(NodeId, f64),
    /// Elementwise product with a constant mask (no gradient into the mask).
    MulMask(NodeId, Array2<f64>),
    Gelu(NodeId),
    Relu(NodeId),
    SoftmaxRows(NodeId),
    LayerNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: f64,
    },
    GatherRows {
        table: NodeId,
        indices: Vec<usize>,
    },
    /// Place the rows of `src` at `rows` of an otherwise-zero `n × d` output.
    ScatterRows {
        src: NodeId,
        rows: Vec<usize>,
    },
    SliceCols {
        src: NodeId,
        start: usize,
        len: usize,
    },
    ConcatCols(Vec<NodeId>),
    ConcatRows(Vec<NodeId>),
    Reshape(NodeId),
    /// Sum of `logsumexp(row) − row[target]` over rows; `1 × 1` output.
    CrossEntropySum {
        logits: NodeId,
        targets: Vec<usize>,
        ignore: Option<usize>,
    },
}

struct Node {
    op: Op,
    value: Array2<f64>,
    requires_grad: bool,
}

/// Append-only computation tape.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients from one backward pass, indexed by the ids of the originating
/// graph. Nodes without gradient (frozen, or unreachable from the root)
/// report `None`.
pub struct Gradients {
    grads: Vec<Option<Array2<f64>>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Array2<f64>> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }
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

    pub fn value(&self, id: NodeId) -> &Array2<f64> {
        &self.nodes[id.0].value
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn shape(&self, id: NodeId) -> (usize, usize) {
        let v = &self.nodes[id.0].value;
        (v.nrows(), v.ncols())
    }

    fn push(&mut self, op: Op, value: Array2<f64>, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Array2<f64>, requires_grad: bool) -> NodeId {
        self.push(Op::Leaf, value, requires_grad)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ar, ac) = self.shape(a);
        let (br, bc) = self.shape(b);
        if ac != br {
            return Err(Error::Dimension {
                what: "matmul inner dimensions".into(),
                expected: format!("{ac}"),
                got: format!("{br} (left {ar}x{ac}, right {br}x{bc})"),
            });
        }
        let value = self.nodes[a.0].value.dot(&self.nodes[b.0].value);
        let rg = self.requires_grad(a) || self.requires_grad(b);
        Ok(self.push(Op::Matmul(a, b), value, rg))
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let value = self.nodes[a.0].value.t().to_owned();
        let rg = self.requires_grad(a);
        self.push(Op::Transpose(a), value, rg)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Dimension {
                what: "add operand shapes".into(),
                expected: format!("{:?}", self.shape(a)),
                got: format!("{:?}", self.shape(b)),
            });
        }
        let value = &self.nodes[a.0].value + &self.nodes[b.0].value;
        let rg = self.requires_grad(a) || self.requires_grad(b);
        Ok(self.push(Op::Add(a, b), value, rg))
    }

    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> Result<NodeId> {
        let (_, ac) = self.shape(a);
        let (rr, rc) = self.shape(row);
        if rr != 1 || rc != ac {
            return Err(Error::Dimension {
                what: "broadcast row".into(),
                expected: format!("1x{ac}"),
                got: format!("{rr}x{rc}"),
            });
        }
        let value = &self.nodes[a.0].value + &self.nodes[row.0].value;
        let rg = self.requires_grad(a) || self.requires_grad(row);
        Ok(self.push(Op::AddRow(a, row), value, rg))
    }

    pub fn scale(&mut self, a: NodeId, s: f64) -> NodeId {
        let value = &self.nodes[a.0].value * s;
        let rg = self.requires_grad(a);
        self.push(Op::Scale(a, s), value, rg)
    }

    pub fn mul_mask(&mut self, a: NodeId, mask: Array2<f64>) -> Result<NodeId> {
        if self.shape(a) != (mask.nrows(), mask.ncols()) {
            return Err(Error::Dimension {
                what: "mask shape".into(),
                expected: format!("{:?}", self.shape(a)),
                got: format!("({}, {})", mask.nrows(), mask.ncols()),
            });
        }
        let value = &self.nodes[a.0].value * &mask;
        let rg = self.requires_grad(a);
        Ok(self.push(Op::MulMask(a, mask), value, rg))
    }

    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        let value = self.nodes[a.0].value.mapv(gelu_scalar);
        let rg = self.requires_grad(a);
        self.push(Op::Gelu(a), value, rg)
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let value = self.nodes[a.0].value.mapv(|x| x.max(0.0));
        let rg = self.requires_grad(a);
        self.push(Op::Relu(a), value, rg)
    }

    pub fn softmax_rows(&mut self, a: NodeId) -> NodeId {
        let x = &self.nodes[a.0].value;
        let mut value = x.clone();
        for mut row in value.rows_mut() {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            row.mapv_inplace(|v| (v - max).exp());
            let sum: f64 = row.sum();
            row.mapv_inplace(|v| v / sum);
        }
        let rg = self.requires_grad(a);
        self.push(Op::SoftmaxRows(a), value, rg)
    }

    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, eps: f64) -> Result<NodeId> {
        let (_, d) = self.shape(x);
        for (name, id) in [("gamma", gamma), ("beta", beta)] {
            let (r, c) = self.shape(id);
            if r != 1 || c != d {
                return Err(Error::Dimension {
                    what: format!("layer-norm {name}"),
                    expected: format!("1x{d}"),
                    got: format!("{r}x{c}"),
                });
            }
        }
        let xv = &self.nodes[x.0].value;
        let g = &self.nodes[gamma.0].value;
        let b = &self.nodes[beta.0].value;
        let mut value = xv.clone();
        for mut row in value.rows_mut() {
            let mean = row.mean().unwrap();
            let var = row.mapv(|v| (v - mean) * (v - mean)).mean().unwrap();
            let denom = (var + eps).sqrt();
            for (j, v) in row.iter_mut().enumerate() {
                *v = g[[0, j]] * ((*v - mean) / denom) + b[[0, j]];
            }
        }
        let rg = self.requires_grad(x) || self.requires_grad(gamma) || self.requires_grad(beta);
        Ok(self.push(Op::LayerNorm { x, gamma, beta, eps }, value, rg))
    }

    pub fn gather_rows(&mut self, table: NodeId, indices: &[usize]) -> Result<NodeId> {
        let (rows, cols) = self.shape(table);
        for &i in indices {
            if i >= rows {
                return Err(Error::Range(format!(
                    "gather index {i} out of range for table with {rows} rows"
                )));
            }
        }
        let t = &self.nodes[table.0].value;
        let mut value = Array2::zeros((indices.len(), cols));
        for (out, &i) in indices.iter().enumerate() {
            value.row_mut(out).assign(&t.row(i));
        }
        let rg = self.requires_grad(table);
        Ok(self.push(
            Op::GatherRows {
                table,
                indices: indices.to_vec(),
            },
            value,
            rg,
        ))
    }

    pub fn scatter_rows(&mut self, src: NodeId, rows: &[usize], out_rows: usize) -> Result<NodeId> {
        let (sr, sc) = self.shape(src);
        if sr != rows.len() {
            return Err(Error::Dimension {
                what: "scatter row count".into(),
                expected: format!("{}", rows.len()),
                got: format!("{sr}"),
            });
        }
        let mut seen = std::collections::HashSet::new();
        for &r in rows {
            if r >= out_rows {
                return Err(Error::Range(format!(
                    "scatter target row {r} out of range for {out_rows} rows"
                )));
            }
            if !seen.insert(r) {
                return Err(Error::Range(format!("scatter target row {r} repeated")));
            }
        }
        let s = &self.nodes[src.0].value;
        let mut value = Array2::zeros((out_rows, sc));
        for (i, &r) in rows.iter().enumerate() {
            value.row_mut(r).assign(&s.row(i));
        }
        let rg = self.requires_grad(src);
        Ok(self.push(
            Op::ScatterRows {
                src,
                rows: rows.to_vec(),
            },
            value,
            rg,
        ))
    }

    pub fn slice_cols(&mut self, src: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let (_, cols) = self.shape(src);
        if start + len > cols {
            return Err(Error::Range(format!(
                "column slice {start}..{} out of range for width {cols}",
                start + len
            )));
        }
        let value = self.nodes[src.0]
            .value
            .slice(ndarray::s![.., start..start + len])
            .to_owned();
        let rg = self.requires_grad(src);
        Ok(self.push(Op::SliceCols { src, start, len }, value, rg))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::Range("concat of zero parts".into()));
        }
        let rows = self.shape(parts[0]).0;
        let mut total = 0;
        for &p in parts {
            let (r, c) = self.shape(p);
            if r != rows {
                return Err(Error::Dimension {
                    what: "concat-cols row count".into(),
                    expected: format!("{rows}"),
                    got: format!("{r}"),
                });
            }
            total += c;
        }
        let mut value = Array2::zeros((rows, total));
        let mut at = 0;
        for &p in parts {
            let v = &self.nodes[p.0].value;
            value
                .slice_mut(ndarray::s![.., at..at + v.ncols()])
                .assign(v);
            at += v.ncols();
        }
        let rg = parts.iter().any(|&p| self.requires_grad(p));
        Ok(self.push(Op::ConcatCols(parts.to_vec()), value, rg))
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::Range("concat of zero parts".into()));
        }
        let cols = self.shape(parts[0]).1;
        let mut total = 0;
        for &p in parts {
            let (r, c) = self.shape(p);
            if c != cols {
                return Err(Error::Dimension {
                    what: "concat-rows column count".into(),
                    expected: format!("{cols}"),
                    got: format!("{c}"),
                });
            }
            total += r;
        }
        let mut value = Array2::zeros((total, cols));
        let mut at = 0;
        for &p in parts {
            let v = &self.nodes[p.0].value;
            value
                .slice_mut(ndarray::s![at..at + v.nrows(), ..])
                .assign(v);
            at += v.nrows();
        }
        let rg = parts.iter().any(|&p| self.requires_grad(p));
        Ok(self.push(Op::ConcatRows(parts.to_vec()), value, rg))
    }

    pub fn reshape(&mut self, src: NodeId, rows: usize, cols: usize) -> Result<NodeId> {
        let (sr, sc) = self.shape(src);
        if sr * sc != rows * cols {
            return Err(Error::Dimension {
                what: "reshape element count".into(),
                expected: format!("{}", sr * sc),
                got: format!("{}", rows * cols),
            });
        }
        let flat: Vec<f64> = self.nodes[src.0].value.iter().cloned().collect();
        let value = Array2::from_shape_vec((rows, cols), flat).expect("checked element count");
        let rg = self.requires_grad(src);
        Ok(self.push(Op::Reshape(src), value, rg))
    }

    /// Negative log-likelihood summed over rows: `Σ logsumexp(zᵢ) − zᵢ[yᵢ]`.
    /// Rows whose target equals `ignore` contribute nothing.
    pub fn cross_entropy_sum(
        &mut self,
        logits: NodeId,
        targets: &[usize],
        ignore: Option<usize>,
    ) -> Result<NodeId> {
        let (rows, cols) = self.shape(logits);
        if targets.len() != rows {
            return Err(Error::Dimension {
                what: "cross-entropy target count".into(),
                expected: format!("{rows}"),
                got: format!("{}", targets.len()),
            });
        }
        for &t in targets {
            if t >= cols && Some(t) != ignore {
                return Err(Error::Range(format!(
                    "target id {t} out of range for vocabulary {cols}"
                )));
            }
        }
        let z = &self.nodes[logits.0].value;
        let mut loss = 0.0;
        for (i, &t) in targets.iter().enumerate() {
            if Some(t) == ignore {
                continue;
            }
            let row = z.row(i);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
            loss += lse - row[t];
        }
        let value = Array2::from_elem((1, 1), loss);
        let rg = self.requires_grad(logits);
        Ok(self.push(
            Op::CrossEntropySum {
                logits,
                targets: targets.to_vec(),
                ignore,
            },
            value,
            rg,
        ))
    }

    /// Reverse pass from a `1 × 1` root. Only nodes reachable from the root
    /// with `requires_grad` set receive gradients.
    pub fn backward(&self, root: NodeId) -> Result<Gradients> {
        if self.shape(root) != (1, 1) {
            return Err(Error::Dimension {
                what: "backward root".into(),
                expected: "1x1".into(),
                got: format!("{:?}", self.shape(root)),
            });
        }
        if !self.requires_grad(root) {
            return Err(Error::GradCheck(
                "backward root does not depend on any trainable leaf".into(),
            ));
        }
        let mut grads: Vec<Option<Array2<f64>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(Array2::from_elem((1, 1), 1.0));

        for idx in (0..=root.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let g = match grads[idx].take() {
                Some(g) => g,
                None => continue,
            };
            self.accumulate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn add_grad(&self, grads: &mut [Option<Array2<f64>>], id: NodeId, delta: Array2<f64>) {
        if !self.nodes[id.0].requires_grad {
            return;
        }
        match &mut grads[id.0] {
            Some(g) => *g += &delta,
            slot => *slot = Some(delta),
        }
    }

    fn accumulate(&self, idx: usize, g: &Array2<f64>, grads: &mut [Option<Array2<f64>>]) {
        match &self.nodes[idx].op {
            Op::Leaf => {}
            Op::Matmul(a, b) => {
                if self.nodes[a.0].requires_grad {
                    let db = self.nodes[b.0].value.t();
                    self.add_grad(grads, *a, g.dot(&db));
                }
                if self.nodes[b.0].requires_grad {
                    let da = self.nodes[a.0].value.t();
                    self.add_grad(grads, *b, da.dot(g));
                }
            }
            Op::Transpose(a) => self.add_grad(grads, *a, g.t().to_owned()),
            Op::Add(a, b) => {
                self.add_grad(grads, *a, g.clone());
                self.add_grad(grads, *b, g.clone());
            }
            Op::AddRow(a, row) => {
                self.add_grad(grads, *a, g.clone());
                if self.nodes[row.0].requires_grad {
                    let summed = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    self.add_grad(grads, *row, summed);
                }
            }
            Op::Scale(a, s) => self.add_grad(grads, *a, g * *s),
            Op::MulMask(a, mask) => self.add_grad(grads, *a, g * mask),
            Op::Gelu(a) => {
                let x = &self.nodes[a.0].value;
                self.add_grad(grads, *a, g * &x.mapv(gelu_grad_scalar));
            }
            Op::Relu(a) => {
                let x = &self.nodes[a.0].value;
                self.add_grad(grads, *a, g * &x.mapv(|v| if v > 0.0 { 1.0 } else { 0.0 }));
            }
            Op::SoftmaxRows(a) => {
                let y = &self.nodes[idx].value;
                let mut da = g * y;
                for (mut row, yrow) in da.rows_mut().into_iter().zip(y.rows()) {
                    let dot: f64 = row.sum();
                    for (v, &yv) in row.iter_mut().zip(yrow.iter()) {
                        *v -= dot * yv;
                    }
                }
                self.add_grad(grads, *a, da);
            }
            Op::LayerNorm { x, gamma, beta, eps } => {
                let xv = &self.nodes[x.0].value;
                let gv = &self.nodes[gamma.0].value;
                let d = xv.ncols() as f64;
                let mut dx = Array2::zeros(xv.raw_dim());
                let mut dgamma = Array2::zeros((1, xv.ncols()));
                let mut dbeta = Array2::zeros((1, xv.ncols()));
                for (i, row) in xv.rows().into_iter().enumerate() {
                    let mean = row.mean().unwrap();
                    let var = row.mapv(|v| (v - mean) * (v - mean)).mean().unwrap();
                    let denom = (var + eps).sqrt();
                    let xhat: Vec<f64> = row.iter().map(|&v| (v - mean) / denom).collect();
                    let grow = g.row(i);
                    let mut mean_dxhat = 0.0;
                    let mut mean_dxhat_xhat = 0.0;
                    for j in 0..xv.ncols() {
                        let dxh = grow[j] * gv[[0, j]];
                        mean_dxhat += dxh;
                        mean_dxhat_xhat += dxh * xhat[j];
                        dgamma[[0, j]] += grow[j] * xhat[j];
                        dbeta[[0, j]] += grow[j];
                    }
                    mean_dxhat /= d;
                    mean_dxhat_xhat /= d;
                    for j in 0..xv.ncols() {
                        let dxh = grow[j] * gv[[0, j]];
                        dx[[i, j]] = (dxh - mean_dxhat - xhat[j] * mean_dxhat_xhat) / denom;
                    }
                }
                self.add_grad(grads, *x, dx);
                self.add_grad(grads, *gamma, dgamma);
                self.add_grad(grads, *beta, dbeta);
            }
            Op::GatherRows { table, indices } => {
                if self.nodes[table.0].requires_grad {
                    let (rows, cols) = self.shape(*table);
                    let mut dt = Array2::zeros((rows, cols));
                    for (out, &i) in indices.iter().enumerate() {
                        let mut target = dt.row_mut(i);
                        target += &g.row(out);
                    }
                    self.add_grad(grads, *table, dt);
                }
            }
            Op::ScatterRows { src, rows } => {
                if self.nodes[src.0].requires_grad {
                    let cols = g.ncols();
                    let mut ds = Array2::zeros((rows.len(), cols));
                    for (i, &r) in rows.iter().enumerate() {
                        ds.row_mut(i).assign(&g.row(r));
                    }
                    self.add_grad(grads, *src, ds);
                }
            }
            Op::SliceCols { src, start, len } => {
                if self.nodes[src.0].requires_grad {
                    let (rows, cols) = self.shape(*src);
                    let mut ds = Array2::zeros((rows, cols));
                    ds.slice_mut(ndarray::s![.., *start..*start + *len]).assign(g);
                    self.add_grad(grads, *src, ds);
                }
            }
            Op::ConcatCols(parts) => {
                let mut at = 0;
                for &p in parts {
                    let w = self.shape(p).1;
                    if self.nodes[p.0].requires_grad {
                        let slice = g.slice(ndarray::s![.., at..at + w]).to_owned();
                        self.add_grad(grads, p, slice);
                    }
                    at += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut at = 0;
                for &p in parts {
                    let h = self.shape(p).0;
                    if self.nodes[p.0].requires_grad {
                        let slice = g.slice(ndarray::s![at..at + h, ..]).to_owned();
                        self.add_grad(grads, p, slice);
                    }
                    at += h;
                }
            }
            Op::Reshape(src) => {
                if self.nodes[src.0].requires_grad {
                    let (sr, sc) = self.shape(*src);
                    let flat: Vec<f64> = g.iter().cloned().collect();
                    let back = Array2::from_shape_vec((sr, sc), flat).expect("same element count");
                    self.add_grad(grads, *src, back);
                }
            }
            Op::CrossEntropySum {
                logits,
                targets,
                ignore,
            } => {
                if self.nodes[logits.0].requires_grad {
                    let z = &self.nodes[logits.0].value;
                    let scale = g[[0, 0]];
                    let mut dz = Array2::zeros(z.raw_dim());
                    for (i, &t) in targets.iter().enumerate() {
                        if Some(t) == *ignore {
                            continue;
                        }
                        let row = z.row(i);
                        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                        let exps: Vec<f64> = row.iter().map(|&v| (v - max).exp()).collect();
                        let sum: f64 = exps.iter().sum();
                        for (j, e) in exps.iter().enumerate() {
                            dz[[i, j]] = scale * (e / sum - if j == t { 1.0 } else { 0.0 });
                        }
                    }
                    self.add_grad(grads, *logits, dz);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Array2<f64> {
        Array2::from_shape_fn((r, c), |_| rng.gen_range(-1.0..1.0))
    }

    /// Central finite differences against the analytic gradient for a scalar
    /// function of several leaf matrices.
    fn fd_check<F>(inputs: &[Array2<f64>], build: F)
    where
        F: Fn(&mut Graph, &[NodeId]) -> NodeId,
    {
        let eval = |mats: &[Array2<f64>]| -> f64 {
            let mut g = Graph::new();
            let ids: Vec<NodeId> = mats.iter().map(|m| g.leaf(m.clone(), true)).collect();
            let root = build(&mut g, &ids);
            g.value(root)[[0, 0]]
        };
        let mut g = Graph::new();
        let ids: Vec<NodeId> = inputs.iter().map(|m| g.leaf(m.clone(), true)).collect();
        let root = build(&mut g, &ids);
        let grads = g.backward(root).unwrap();

        let eps = 1e-5;
        for (which, input) in inputs.iter().enumerate() {
            let analytic = grads
                .get(ids[which])
                .unwrap_or_else(|| panic!("input {which} missing gradient"));
            for i in 0..input.nrows() {
                for j in 0..input.ncols() {
                    let mut plus = inputs.to_vec();
                    plus[which][[i, j]] += eps;
                    let mut minus = inputs.to_vec();
                    minus[which][[i, j]] -= eps;
                    let fd = (eval(&plus) - eval(&minus)) / (2.0 * eps);
                    let an = analytic[[i, j]];
                    let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-8);
                    assert!(
                        rel < 1e-5,
                        "input {which} coord ({i},{j}): analytic {an}, finite-diff {fd}, rel {rel}"
                    );
                }
            }
        }
    }

    /// Reduce an arbitrary matrix node to a scalar with fixed pseudo-random
    /// weights, so gradients stay coordinate-dependent.
    fn scalarize(g: &mut Graph, id: NodeId) -> NodeId {
        let (r, c) = (g.value(id).nrows(), g.value(id).ncols());
        let mut rng = ChaCha8Rng::seed_from_u64(0xD00D);
        let left = random_matrix(&mut rng, 1, r);
        let right = random_matrix(&mut rng, c, 1);
        let l = g.leaf(left, false);
        let rgt = g.leaf(right, false);
        let lr = g.matmul(l, id).unwrap();
        g.matmul(lr, rgt).unwrap()
    }

    #[test]
    fn matmul_chain_matches_finite_difference() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = random_matrix(&mut rng, 3, 4);
        let b = random_matrix(&mut rng, 4, 2);
        fd_check(&[a, b], |g, ids| {
            let m = g.matmul(ids[0], ids[1]).unwrap();
            scalarize(g, m)
        });
    }

    #[test]
    fn matmul_rejects_mismatched_shapes() {
        let mut g = Graph::new();
        let a = g.leaf(Array2::zeros((2, 3)), true);
        let b = g.leaf(Array2::zeros((4, 2)), true);
        assert!(matches!(g.matmul(a, b), Err(Error::Dimension { .. })));
    }

    #[test]
    fn add_and_bias_row_match_finite_difference() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = random_matrix(&mut rng, 3, 4);
        let b = random_matrix(&mut rng, 3, 4);
        let bias = random_matrix(&mut rng, 1, 4);
        fd_check(&[a, b, bias], |g, ids| {
            let s = g.add(ids[0], ids[1]).unwrap();
            let s = g.add_row(s, ids[2]).unwrap();
            scalarize(g, s)
        });
    }

    #[test]
    fn transpose_scale_match_finite_difference() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = random_matrix(&mut rng, 2, 5);
        fd_check(&[a], |g, ids| {
            let t = g.transpose(ids[0]);
            let s = g.scale(t, -1.7);
            scalarize(g, s)
        });
    }

    #[test]
    fn gelu_value_and_gradient() {
        let mut g = Graph::new();
        let x = g.leaf(Array2::from_elem((1, 2), 1.0), true);
        let y = g.gelu(x);
        // 0.5 · (1 + erf(1/√2)) = 0.8413447460685429…
        assert!((g.value(y)[[0, 0]] - 0.84134474606854294859).abs() < 1e-12);

        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = random_matrix(&mut rng, 3, 3);
        fd_check(&[a], |g, ids| {
            let y = g.gelu(ids[0]);
            scalarize(g, y)
        });
    }

    #[test]
    fn relu_gradient_away_from_kink() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut a = random_matrix(&mut rng, 3, 3);
        a.mapv_inplace(|v| if v.abs() < 0.2 { v + 0.5 } else { v });
        fd_check(&[a], |g, ids| {
            let y = g.relu(ids[0]);
            scalarize(g, y)
        });
    }

    #[test]
    fn softmax_rows_sum_to_one_and_differentiate() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let a = random_matrix(&mut rng, 4, 5);
        let mut g = Graph::new();
        let x = g.leaf(a.clone(), true);
        let y = g.softmax_rows(x);
        for row in g.value(y).rows() {
            assert!((row.sum() - 1.0).abs() < 1e-9);
        }
        fd_check(&[a], |g, ids| {
            let y = g.softmax_rows(ids[0]);
            scalarize(g, y)
        });
    }

    #[test]
    fn masked_softmax_zeroes_excluded_columns_without_nan() {
        let mut g = Graph::new();
        let scores = g.leaf(Array2::from_elem((2, 3), 0.5), true);
        let mask = {
            let mut m = Array2::zeros((2, 3));
            m[[0, 2]] = -1e30;
            g.leaf(m, false)
        };
        let masked = g.add(scores, mask).unwrap();
        let probs = g.softmax_rows(masked);
        assert!(g.value(probs)[[0, 2]].abs() < 1e-300);
        assert!((g.value(probs)[[0, 0]] - 0.5).abs() < 1e-12);
        let root = {
            let s = scalarize(&mut g, probs);
            s
        };
        let grads = g.backward(root).unwrap();
        let dz = grads.get(scores).unwrap();
        assert!(dz.iter().all(|v| v.is_finite()));
        assert_eq!(dz[[0, 2]], 0.0, "masked column receives zero gradient");
    }

    #[test]
    fn layer_norm_normalizes_and_differentiates() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = random_matrix(&mut rng, 3, 6);
        let mut g = Graph::new();
        let x = g.leaf(a.clone(), true);
        let gamma = g.leaf(Array2::ones((1, 6)), false);
        let beta = g.leaf(Array2::zeros((1, 6)), false);
        let y = g.layer_norm(x, gamma, beta, 1e-6).unwrap();
        for row in g.value(y).rows() {
            let mean: f64 = row.mean().unwrap();
            let var: f64 = row.mapv(|v| (v - mean) * (v - mean)).mean().unwrap();
            assert!(mean.abs() < 1e-9);
            assert!((var - 1.0).abs() < 1e-4);
        }
        let gamma_v = random_matrix(&mut rng, 1, 6);
        let beta_v = random_matrix(&mut rng, 1, 6);
        fd_check(&[a, gamma_v, beta_v], |g, ids| {
            let y = g.layer_norm(ids[0], ids[1], ids[2], 1e-6).unwrap();
            scalarize(g, y)
        });
    }

    #[test]
    fn gather_rows_scatter_add_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let table = random_matrix(&mut rng, 5, 3);
        // Index 2 repeats: its gradient row must be the sum of both uses.
        fd_check(&[table], |g, ids| {
            let rows = g.gather_rows(ids[0], &[2, 0, 2, 4]).unwrap();
            scalarize(g, rows)
        });
    }

    #[test]
    fn scatter_rows_places_and_backpropagates() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let src = random_matrix(&mut rng, 2, 3);
        let mut g = Graph::new();
        let s = g.leaf(src.clone(), true);
        let y = g.scatter_rows(s, &[3, 1], 5).unwrap();
        assert_eq!(g.value(y).row(3).to_owned(), src.row(0).to_owned());
        assert_eq!(g.value(y).row(0).sum(), 0.0);
        fd_check(&[src], |g, ids| {
            let y = g.scatter_rows(ids[0], &[3, 1], 5).unwrap();
            scalarize(g, y)
        });
    }

    #[test]
    fn scatter_rejects_duplicate_rows() {
        let mut g = Graph::new();
        let s = g.leaf(Array2::zeros((2, 2)), true);
        assert!(g.scatter_rows(s, &[1, 1], 4).is_err());
    }

    #[test]
    fn slice_concat_reshape_match_finite_difference() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let a = random_matrix(&mut rng, 3, 6);
        fd_check(&[a], |g, ids| {
            let left = g.slice_cols(ids[0], 0, 3).unwrap();
            let right = g.slice_cols(ids[0], 3, 3).unwrap();
            let swapped = g.concat_cols(&[right, left]).unwrap();
            let tall = g.reshape(swapped, 6, 3).unwrap();
            let wide = g.concat_rows(&[tall]).unwrap();
            scalarize(g, wide)
        });
    }

    #[test]
    fn mul_mask_matches_finite_difference() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a = random_matrix(&mut rng, 3, 4);
        let mask = Array2::from_shape_fn((3, 4), |(i, j)| ((i + j) % 2) as f64);
        fd_check(&[a], move |g, ids| {
            let y = g.mul_mask(ids[0], mask.clone()).unwrap();
            scalarize(g, y)
        });
    }

    #[test]
    fn cross_entropy_uniform_logits_value() {
        // Uniform logits over V=4, three targets: loss = 3·ln 4.
        let mut g = Graph::new();
        let z = g.leaf(Array2::zeros((3, 4)), true);
        let loss = g.cross_entropy_sum(z, &[0, 1, 2], None).unwrap();
        assert!((g.value(loss)[[0, 0]] - 4.1588830833596718565).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_perfect_prediction_is_tiny() {
        let mut z = Array2::zeros((2, 3));
        z[[0, 1]] = 40.0;
        z[[1, 2]] = 40.0;
        let mut g = Graph::new();
        let zl = g.leaf(z, true);
        let loss = g.cross_entropy_sum(zl, &[1, 2], None).unwrap();
        assert!(g.value(loss)[[0, 0]] <= 1e-9);
    }

    #[test]
    fn cross_entropy_matches_logsumexp_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let z = random_matrix(&mut rng, 4, 6);
        let targets = [3usize, 0, 5, 2];
        let mut g = Graph::new();
        let zl = g.leaf(z.clone(), true);
        let loss = g.cross_entropy_sum(zl, &targets, None).unwrap();
        let mut oracle = 0.0;
        for (i, &t) in targets.iter().enumerate() {
            let row = z.row(i);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
            oracle += lse - row[t];
        }
        assert!((g.value(loss)[[0, 0]] - oracle).abs() < 1e-12);
        fd_check(&[z], |g, ids| {
            g.cross_entropy_sum(ids[0], &targets, None).unwrap()
        });
    }

    #[test]
    fn cross_entropy_ignores_pad_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let z = random_matrix(&mut rng, 3, 4);
        let mut g = Graph::new();
        let zl = g.leaf(z.clone(), true);
        let with_pad = g.cross_entropy_sum(zl, &[1, 0, 2], Some(0)).unwrap();
        // Oracle: drop the ignored middle row entirely.
        let keep = [(0usize, 1usize), (2, 2)];
        let mut oracle = 0.0;
        for &(i, t) in &keep {
            let row = z.row(i);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
            oracle += lse - row[t];
        }
        assert!((g.value(with_pad)[[0, 0]] - oracle).abs() < 1e-12);
        let grads = g.backward(with_pad).unwrap();
        let dz = grads.get(zl).unwrap();
        assert!(dz.row(1).iter().all(|&v| v == 0.0), "ignored row has zero gradient");
    }

    #[test]
    fn frozen_leaf_receives_no_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let a = random_matrix(&mut rng, 2, 3);
        let b = random_matrix(&mut rng, 3, 2);
        let mut g = Graph::new();
        let al = g.leaf(a, true);
        let bl = g.leaf(b, false);
        let m = g.matmul(al, bl).unwrap();
        let root = scalarize(&mut g, m);
        let grads = g.backward(root).unwrap();
        assert!(grads.get(al).is_some());
        assert!(grads.get(bl).is_none(), "frozen leaf must not be in the record");
    }

    #[test]
    fn backward_requires_scalar_root() {
        let mut g = Graph::new();
        let a = g.leaf(Array2::zeros((2, 2)), true);
        assert!(g.backward(a).is_err());
    }

    #[test]
    fn fan_out_accumulates_both_paths() {
        // y = a·a (shared input used twice) exercises gradient accumulation.
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let a = random_matrix(&mut rng, 3, 3);
        fd_check(&[a], |g, ids| {
            let m = g.matmul(ids[0], ids[0]).unwrap();
            scalarize(g, m)
        });
    }
}
