use crate::error::{Error, Result};
use crate::tensor::matrix::Matrix;

/// Handle to a node on a [`Tape`].
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    ScaleConst(Var, f64),
    /// x * s where s is 1x1.
    MulScalar(Var, Var),
    Recip(Var),
    Relu(Var),
    /// x (T x d) + broadcast bias (1 x d).
    AddRowBroadcast(Var, Var),
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        eps: f64,
    },
    /// Mean negative log-softmax over non-ignored positions. `None` = ignored.
    CrossEntropy {
        logits: Var,
        targets: Vec<Option<usize>>,
    },
    /// Mean binary cross-entropy with logits against constant labels.
    BceWithLogits {
        logits: Var,
        labels: Matrix,
    },
    SumAll(Var),
    MeanRows(Var),
    ConcatRows(Vec<Var>),
    SliceRows {
        x: Var,
        start: usize,
        len: usize,
    },
    ConcatCols(Vec<Var>),
    SliceCols {
        x: Var,
        start: usize,
        len: usize,
    },
    GatherRows {
        table: Var,
        ids: Vec<usize>,
    },
    /// Row-wise L2 normalization.
    RowNormalize(Var),
    /// Column-wise max over rows: R x C -> 1 x C, gradient routed to the argmax.
    ColMax(Var),
}

struct Node {
    value: Matrix,
    grad: Matrix,
    op: Op,
}

/// Single-use computation graph. Nodes are appended in topological order;
/// `backward` walks them in reverse. Leaf gradients accumulate across
/// repeated backward calls until `zero_grad`.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    fn push(&mut self, value: Matrix, op: Op) -> Var {
        let grad = Matrix::zeros(value.rows, value.cols);
        self.nodes.push(Node { value, grad, op });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].grad
    }

    pub fn scalar(&self, v: Var) -> Result<f64> {
        let m = self.value(v);
        if m.rows != 1 || m.cols != 1 {
            return Err(Error::contract(format!(
                "expected scalar, got {}x{}",
                m.rows, m.cols
            )));
        }
        Ok(m.data[0])
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad.data.fill(0.0);
        }
    }

    // ---- ops ----

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        Ok(self.push(out, Op::MatMul(a, b)))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let out = self.value(a).transpose();
        self.push(out, Op::Transpose(a))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).add(self.value(b))?;
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if !va.same_shape(vb) {
            return Err(Error::shape("sub: shape mismatch"));
        }
        let data = va.data.iter().zip(&vb.data).map(|(x, y)| x - y).collect();
        let out = Matrix {
            rows: va.rows,
            cols: va.cols,
            data,
        };
        Ok(self.push(out, Op::Sub(a, b)))
    }

    pub fn scale_const(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).scale(c);
        self.push(out, Op::ScaleConst(a, c))
    }

    pub fn mul_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        let sv = self.scalar(s)?;
        let out = self.value(x).scale(sv);
        Ok(self.push(out, Op::MulScalar(x, s)))
    }

    pub fn recip(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let out = Matrix {
            rows: v.rows,
            cols: v.cols,
            data: v.data.iter().map(|x| 1.0 / x).collect(),
        };
        self.push(out, Op::Recip(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let out = Matrix {
            rows: v.rows,
            cols: v.cols,
            data: v.data.iter().map(|x| x.max(0.0)).collect(),
        };
        self.push(out, Op::Relu(a))
    }

    pub fn add_row_broadcast(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (vx, vb) = (self.value(x), self.value(bias));
        if vb.rows != 1 || vb.cols != vx.cols {
            return Err(Error::shape(format!(
                "bias {}x{} does not broadcast over {}x{}",
                vb.rows, vb.cols, vx.rows, vx.cols
            )));
        }
        let mut out = vx.clone();
        for r in 0..out.rows {
            for c in 0..out.cols {
                out.data[r * out.cols + c] += vb.data[c];
            }
        }
        Ok(self.push(out, Op::AddRowBroadcast(x, bias)))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let mut out = Matrix::zeros(v.rows, v.cols);
        for r in 0..v.rows {
            let row = v.row(r);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for c in 0..v.cols {
                let e = (row[c] - max).exp();
                out.data[r * v.cols + c] = e;
                sum += e;
            }
            for c in 0..v.cols {
                out.data[r * v.cols + c] /= sum;
            }
        }
        self.push(out, Op::SoftmaxRows(a))
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (vx, vg, vb) = (self.value(x), self.value(gain), self.value(bias));
        if vg.rows != 1 || vg.cols != vx.cols || vb.rows != 1 || vb.cols != vx.cols {
            return Err(Error::shape(format!(
                "layer_norm gain/bias must be 1x{}",
                vx.cols
            )));
        }
        let d = vx.cols as f64;
        let mut out = Matrix::zeros(vx.rows, vx.cols);
        for r in 0..vx.rows {
            let row = vx.row(r);
            let mean = row.iter().sum::<f64>() / d;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
            let inv = 1.0 / (var + eps).sqrt();
            for c in 0..vx.cols {
                let xhat = (row[c] - mean) * inv;
                out.data[r * vx.cols + c] = xhat * vg.data[c] + vb.data[c];
            }
        }
        Ok(self.push(out, Op::LayerNorm { x, gain, bias, eps }))
    }

    /// Mean NLL over positions with `Some` target; `None` positions are ignored.
    pub fn cross_entropy(&mut self, logits: Var, targets: Vec<Option<usize>>) -> Result<Var> {
        let v = self.value(logits);
        if targets.len() != v.rows {
            return Err(Error::shape(format!(
                "targets length {} != rows {}",
                targets.len(),
                v.rows
            )));
        }
        for t in targets.iter().flatten() {
            if *t >= v.cols {
                return Err(Error::validation(format!(
                    "target {} out of range for vocab {}",
                    t, v.cols
                )));
            }
        }
        let kept = targets.iter().flatten().count();
        if kept == 0 {
            return Err(Error::validation("no non-ignored targets"));
        }
        let mut loss = 0.0;
        for (r, t) in targets.iter().enumerate() {
            if let Some(t) = t {
                let row = v.row(r);
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
                loss += lse - row[*t];
            }
        }
        let out = Matrix::from_vec(1, 1, vec![loss / kept as f64])?;
        Ok(self.push(out, Op::CrossEntropy { logits, targets }))
    }

    pub fn bce_with_logits(&mut self, logits: Var, labels: Matrix) -> Result<Var> {
        let v = self.value(logits);
        if !v.same_shape(&labels) {
            return Err(Error::shape("bce: labels shape mismatch"));
        }
        let n = v.data.len() as f64;
        let loss = v
            .data
            .iter()
            .zip(&labels.data)
            .map(|(&z, &y)| z.max(0.0) - z * y + (1.0 + (-z.abs()).exp()).ln())
            .sum::<f64>()
            / n;
        let out = Matrix::from_vec(1, 1, vec![loss])?;
        Ok(self.push(out, Op::BceWithLogits { logits, labels }))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        let out = Matrix {
            rows: 1,
            cols: 1,
            data: vec![s],
        };
        self.push(out, Op::SumAll(a))
    }

    pub fn mean_rows(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let mut out = Matrix::zeros(1, v.cols);
        for r in 0..v.rows {
            for c in 0..v.cols {
                out.data[c] += v.data[r * v.cols + c];
            }
        }
        let n = v.rows as f64;
        for c in out.data.iter_mut() {
            *c /= n;
        }
        self.push(out, Op::MeanRows(a))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::contract("concat_rows of nothing"));
        }
        let cols = self.value(parts[0]).cols;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let v = self.value(p);
            if v.cols != cols {
                return Err(Error::shape("concat_rows: column mismatch"));
            }
            rows += v.rows;
            data.extend_from_slice(&v.data);
        }
        let out = Matrix { rows, cols, data };
        Ok(self.push(out, Op::ConcatRows(parts.to_vec())))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let v = self.value(x);
        if start + len > v.rows {
            return Err(Error::shape(format!(
                "slice_rows [{start}, {start}+{len}) out of {} rows",
                v.rows
            )));
        }
        let out = Matrix {
            rows: len,
            cols: v.cols,
            data: v.data[start * v.cols..(start + len) * v.cols].to_vec(),
        };
        Ok(self.push(out, Op::SliceRows { x, start, len }))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::contract("concat_cols of nothing"));
        }
        let rows = self.value(parts[0]).rows;
        let cols: usize = parts.iter().map(|&p| self.value(p).cols).sum();
        for &p in parts {
            if self.value(p).rows != rows {
                return Err(Error::shape("concat_cols: row mismatch"));
            }
        }
        let mut out = Matrix::zeros(rows, cols);
        for r in 0..rows {
            let mut off = 0;
            for &p in parts {
                let v = self.value(p);
                out.data[r * cols + off..r * cols + off + v.cols].copy_from_slice(v.row(r));
                off += v.cols;
            }
        }
        Ok(self.push(out, Op::ConcatCols(parts.to_vec())))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let v = self.value(x);
        if start + len > v.cols {
            return Err(Error::shape(format!(
                "slice_cols [{start}, {start}+{len}) out of {} cols",
                v.cols
            )));
        }
        let mut out = Matrix::zeros(v.rows, len);
        for r in 0..v.rows {
            out.data[r * len..(r + 1) * len]
                .copy_from_slice(&v.row(r)[start..start + len]);
        }
        Ok(self.push(out, Op::SliceCols { x, start, len }))
    }

    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let v = self.value(table);
        for &id in ids {
            if id >= v.rows {
                return Err(Error::validation(format!(
                    "row index {} out of {} rows",
                    id, v.rows
                )));
            }
        }
        let mut out = Matrix::zeros(ids.len(), v.cols);
        for (r, &id) in ids.iter().enumerate() {
            out.data[r * v.cols..(r + 1) * v.cols].copy_from_slice(v.row(id));
        }
        Ok(self.push(
            out,
            Op::GatherRows {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    pub fn row_normalize(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        let mut out = v.clone();
        for r in 0..v.rows {
            let norm = v.row(r).iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm < 1e-12 {
                return Err(Error::validation(format!("zero-norm row {r}")));
            }
            for c in 0..v.cols {
                out.data[r * v.cols + c] /= norm;
            }
        }
        Ok(self.push(out, Op::RowNormalize(a)))
    }

    pub fn col_max(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let mut out = Matrix::filled(1, v.cols, f64::NEG_INFINITY);
        for r in 0..v.rows {
            for c in 0..v.cols {
                let x = v.data[r * v.cols + c];
                if x > out.data[c] {
                    out.data[c] = x;
                }
            }
        }
        self.push(out, Op::ColMax(a))
    }

    // ---- backward ----

    /// Reverse-mode sweep from `loss` (must be 1x1). Adjoints are computed in
    /// a fresh buffer and then added into the persistent per-node gradient
    /// slots, so calling backward twice accumulates exactly twice the
    /// single-pass gradient.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let lv = self.value(loss);
        if lv.rows != 1 || lv.cols != 1 {
            return Err(Error::contract(format!(
                "backward requires scalar loss, got {}x{}",
                lv.rows, lv.cols
            )));
        }
        let mut adj: Vec<Option<Matrix>> = vec![None; self.nodes.len()];
        adj[loss.0] = Some(Matrix::from_vec(1, 1, vec![1.0])?);

        for i in (0..=loss.0).rev() {
            let g = match adj[i].take() {
                Some(g) => g,
                None => continue,
            };
            self.propagate(i, &g, &mut adj)?;
            self.nodes[i].grad.add_assign(&g);
        }
        Ok(())
    }

    fn accumulate(adj: &mut [Option<Matrix>], v: Var, delta: Matrix) {
        match &mut adj[v.0] {
            Some(g) => g.add_assign(&delta),
            slot @ None => *slot = Some(delta),
        }
    }

    fn propagate(&self, i: usize, g: &Matrix, adj: &mut [Option<Matrix>]) -> Result<()> {
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let da = g.matmul_nt(&self.nodes[b.0].value)?;
                let db = self.nodes[a.0].value.matmul_tn(g)?;
                Self::accumulate(adj, *a, da);
                Self::accumulate(adj, *b, db);
            }
            Op::Transpose(a) => {
                Self::accumulate(adj, *a, g.transpose());
            }
            Op::Add(a, b) => {
                Self::accumulate(adj, *a, g.clone());
                Self::accumulate(adj, *b, g.clone());
            }
            Op::Sub(a, b) => {
                Self::accumulate(adj, *a, g.clone());
                Self::accumulate(adj, *b, g.scale(-1.0));
            }
            Op::ScaleConst(a, c) => {
                Self::accumulate(adj, *a, g.scale(*c));
            }
            Op::MulScalar(x, s) => {
                let sv = self.nodes[s.0].value.data[0];
                let vx = &self.nodes[x.0].value;
                let ds = g
                    .data
                    .iter()
                    .zip(&vx.data)
                    .map(|(gi, xi)| gi * xi)
                    .sum::<f64>();
                Self::accumulate(adj, *x, g.scale(sv));
                Self::accumulate(adj, *s, Matrix::from_vec(1, 1, vec![ds])?);
            }
            Op::Recip(a) => {
                let y = &self.nodes[i].value;
                let mut dx = g.clone();
                for (d, yv) in dx.data.iter_mut().zip(&y.data) {
                    *d *= -yv * yv;
                }
                Self::accumulate(adj, *a, dx);
            }
            Op::Relu(a) => {
                let vx = &self.nodes[a.0].value;
                let mut dx = g.clone();
                for (d, x) in dx.data.iter_mut().zip(&vx.data) {
                    if *x <= 0.0 {
                        *d = 0.0;
                    }
                }
                Self::accumulate(adj, *a, dx);
            }
            Op::AddRowBroadcast(x, bias) => {
                let mut db = Matrix::zeros(1, g.cols);
                for r in 0..g.rows {
                    for c in 0..g.cols {
                        db.data[c] += g.data[r * g.cols + c];
                    }
                }
                Self::accumulate(adj, *x, g.clone());
                Self::accumulate(adj, *bias, db);
            }
            Op::SoftmaxRows(a) => {
                let y = &self.nodes[i].value;
                let mut dx = Matrix::zeros(y.rows, y.cols);
                for r in 0..y.rows {
                    let yr = y.row(r);
                    let gr = g.row(r);
                    let dot: f64 = yr.iter().zip(gr).map(|(yv, gv)| yv * gv).sum();
                    for c in 0..y.cols {
                        dx.data[r * y.cols + c] = yr[c] * (gr[c] - dot);
                    }
                }
                Self::accumulate(adj, *a, dx);
            }
            Op::LayerNorm { x, gain, bias, eps } => {
                let vx = &self.nodes[x.0].value;
                let vg = &self.nodes[gain.0].value;
                let d = vx.cols as f64;
                let mut dx = Matrix::zeros(vx.rows, vx.cols);
                let mut dg = Matrix::zeros(1, vx.cols);
                let mut db = Matrix::zeros(1, vx.cols);
                for r in 0..vx.rows {
                    let row = vx.row(r);
                    let mean = row.iter().sum::<f64>() / d;
                    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
                    let inv = 1.0 / (var + eps).sqrt();
                    let gr = g.row(r);
                    let mut m_dxhat = 0.0;
                    let mut m_dxhat_xhat = 0.0;
                    let xhat: Vec<f64> = row.iter().map(|v| (v - mean) * inv).collect();
                    let dxhat: Vec<f64> = gr
                        .iter()
                        .zip(&vg.data)
                        .map(|(gv, gn)| gv * gn)
                        .collect();
                    for c in 0..vx.cols {
                        m_dxhat += dxhat[c];
                        m_dxhat_xhat += dxhat[c] * xhat[c];
                        dg.data[c] += gr[c] * xhat[c];
                        db.data[c] += gr[c];
                    }
                    m_dxhat /= d;
                    m_dxhat_xhat /= d;
                    for c in 0..vx.cols {
                        dx.data[r * vx.cols + c] =
                            inv * (dxhat[c] - m_dxhat - xhat[c] * m_dxhat_xhat);
                    }
                }
                Self::accumulate(adj, *x, dx);
                Self::accumulate(adj, *gain, dg);
                Self::accumulate(adj, *bias, db);
            }
            Op::CrossEntropy { logits, targets } => {
                let v = &self.nodes[logits.0].value;
                let kept = targets.iter().flatten().count() as f64;
                let gscale = g.data[0] / kept;
                let mut dl = Matrix::zeros(v.rows, v.cols);
                for (r, t) in targets.iter().enumerate() {
                    if let Some(t) = t {
                        let row = v.row(r);
                        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                        let sum: f64 = row.iter().map(|x| (x - max).exp()).sum();
                        for c in 0..v.cols {
                            let p = (row[c] - max).exp() / sum;
                            let onehot = if c == *t { 1.0 } else { 0.0 };
                            dl.data[r * v.cols + c] = (p - onehot) * gscale;
                        }
                    }
                }
                Self::accumulate(adj, *logits, dl);
            }
            Op::BceWithLogits { logits, labels } => {
                let v = &self.nodes[logits.0].value;
                let n = v.data.len() as f64;
                let gscale = g.data[0] / n;
                let mut dl = Matrix::zeros(v.rows, v.cols);
                for (idx, (&z, &y)) in v.data.iter().zip(&labels.data).enumerate() {
                    let sig = 1.0 / (1.0 + (-z).exp());
                    dl.data[idx] = (sig - y) * gscale;
                }
                Self::accumulate(adj, *logits, dl);
            }
            Op::SumAll(a) => {
                let v = &self.nodes[a.0].value;
                Self::accumulate(adj, *a, Matrix::filled(v.rows, v.cols, g.data[0]));
            }
            Op::MeanRows(a) => {
                let v = &self.nodes[a.0].value;
                let scale = 1.0 / v.rows as f64;
                let mut dx = Matrix::zeros(v.rows, v.cols);
                for r in 0..v.rows {
                    for c in 0..v.cols {
                        dx.data[r * v.cols + c] = g.data[c] * scale;
                    }
                }
                Self::accumulate(adj, *a, dx);
            }
            Op::ConcatRows(parts) => {
                let mut start = 0;
                for &p in parts {
                    let v = &self.nodes[p.0].value;
                    let slice = Matrix {
                        rows: v.rows,
                        cols: v.cols,
                        data: g.data[start * g.cols..(start + v.rows) * g.cols].to_vec(),
                    };
                    Self::accumulate(adj, p, slice);
                    start += v.rows;
                }
            }
            Op::SliceRows { x, start, len } => {
                let v = &self.nodes[x.0].value;
                let mut dx = Matrix::zeros(v.rows, v.cols);
                dx.data[start * v.cols..(start + len) * v.cols].copy_from_slice(&g.data);
                Self::accumulate(adj, *x, dx);
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let v = &self.nodes[p.0].value;
                    let mut dp = Matrix::zeros(v.rows, v.cols);
                    for r in 0..v.rows {
                        dp.data[r * v.cols..(r + 1) * v.cols]
                            .copy_from_slice(&g.row(r)[off..off + v.cols]);
                    }
                    Self::accumulate(adj, p, dp);
                    off += v.cols;
                }
            }
            Op::SliceCols { x, start, len } => {
                let v = &self.nodes[x.0].value;
                let mut dx = Matrix::zeros(v.rows, v.cols);
                for r in 0..v.rows {
                    dx.data[r * v.cols + start..r * v.cols + start + len]
                        .copy_from_slice(g.row(r));
                }
                Self::accumulate(adj, *x, dx);
            }
            Op::GatherRows { table, ids } => {
                let v = &self.nodes[table.0].value;
                let mut dt = Matrix::zeros(v.rows, v.cols);
                for (r, &id) in ids.iter().enumerate() {
                    for c in 0..v.cols {
                        dt.data[id * v.cols + c] += g.data[r * v.cols + c];
                    }
                }
                Self::accumulate(adj, *table, dt);
            }
            Op::RowNormalize(a) => {
                let vx = &self.nodes[a.0].value;
                let mut dx = Matrix::zeros(vx.rows, vx.cols);
                for r in 0..vx.rows {
                    let row = vx.row(r);
                    let gr = g.row(r);
                    let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
                    let dot: f64 = row.iter().zip(gr).map(|(x, gv)| x * gv).sum();
                    let n3 = norm * norm * norm;
                    for c in 0..vx.cols {
                        dx.data[r * vx.cols + c] = gr[c] / norm - row[c] * dot / n3;
                    }
                }
                Self::accumulate(adj, *a, dx);
            }
            Op::ColMax(a) => {
                let vx = &self.nodes[a.0].value;
                let mut dx = Matrix::zeros(vx.rows, vx.cols);
                for c in 0..vx.cols {
                    let mut best = 0usize;
                    let mut bv = f64::NEG_INFINITY;
                    for r in 0..vx.rows {
                        let x = vx.data[r * vx.cols + c];
                        if x > bv {
                            bv = x;
                            best = r;
                        }
                    }
                    dx.data[best * vx.cols + c] = g.data[c];
                }
                Self::accumulate(adj, *a, dx);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_symmetry() {
        let mut t = Tape::new();
        let x = t.leaf(Matrix::from_vec(1, 2, vec![0.0, 0.0]).unwrap());
        let y = t.softmax_rows(x);
        assert_eq!(t.value(y).data, vec![0.5, 0.5]);
    }

    #[test]
    fn softmax_stabilized() {
        let mut t = Tape::new();
        let x = t.leaf(Matrix::from_vec(1, 3, vec![1000.0, 1000.0, 1000.0]).unwrap());
        let y = t.softmax_rows(x);
        for v in &t.value(y).data {
            assert!((v - 1.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_closed_form() {
        let mut t = Tape::new();
        let x = t.leaf(Matrix::from_vec(1, 2, vec![0.0, 3.0f64.ln()]).unwrap());
        let y = t.softmax_rows(x);
        let v = t.value(y);
        assert!((v.data[0] - 0.25).abs() < 1e-12);
        assert!((v.data[1] - 0.75).abs() < 1e-12);
    }

    #[test]
    fn layer_norm_zero_variance_row() {
        let mut t = Tape::new();
        let x = t.leaf(Matrix::from_vec(1, 3, vec![5.0, 5.0, 5.0]).unwrap());
        let g = t.leaf(Matrix::filled(1, 3, 1.0));
        let b = t.leaf(Matrix::zeros(1, 3));
        let y = t.layer_norm(x, g, b, 1e-12).unwrap();
        for v in &t.value(y).data {
            assert!(v.abs() < 1e-6);
        }
    }

    #[test]
    fn layer_norm_already_normalized() {
        let mut t = Tape::new();
        let x = t.leaf(Matrix::from_vec(1, 2, vec![-1.0, 1.0]).unwrap());
        let g = t.leaf(Matrix::filled(1, 2, 1.0));
        let b = t.leaf(Matrix::zeros(1, 2));
        let y = t.layer_norm(x, g, b, 1e-15).unwrap();
        let v = t.value(y);
        assert!((v.data[0] + 1.0).abs() < 1e-6);
        assert!((v.data[1] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn layer_norm_affine_dominates() {
        let mut t = Tape::new();
        let x = t.leaf(Matrix::from_vec(1, 3, vec![2.0, -7.0, 0.3]).unwrap());
        let g = t.leaf(Matrix::zeros(1, 3));
        let b = t.leaf(Matrix::filled(1, 3, 4.2));
        let y = t.layer_norm(x, g, b, 1e-5).unwrap();
        for v in &t.value(y).data {
            assert!((v - 4.2).abs() < 1e-12);
        }
    }

    #[test]
    fn cross_entropy_uniform() {
        let mut t = Tape::new();
        let l = t.leaf(Matrix::from_vec(1, 2, vec![0.0, 0.0]).unwrap());
        let loss = t.cross_entropy(l, vec![Some(0)]).unwrap();
        assert!((t.scalar(loss).unwrap() - 2.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_saturated() {
        let mut t = Tape::new();
        let l = t.leaf(Matrix::from_vec(1, 2, vec![100.0, 0.0]).unwrap());
        let loss = t.cross_entropy(l, vec![Some(0)]).unwrap();
        assert!(t.scalar(loss).unwrap() < 1e-10);
    }

    #[test]
    fn cross_entropy_closed_form() {
        let mut t = Tape::new();
        let l = t.leaf(Matrix::from_vec(1, 2, vec![0.0, 3.0f64.ln()]).unwrap());
        let loss = t.cross_entropy(l, vec![Some(1)]).unwrap();
        assert!((t.scalar(loss).unwrap() - (-0.75f64.ln())).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_out_of_range_target() {
        let mut t = Tape::new();
        let l = t.leaf(Matrix::zeros(1, 2));
        assert!(t.cross_entropy(l, vec![Some(5)]).is_err());
    }

    #[test]
    fn backward_sum_is_ones() {
        let mut t = Tape::new();
        let w = t.leaf(Matrix::from_vec(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let loss = t.sum_all(w);
        t.backward(loss).unwrap();
        assert_eq!(t.grad(w).data, vec![1.0; 4]);
    }

    #[test]
    fn backward_zero_scaled_graph() {
        let mut t = Tape::new();
        let w = t.leaf(Matrix::from_vec(1, 2, vec![3.0, -1.0]).unwrap());
        let f = t.relu(w);
        let s = t.sum_all(f);
        let loss = t.scale_const(s, 0.0);
        t.backward(loss).unwrap();
        assert_eq!(t.grad(w).data, vec![0.0, 0.0]);
    }

    #[test]
    fn backward_twice_accumulates_exactly_double() {
        let mut t = Tape::new();
        let w = t.leaf(Matrix::from_vec(1, 3, vec![0.5, -2.0, 1.5]).unwrap());
        let sq = t.matmul_nt_helper(w);
        t.backward(sq).unwrap();
        let once = t.grad(w).clone();
        t.backward(sq).unwrap();
        let twice = t.grad(w).clone();
        for (a, b) in once.data.iter().zip(&twice.data) {
            assert_eq!(*b, 2.0 * a);
        }
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut t = Tape::new();
        let w = t.leaf(Matrix::zeros(2, 2));
        assert!(t.backward(w).is_err());
    }

    impl Tape {
        /// test helper: ||w||^2 as a scalar node
        fn matmul_nt_helper(&mut self, w: Var) -> Var {
            let wt = self.transpose(w);
            let sq = self.matmul(w, wt).unwrap();
            self.sum_all(sq)
        }
    }
}
