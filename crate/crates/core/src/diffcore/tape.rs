use super::tensor::{mm, mm_nt, mm_tn};
use super::{ParamId, ParamStore, Tensor};
use crate::error::{dim_err, Error, Result};

/// Additive bias applied to masked logits before a softmax.
pub const MASK_NEG: f64 = -1e9;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    /// Reduce down the rows (one result per column).
    Rows,
    /// Reduce along each row (one result per row).
    Cols,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    ScaleBy(Var, Var),
    Softmax(Var, Axis),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Gelu(Var),
    Sigmoid(Var),
    Gather(Var, Vec<usize>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    Concat(Vec<Var>, Axis),
    Mean {
        x: Var,
        axis: Axis,
        mask: Option<Vec<bool>>,
        counts: Vec<usize>,
    },
    Sum(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        mask: Vec<bool>,
        probs: Tensor,
        count: usize,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Param(_) => "param",
            Op::MatMul(..) => "matmul",
            Op::MatMulNT(..) => "matmul_nt",
            Op::Transpose(_) => "transpose",
            Op::Add(..) => "add",
            Op::Mul(..) => "mul",
            Op::AddRow(..) => "add_row",
            Op::Scale(..) => "scale",
            Op::ScaleBy(..) => "scale_by",
            Op::Softmax(..) => "softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Gelu(_) => "gelu",
            Op::Sigmoid(_) => "sigmoid",
            Op::Gather(..) => "gather",
            Op::SliceRows(..) => "slice_rows",
            Op::SliceCols(..) => "slice_cols",
            Op::Concat(..) => "concat",
            Op::Mean { .. } => "mean",
            Op::Sum(_) => "sum",
            Op::CrossEntropy { .. } => "cross_entropy",
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Define-by-run record of tensor operations.
///
/// A fresh tape is built for every forward pass; `backward` replays the
/// record in exact reverse order.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of one scalar with respect to every value on a tape.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient for `v`, or `None` when `v` does not influence the loss.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::Contract(format!(
                "non-finite output from {}",
                op.name()
            )));
        }
        self.nodes.push(Node { value, op });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.nodes.push(Node {
            value: store.value(id).clone(),
            op: Op::Param(id),
        });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.cols() != tb.rows() {
            return Err(dim_err(
                "matmul",
                format!("{:?} · {:?}", ta.shape(), tb.shape()),
            ));
        }
        let out = mm(ta, tb);
        self.push(out, Op::MatMul(a, b))
    }

    /// `a · bᵀ`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.cols() != tb.cols() {
            return Err(dim_err(
                "matmul_nt",
                format!("{:?} · {:?}ᵀ", ta.shape(), tb.shape()),
            ));
        }
        let out = mm_nt(ta, tb);
        self.push(out, Op::MatMulNT(a, b))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).transpose();
        self.push(out, Op::Transpose(x))
    }

    fn binary_same(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (ta, tb) = (self.value(a), self.value(b));
        if !ta.same_shape(tb) {
            return Err(dim_err(op, format!("{:?} vs {:?}", ta.shape(), tb.shape())));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same("add", a, b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        let out = Tensor::new(ta.rows(), ta.cols(), data)?;
        self.push(out, Op::Add(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same("mul", a, b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
        let out = Tensor::new(ta.rows(), ta.cols(), data)?;
        self.push(out, Op::Mul(a, b))
    }

    /// Adds a `1 x c` row to every row of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (tx, tr) = (self.value(x), self.value(row));
        if tr.rows() != 1 || tr.cols() != tx.cols() {
            return Err(dim_err(
                "add_row",
                format!("{:?} + {:?}", tx.shape(), tr.shape()),
            ));
        }
        let c = tx.cols();
        let data = tx
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| v + tr.data()[i % c])
            .collect();
        let out = Tensor::new(tx.rows(), c, data)?;
        self.push(out, Op::AddRow(x, row))
    }

    /// `x · weight + bias`
    pub fn affine(&mut self, x: Var, weight: Var, bias: Var) -> Result<Var> {
        let xw = self.matmul(x, weight)?;
        self.add_row(xw, bias)
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        let tx = self.value(x);
        let data = tx.data().iter().map(|v| v * factor).collect();
        let out = Tensor::new(tx.rows(), tx.cols(), data)?;
        self.push(out, Op::Scale(x, factor))
    }

    /// Multiplies every entry of `x` by the `1 x 1` value `s`.
    pub fn scale_by(&mut self, x: Var, s: Var) -> Result<Var> {
        let ts = self.value(s);
        if ts.shape() != [1, 1] {
            return Err(dim_err("scale_by", format!("scalar has shape {:?}", ts.shape())));
        }
        let sv = ts.item();
        let tx = self.value(x);
        let data = tx.data().iter().map(|v| v * sv).collect();
        let out = Tensor::new(tx.rows(), tx.cols(), data)?;
        self.push(out, Op::ScaleBy(x, s))
    }

    /// Softmax along `axis`. Entries where `mask` is false get exactly zero
    /// probability; every slice must keep at least one valid entry.
    pub fn softmax(&mut self, x: Var, axis: Axis, mask: Option<&[bool]>) -> Result<Var> {
        let tx = self.value(x);
        if let Some(m) = mask {
            if m.len() != tx.len() {
                return Err(dim_err(
                    "softmax",
                    format!("mask of {} for {:?}", m.len(), tx.shape()),
                ));
            }
        }
        let out = softmax_forward(tx, axis, mask)?;
        self.push(out, Op::Softmax(x, axis))
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (tx, tg, tb) = (self.value(x), self.value(gain), self.value(bias));
        let [r, c] = tx.shape();
        if tg.shape() != [1, c] || tb.shape() != [1, c] {
            return Err(dim_err(
                "layer_norm",
                format!("x {:?}, gain {:?}, bias {:?}", tx.shape(), tg.shape(), tb.shape()),
            ));
        }
        let mut xhat = vec![0.0; r * c];
        let mut rstd = vec![0.0; r];
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = tx.row_slice(i);
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / c as f64;
            let s = 1.0 / (var + eps).sqrt();
            rstd[i] = s;
            for j in 0..c {
                let h = (row[j] - mean) * s;
                xhat[i * c + j] = h;
                out[i * c + j] = h * tg.data()[j] + tb.data()[j];
            }
        }
        let out = Tensor::new(r, c, out)?;
        self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
        )
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let data = tx.data().iter().map(|&v| gelu(v)).collect();
        let out = Tensor::new(tx.rows(), tx.cols(), data)?;
        self.push(out, Op::Gelu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let data = tx.data().iter().map(|&v| sigmoid(v)).collect();
        let out = Tensor::new(tx.rows(), tx.cols(), data)?;
        self.push(out, Op::Sigmoid(x))
    }

    /// Row lookup: output row `i` is `table[ids[i]]`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tt = self.value(table);
        if ids.is_empty() {
            return Err(Error::Empty("gather ids"));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= tt.rows()) {
            return Err(dim_err(
                "gather",
                format!("row {bad} out of {} rows", tt.rows()),
            ));
        }
        let c = tt.cols();
        let mut data = Vec::with_capacity(ids.len() * c);
        for &i in ids {
            data.extend_from_slice(tt.row_slice(i));
        }
        let out = Tensor::new(ids.len(), c, data)?;
        self.push(out, Op::Gather(table, ids.to_vec()))
    }

    /// Rows `start..end` of `x`.
    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let tx = self.value(x);
        if start >= end || end > tx.rows() {
            return Err(dim_err(
                "slice_rows",
                format!("{start}..{end} of {} rows", tx.rows()),
            ));
        }
        let c = tx.cols();
        let data = tx.data()[start * c..end * c].to_vec();
        let out = Tensor::new(end - start, c, data)?;
        self.push(out, Op::SliceRows(x, start))
    }

    /// Columns `start..end` of `x`.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let tx = self.value(x);
        if start >= end || end > tx.cols() {
            return Err(dim_err(
                "slice_cols",
                format!("{start}..{end} of {} cols", tx.cols()),
            ));
        }
        let mut data = Vec::with_capacity(tx.rows() * (end - start));
        for i in 0..tx.rows() {
            data.extend_from_slice(&tx.row_slice(i)[start..end]);
        }
        let out = Tensor::new(tx.rows(), end - start, data)?;
        self.push(out, Op::SliceCols(x, start))
    }

    /// Concatenation along `axis`: `Axis::Cols` joins side by side,
    /// `Axis::Rows` stacks vertically.
    pub fn concat(&mut self, parts: &[Var], axis: Axis) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Empty("concat parts"));
        }
        let shapes: Vec<[usize; 2]> = parts.iter().map(|&p| self.value(p).shape()).collect();
        let out = match axis {
            Axis::Cols => {
                let r = shapes[0][0];
                if shapes.iter().any(|s| s[0] != r) {
                    return Err(dim_err("concat", format!("row counts {shapes:?}")));
                }
                let c: usize = shapes.iter().map(|s| s[1]).sum();
                let mut data = Vec::with_capacity(r * c);
                for i in 0..r {
                    for &p in parts {
                        data.extend_from_slice(self.value(p).row_slice(i));
                    }
                }
                Tensor::new(r, c, data)?
            }
            Axis::Rows => {
                let c = shapes[0][1];
                if shapes.iter().any(|s| s[1] != c) {
                    return Err(dim_err("concat", format!("column counts {shapes:?}")));
                }
                let r: usize = shapes.iter().map(|s| s[0]).sum();
                let mut data = Vec::with_capacity(r * c);
                for &p in parts {
                    data.extend_from_slice(self.value(p).data());
                }
                Tensor::new(r, c, data)?
            }
        };
        self.push(out, Op::Concat(parts.to_vec(), axis))
    }

    /// Mean along `axis`, optionally restricted to entries where `mask` is set.
    pub fn mean(&mut self, x: Var, axis: Axis, mask: Option<&[bool]>) -> Result<Var> {
        let tx = self.value(x);
        let [r, c] = tx.shape();
        if let Some(m) = mask {
            if m.len() != r * c {
                return Err(dim_err("mean", format!("mask of {} for {r}x{c}", m.len())));
            }
        }
        let valid = |i: usize, j: usize| mask.is_none_or(|m| m[i * c + j]);
        let (out, counts) = match axis {
            Axis::Rows => {
                let mut sums = vec![0.0; c];
                let mut counts = vec![0usize; c];
                for i in 0..r {
                    for j in 0..c {
                        if valid(i, j) {
                            sums[j] += tx.get(i, j);
                            counts[j] += 1;
                        }
                    }
                }
                (sums, counts)
            }
            Axis::Cols => {
                let mut sums = vec![0.0; r];
                let mut counts = vec![0usize; r];
                for i in 0..r {
                    for j in 0..c {
                        if valid(i, j) {
                            sums[i] += tx.get(i, j);
                            counts[i] += 1;
                        }
                    }
                }
                (sums, counts)
            }
        };
        if counts.contains(&0) {
            return Err(Error::DegenerateSlice("mean"));
        }
        let data: Vec<f64> = out.iter().zip(&counts).map(|(s, &n)| s / n as f64).collect();
        let out = match axis {
            Axis::Rows => Tensor::new(1, c, data)?,
            Axis::Cols => Tensor::new(r, 1, data)?,
        };
        self.push(
            out,
            Op::Mean {
                x,
                axis,
                mask: mask.map(<[bool]>::to_vec),
                counts,
            },
        )
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).sum();
        self.push(Tensor::scalar(s), Op::Sum(x))
    }

    /// Mean over rows with `mask[i]` set of `-log softmax(logits[i])[targets[i]]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], mask: &[bool]) -> Result<Var> {
        let tl = self.value(logits);
        let [r, c] = tl.shape();
        if targets.len() != r || mask.len() != r {
            return Err(dim_err(
                "cross_entropy",
                format!("{r} rows, {} targets, {} mask", targets.len(), mask.len()),
            ));
        }
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(Error::DegenerateSlice("cross_entropy"));
        }
        let probs = softmax_forward(tl, Axis::Cols, None)?;
        let mut total = 0.0;
        for i in 0..r {
            if !mask[i] {
                continue;
            }
            let t = targets[i];
            if t >= c {
                return Err(dim_err("cross_entropy", format!("target {t} with {c} classes")));
            }
            let row = tl.row_slice(i);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            total += lse - row[t];
        }
        let loss = Tensor::scalar(total / count as f64);
        self.push(
            loss,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                mask: mask.to_vec(),
                probs,
                count,
            },
        )
    }

    /// Reverse-mode sweep from the scalar `loss`.
    pub fn gradients(&self, loss: Var) -> Result<Gradients> {
        let tl = self.value(loss);
        if tl.shape() != [1, 1] {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got {:?}",
                tl.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.backprop_node(idx, &g, &mut grads);
            if !g.is_finite() {
                return Err(Error::Contract(format!(
                    "non-finite gradient at {}",
                    self.nodes[idx].op.name()
                )));
            }
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    /// Runs the reverse sweep and accumulates parameter gradients into `store`.
    pub fn backward(&self, loss: Var, store: &mut ParamStore) -> Result<()> {
        let grads = self.gradients(loss)?;
        for (node, g) in self.nodes.iter().zip(&grads.grads) {
            if let (Op::Param(id), Some(g)) = (&node.op, g) {
                store.accumulate(*id, g);
            }
        }
        Ok(())
    }

    fn backprop_node(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[idx];
        let out = &node.value;
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let ga = mm_nt(g, self.value(*b));
                let gb = mm_tn(self.value(*a), g);
                accumulate(grads, *a, ga);
                accumulate(grads, *b, gb);
            }
            Op::MatMulNT(a, b) => {
                // out = a·bᵀ: da = g·b, db = gᵀ·a
                let ga = mm(g, self.value(*b));
                let gb = mm_tn(g, self.value(*a));
                accumulate(grads, *a, ga);
                accumulate(grads, *b, gb);
            }
            Op::Transpose(x) => accumulate(grads, *x, g.transpose()),
            Op::Add(a, b) => {
                accumulate(grads, *a, g.clone());
                accumulate(grads, *b, g.clone());
            }
            Op::Mul(a, b) => {
                let ga = zip_map(g, self.value(*b), |g, y| g * y);
                let gb = zip_map(g, self.value(*a), |g, x| g * x);
                accumulate(grads, *a, ga);
                accumulate(grads, *b, gb);
            }
            Op::AddRow(x, row) => {
                let c = g.cols();
                let mut gr = vec![0.0; c];
                for (i, v) in g.data().iter().enumerate() {
                    gr[i % c] += v;
                }
                accumulate(grads, *x, g.clone());
                accumulate(grads, *row, Tensor::new(1, c, gr).expect("row grad"));
            }
            Op::Scale(x, f) => accumulate(grads, *x, map(g, |v| v * f)),
            Op::ScaleBy(x, s) => {
                let sv = self.value(*s).item();
                let gs: f64 = g
                    .data()
                    .iter()
                    .zip(self.value(*x).data())
                    .map(|(a, b)| a * b)
                    .sum();
                accumulate(grads, *x, map(g, |v| v * sv));
                accumulate(grads, *s, Tensor::scalar(gs));
            }
            Op::Softmax(x, axis) => {
                let mut gx = Tensor::zeros(out.rows(), out.cols());
                for slice in slices(out.shape(), *axis) {
                    let dot: f64 = slice.iter().map(|&i| out.data()[i] * g.data()[i]).sum();
                    for &i in &slice {
                        gx.data_mut()[i] = out.data()[i] * (g.data()[i] - dot);
                    }
                }
                accumulate(grads, *x, gx);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let [r, c] = out.shape();
                let tg = self.value(*gain);
                let mut gx = vec![0.0; r * c];
                let mut ggain = vec![0.0; c];
                let mut gbias = vec![0.0; c];
                for i in 0..r {
                    let grow = g.row_slice(i);
                    let mut sum_dh = 0.0;
                    let mut sum_dh_h = 0.0;
                    for j in 0..c {
                        let h = xhat[i * c + j];
                        let dh = grow[j] * tg.data()[j];
                        sum_dh += dh;
                        sum_dh_h += dh * h;
                        ggain[j] += grow[j] * h;
                        gbias[j] += grow[j];
                    }
                    let n = c as f64;
                    for j in 0..c {
                        let h = xhat[i * c + j];
                        let dh = grow[j] * tg.data()[j];
                        gx[i * c + j] = rstd[i] * (dh - sum_dh / n - h * sum_dh_h / n);
                    }
                }
                accumulate(grads, *x, Tensor::new(r, c, gx).expect("ln grad"));
                accumulate(grads, *gain, Tensor::new(1, c, ggain).expect("ln gain grad"));
                accumulate(grads, *bias, Tensor::new(1, c, gbias).expect("ln bias grad"));
            }
            Op::Gelu(x) => {
                let gx = zip_map(g, self.value(*x), |g, v| g * gelu_grad(v));
                accumulate(grads, *x, gx);
            }
            Op::Sigmoid(x) => {
                let gx = zip_map(g, out, |g, y| g * y * (1.0 - y));
                accumulate(grads, *x, gx);
            }
            Op::Gather(table, ids) => {
                let tt = self.value(*table);
                let c = tt.cols();
                let mut gt = Tensor::zeros(tt.rows(), c);
                for (row, &id) in ids.iter().enumerate() {
                    let src = g.row_slice(row);
                    let dst = &mut gt.data_mut()[id * c..(id + 1) * c];
                    for (d, s) in dst.iter_mut().zip(src) {
                        *d += s;
                    }
                }
                accumulate(grads, *table, gt);
            }
            Op::SliceRows(x, start) => {
                let tx = self.value(*x);
                let c = tx.cols();
                let mut gx = Tensor::zeros(tx.rows(), c);
                gx.data_mut()[start * c..start * c + g.len()].copy_from_slice(g.data());
                accumulate(grads, *x, gx);
            }
            Op::SliceCols(x, start) => {
                let tx = self.value(*x);
                let mut gx = Tensor::zeros(tx.rows(), tx.cols());
                let w = g.cols();
                for i in 0..tx.rows() {
                    for j in 0..w {
                        gx.set(i, start + j, g.get(i, j));
                    }
                }
                accumulate(grads, *x, gx);
            }
            Op::Concat(parts, axis) => match axis {
                Axis::Cols => {
                    let mut offset = 0;
                    for &p in parts {
                        let [r, c] = self.value(p).shape();
                        let mut gp = Vec::with_capacity(r * c);
                        for i in 0..r {
                            gp.extend_from_slice(&g.row_slice(i)[offset..offset + c]);
                        }
                        offset += c;
                        accumulate(grads, p, Tensor::new(r, c, gp).expect("concat grad"));
                    }
                }
                Axis::Rows => {
                    let mut offset = 0;
                    for &p in parts {
                        let [r, c] = self.value(p).shape();
                        let gp = g.data()[offset..offset + r * c].to_vec();
                        offset += r * c;
                        accumulate(grads, p, Tensor::new(r, c, gp).expect("concat grad"));
                    }
                }
            },
            Op::Mean {
                x,
                axis,
                mask,
                counts,
            } => {
                let [r, c] = self.value(*x).shape();
                let mut gx = Tensor::zeros(r, c);
                for i in 0..r {
                    for j in 0..c {
                        if mask.as_ref().is_some_and(|m| !m[i * c + j]) {
                            continue;
                        }
                        let k = match axis {
                            Axis::Rows => j,
                            Axis::Cols => i,
                        };
                        gx.set(i, j, g.data()[k] / counts[k] as f64);
                    }
                }
                accumulate(grads, *x, gx);
            }
            Op::Sum(x) => {
                let [r, c] = self.value(*x).shape();
                accumulate(grads, *x, Tensor::filled(r, c, g.item()));
            }
            Op::CrossEntropy {
                logits,
                targets,
                mask,
                probs,
                count,
            } => {
                let [r, c] = probs.shape();
                let scale = g.item() / *count as f64;
                let mut gl = Tensor::zeros(r, c);
                for i in 0..r {
                    if !mask[i] {
                        continue;
                    }
                    for j in 0..c {
                        let onehot = if j == targets[i] { 1.0 } else { 0.0 };
                        gl.set(i, j, (probs.get(i, j) - onehot) * scale);
                    }
                }
                accumulate(grads, *logits, gl);
            }
        }
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn map(t: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    let data = t.data().iter().map(|&v| f(v)).collect();
    Tensor::new(t.rows(), t.cols(), data).expect("same shape")
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.rows(), a.cols(), data).expect("same shape")
}

/// Flat indices of each slice reduced by a softmax along `axis`.
fn slices(shape: [usize; 2], axis: Axis) -> Vec<Vec<usize>> {
    let [r, c] = shape;
    match axis {
        Axis::Cols => (0..r).map(|i| (i * c..(i + 1) * c).collect()).collect(),
        Axis::Rows => (0..c).map(|j| (0..r).map(|i| i * c + j).collect()).collect(),
    }
}

fn softmax_forward(x: &Tensor, axis: Axis, mask: Option<&[bool]>) -> Result<Tensor> {
    let mut out = Tensor::zeros(x.rows(), x.cols());
    for slice in slices(x.shape(), axis) {
        let logits: Vec<f64> = slice
            .iter()
            .map(|&i| match mask {
                Some(m) if !m[i] => x.data()[i] + MASK_NEG,
                _ => x.data()[i],
            })
            .collect();
        if let Some(m) = mask {
            if slice.iter().all(|&i| !m[i]) {
                return Err(Error::DegenerateSlice("softmax"));
            }
        }
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|v| (v - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        for (&i, e) in slice.iter().zip(exps) {
            out.data_mut()[i] = e / z;
        }
    }
    Ok(out)
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
