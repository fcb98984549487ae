use alloc::format;
use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use super::kernels::{gemm, View};
use super::{Activation, Tensor};
use crate::error::{Error, Result};
use crate::math;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }

    /// Handle of the `index`-th recorded value.
    pub fn from_index(index: usize) -> Self {
        Var(index)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReduceMode {
    Sum,
    Mean,
    Max,
}

/// Validated, sorted segment assignment for segment reductions.
#[derive(Clone, Debug)]
pub struct Segments {
    ids: Arc<[usize]>,
    num_segments: usize,
    /// `offsets[s]..offsets[s + 1]` are the rows of segment `s`.
    offsets: Arc<[usize]>,
}

impl Segments {
    pub fn new(ids: Vec<usize>, num_segments: usize) -> Result<Self> {
        for (pos, w) in ids.windows(2).enumerate() {
            if w[1] < w[0] {
                return Err(Error::UnsortedSegments(pos + 1));
            }
        }
        if let Some(&last) = ids.last() {
            if last >= num_segments {
                return Err(Error::SegmentOutOfRange {
                    id: last,
                    num_segments,
                });
            }
        }
        let mut offsets = vec![0usize; num_segments + 1];
        for &id in &ids {
            offsets[id + 1] += 1;
        }
        for s in 0..num_segments {
            offsets[s + 1] += offsets[s];
        }
        Ok(Self {
            ids: ids.into(),
            num_segments,
            offsets: offsets.into(),
        })
    }

    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn num_segments(&self) -> usize {
        self.num_segments
    }

    pub fn range(&self, segment: usize) -> core::ops::Range<usize> {
        self.offsets[segment]..self.offsets[segment + 1]
    }
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    MulCol(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Act(Var, Activation),
    Square(Var),
    Rsqrt(Var),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    SliceRows(Var, usize),
    GatherRows(Var, Arc<[usize]>),
    SegmentSum(Var, Segments),
    SegmentMean(Var, Segments),
    SegmentMax(Var, Vec<usize>),
    SegmentSoftmax(Var, Segments),
    MeanRows(Var),
    Sum(Var),
    Dropout(Var, Vec<f64>),
    LogSoftmaxRows(Var),
    Pick(Var, Vec<usize>),
    CrossEntropy {
        logits: Var,
        rows: Vec<usize>,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
    Bce {
        logits: Var,
        rows: Vec<usize>,
        targets: Vec<f64>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Records operations in execution order; [`Tape::backward`] replays them in
/// exact reverse.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&[f64]> {
        self.grads.get(var.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, var: Var) -> Option<Vec<f64>> {
        self.grads.get_mut(var.0).and_then(|g| g.take())
    }
}

fn shape_err(op: &'static str, detail: alloc::string::String) -> Error {
    Error::Shape { op, detail }
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

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    fn dims(&self, var: Var) -> (usize, usize) {
        self.nodes[var.0].value.dims2()
    }

    fn needs(&self, var: Var) -> bool {
        self.nodes[var.0].needs_grad
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Trainable input; its gradient is reported by [`Tape::backward`].
    pub fn param(&mut self, value: &Tensor) -> Var {
        self.leaf(value.clone(), true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a);
        let (k2, n) = self.dims(b);
        if k != k2 {
            return Err(shape_err(
                "matmul",
                format!("[{}x{}] x [{}x{}]", m, k, k2, n),
            ));
        }
        let mut out = Tensor::zeros(&[m, n]);
        gemm(
            m,
            k,
            n,
            View::normal(self.value(a).data(), k),
            View::normal(self.value(b).data(), n),
            0.0,
            out.data_mut(),
        );
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::MatMul(a, b), ng))
    }

    fn zip_same(&mut self, a: Var, b: Var, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.len() != vb.len() || va.dims2() != vb.dims2() {
            return Err(shape_err(op, format!("{:?} vs {:?}", va.shape(), vb.shape())));
        }
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(va.shape(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same(a, b, "add", |x, y| x + y)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same(a, b, "sub", |x, y| x - y)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Sub(a, b), ng))
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same(a, b, "mul", |x, y| x * y)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Mul(a, b), ng))
    }

    fn row_broadcast(&mut self, x: Var, r: Var, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (rows, cols) = self.dims(x);
        let rv = self.value(r);
        if rv.len() != cols {
            return Err(shape_err(op, format!("row of {} for {} columns", rv.len(), cols)));
        }
        let xv = self.value(x);
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for (j, &v) in xv.row(i).iter().enumerate() {
                data.push(f(v, rv.data()[j]));
            }
        }
        Tensor::new(&[rows, cols], data)
    }

    /// `x[i, j] + r[j]`.
    pub fn add_row(&mut self, x: Var, r: Var) -> Result<Var> {
        let out = self.row_broadcast(x, r, "add_row", |a, b| a + b)?;
        let ng = self.needs(x) || self.needs(r);
        Ok(self.push(out, Op::AddRow(x, r), ng))
    }

    /// `x[i, j] * r[j]`.
    pub fn mul_row(&mut self, x: Var, r: Var) -> Result<Var> {
        let out = self.row_broadcast(x, r, "mul_row", |a, b| a * b)?;
        let ng = self.needs(x) || self.needs(r);
        Ok(self.push(out, Op::MulRow(x, r), ng))
    }

    /// `x[i, j] * c[i]`.
    pub fn mul_col(&mut self, x: Var, c: Var) -> Result<Var> {
        let (rows, cols) = self.dims(x);
        let cv = self.value(c);
        if cv.len() != rows {
            return Err(shape_err("mul_col", format!("column of {} for {} rows", cv.len(), rows)));
        }
        let xv = self.value(x);
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            let s = cv.data()[i];
            data.extend(xv.row(i).iter().map(|v| v * s));
        }
        let out = Tensor::new(&[rows, cols], data)?;
        let ng = self.needs(x) || self.needs(c);
        Ok(self.push(out, Op::MulCol(x, c), ng))
    }

    fn map(&mut self, x: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let xv = self.value(x);
        let data = xv.data().iter().map(|&v| f(v)).collect();
        let out = Tensor {
            shape: xv.shape().to_vec(),
            data,
        };
        let ng = self.needs(x);
        self.push(out, op, ng)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        self.map(x, Op::Scale(x, s), |v| v * s)
    }

    pub fn add_scalar(&mut self, x: Var, s: f64) -> Var {
        self.map(x, Op::AddScalar(x), |v| v + s)
    }

    pub fn activation(&mut self, x: Var, kind: Activation) -> Var {
        if kind == Activation::Linear {
            return x;
        }
        self.map(x, Op::Act(x, kind), |v| kind.apply(v))
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.map(x, Op::Square(x), |v| v * v)
    }

    /// `x^(-1/2)`.
    pub fn rsqrt(&mut self, x: Var) -> Var {
        self.map(x, Op::Rsqrt(x), |v| 1.0 / math::sqrt(v))
    }

    /// Concatenation along the last axis.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::Empty("concat input"));
        };
        let rows = self.dims(first).0;
        let mut total = 0;
        for &p in parts {
            let (r, c) = self.dims(p);
            if r != rows {
                return Err(shape_err("concat_cols", format!("row counts {} and {}", rows, r)));
            }
            total += c;
        }
        let mut data = Vec::with_capacity(rows * total);
        for i in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(i));
            }
        }
        let out = Tensor::new(&[rows, total], data)?;
        let ng = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), ng))
    }

    /// Columns `start..end`.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (rows, cols) = self.dims(x);
        if start > end || end > cols {
            return Err(shape_err("slice_cols", format!("{}..{} of {} columns", start, end, cols)));
        }
        let xv = self.value(x);
        let mut data = Vec::with_capacity(rows * (end - start));
        for i in 0..rows {
            data.extend_from_slice(&xv.row(i)[start..end]);
        }
        let out = Tensor::new(&[rows, end - start], data)?;
        let ng = self.needs(x);
        Ok(self.push(out, Op::SliceCols(x, start), ng))
    }

    /// Rows `start..end`.
    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (rows, cols) = self.dims(x);
        if start > end || end > rows {
            return Err(shape_err("slice_rows", format!("{}..{} of {} rows", start, end, rows)));
        }
        let data = self.value(x).data()[start * cols..end * cols].to_vec();
        let out = Tensor::new(&[end - start, cols], data)?;
        let ng = self.needs(x);
        Ok(self.push(out, Op::SliceRows(x, start), ng))
    }

    /// Row lookup `out[r] = x[index[r]]` (embedding lookup, edge gathers).
    pub fn gather_rows(&mut self, x: Var, index: Arc<[usize]>) -> Result<Var> {
        let (rows, cols) = self.dims(x);
        if let Some(&bad) = index.iter().find(|&&i| i >= rows) {
            return Err(shape_err("gather_rows", format!("index {} of {} rows", bad, rows)));
        }
        let xv = self.value(x);
        let mut data = Vec::with_capacity(index.len() * cols);
        for &i in index.iter() {
            data.extend_from_slice(xv.row(i));
        }
        let out = Tensor::new(&[index.len(), cols], data)?;
        let ng = self.needs(x);
        Ok(self.push(out, Op::GatherRows(x, index), ng))
    }

    /// Per-segment reduction of the rows of `x`. Empty segments give zero rows.
    pub fn segment_reduce(&mut self, x: Var, segments: &Segments, mode: ReduceMode) -> Result<Var> {
        let (rows, cols) = self.dims(x);
        if rows != segments.len() {
            return Err(shape_err(
                "segment_reduce",
                format!("{} rows for {} segment ids", rows, segments.len()),
            ));
        }
        let ns = segments.num_segments();
        let xv = self.value(x).data();
        let mut out = vec![0.0; ns * cols];
        let ng = self.needs(x);
        match mode {
            ReduceMode::Sum | ReduceMode::Mean => {
                for s in 0..ns {
                    let range = segments.range(s);
                    let count = range.len();
                    let dst = &mut out[s * cols..(s + 1) * cols];
                    for e in range {
                        for (d, v) in dst.iter_mut().zip(&xv[e * cols..(e + 1) * cols]) {
                            *d += v;
                        }
                    }
                    if mode == ReduceMode::Mean && count > 0 {
                        let inv = 1.0 / count as f64;
                        dst.iter_mut().for_each(|d| *d *= inv);
                    }
                }
                let out = Tensor::new(&[ns, cols], out)?;
                let op = if mode == ReduceMode::Sum {
                    Op::SegmentSum(x, segments.clone())
                } else {
                    Op::SegmentMean(x, segments.clone())
                };
                Ok(self.push(out, op, ng))
            }
            ReduceMode::Max => {
                let mut argmax = vec![usize::MAX; ns * cols];
                for s in 0..ns {
                    let range = segments.range(s);
                    if range.is_empty() {
                        continue;
                    }
                    for j in 0..cols {
                        let mut best = range.start;
                        for e in range.clone() {
                            if xv[e * cols + j] > xv[best * cols + j] {
                                best = e;
                            }
                        }
                        out[s * cols + j] = xv[best * cols + j];
                        argmax[s * cols + j] = best;
                    }
                }
                let out = Tensor::new(&[ns, cols], out)?;
                Ok(self.push(out, Op::SegmentMax(x, argmax), ng))
            }
        }
    }

    /// Softmax within each segment over a column of scores.
    pub fn segment_softmax(&mut self, scores: Var, segments: &Segments) -> Result<Var> {
        let v = self.value(scores);
        if v.cols() != 1 || v.rows() != segments.len() {
            return Err(shape_err(
                "segment_softmax",
                format!("scores {:?} for {} segment ids", v.shape(), segments.len()),
            ));
        }
        let xv = v.data();
        let mut out = vec![0.0; xv.len()];
        for s in 0..segments.num_segments() {
            let range = segments.range(s);
            if range.is_empty() {
                continue;
            }
            let max = xv[range.clone()].iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for e in range.clone() {
                out[e] = math::exp(xv[e] - max);
                total += out[e];
            }
            for e in range {
                out[e] /= total;
            }
        }
        let out = Tensor::new(v.shape(), out)?;
        let ng = self.needs(scores);
        Ok(self.push(out, Op::SegmentSoftmax(scores, segments.clone()), ng))
    }

    /// Column means: `[rows × cols] -> [1 × cols]`.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let (rows, cols) = self.dims(x);
        if rows == 0 {
            return Err(Error::Empty("mean_rows input"));
        }
        let xv = self.value(x);
        let mut out = vec![0.0; cols];
        for i in 0..rows {
            for (o, v) in out.iter_mut().zip(xv.row(i)) {
                *o += v;
            }
        }
        let inv = 1.0 / rows as f64;
        out.iter_mut().for_each(|o| *o *= inv);
        let out = Tensor::new(&[1, cols], out)?;
        let ng = self.needs(x);
        Ok(self.push(out, Op::MeanRows(x), ng))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        let ng = self.needs(x);
        self.push(Tensor::scalar(s), Op::Sum(x), ng)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len().max(1);
        let s = self.sum(x);
        self.scale(s, 1.0 / n as f64)
    }

    /// Inverted dropout. Identity when `rate == 0` or outside training.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, rate: f64, train: bool, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::InvalidArgument(format!("dropout rate {} not in [0, 1)", rate)));
        }
        if !train || rate == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - rate);
        let xv = self.value(x);
        let n = xv.len();
        let mask: Vec<f64> = (0..n)
            .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep })
            .collect();
        let data = xv.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        let out = Tensor {
            shape: xv.shape().to_vec(),
            data,
        };
        let ng = self.needs(x);
        Ok(self.push(out, Op::Dropout(x, mask), ng))
    }

    /// Row-wise log-softmax.
    pub fn log_softmax_rows(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let (rows, cols) = xv.dims2();
        let mut out = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            let row = xv.row(i);
            let lse = log_sum_exp(row);
            out.extend(row.iter().map(|v| v - lse));
        }
        let out = Tensor {
            shape: xv.shape().to_vec(),
            data: out,
        };
        let ng = self.needs(x);
        self.push(out, Op::LogSoftmaxRows(x), ng)
    }

    /// Flat element selection, returned as a `k × 1` column.
    pub fn pick(&mut self, x: Var, flat: Vec<usize>) -> Result<Var> {
        let xv = self.value(x);
        if let Some(&bad) = flat.iter().find(|&&i| i >= xv.len()) {
            return Err(shape_err("pick", format!("index {} of {} elements", bad, xv.len())));
        }
        let data = flat.iter().map(|&i| xv.data()[i]).collect();
        let out = Tensor::new(&[flat.len(), 1], data)?;
        let ng = self.needs(x);
        Ok(self.push(out, Op::Pick(x, flat), ng))
    }

    /// Mean softmax cross-entropy over the listed rows of `logits`.
    pub fn cross_entropy(&mut self, logits: Var, rows: &[usize], targets: &[usize]) -> Result<Var> {
        let lv = self.value(logits);
        let (n, c) = lv.dims2();
        if rows.len() != targets.len() {
            return Err(shape_err("cross_entropy", format!("{} rows, {} targets", rows.len(), targets.len())));
        }
        if rows.is_empty() {
            return Err(Error::Empty("loss rows"));
        }
        if let Some(&bad) = rows.iter().find(|&&r| r >= n) {
            return Err(shape_err("cross_entropy", format!("row {} of {}", bad, n)));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= c) {
            return Err(shape_err("cross_entropy", format!("class {} of {}", bad, c)));
        }
        let mut probs = Vec::with_capacity(rows.len() * c);
        let mut loss = 0.0;
        for (&r, &t) in rows.iter().zip(targets) {
            let row = lv.row(r);
            let lse = log_sum_exp(row);
            loss += lse - row[t];
            probs.extend(row.iter().map(|v| math::exp(v - lse)));
        }
        loss /= rows.len() as f64;
        let ng = self.needs(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                rows: rows.to_vec(),
                targets: targets.to_vec(),
                probs,
            },
            ng,
        ))
    }

    /// Mean binary cross-entropy with logits over every (row, class) cell of
    /// the listed rows. `targets` is row-major `rows.len() × classes` of 0/1.
    pub fn bce_with_logits(&mut self, logits: Var, rows: &[usize], targets: &[f64]) -> Result<Var> {
        let lv = self.value(logits);
        let (n, c) = lv.dims2();
        if targets.len() != rows.len() * c {
            return Err(shape_err(
                "bce_with_logits",
                format!("{} targets for {} rows x {} classes", targets.len(), rows.len(), c),
            ));
        }
        if rows.is_empty() || c == 0 {
            return Err(Error::Empty("loss rows"));
        }
        if let Some(&bad) = rows.iter().find(|&&r| r >= n) {
            return Err(shape_err("bce_with_logits", format!("row {} of {}", bad, n)));
        }
        let mut loss = 0.0;
        for (k, &r) in rows.iter().enumerate() {
            for (j, &x) in lv.row(r).iter().enumerate() {
                let y = targets[k * c + j];
                loss += x.max(0.0) - x * y + math::ln_1p(math::exp(-x.abs()));
            }
        }
        loss /= (rows.len() * c) as f64;
        let ng = self.needs(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::Bce {
                logits,
                rows: rows.to_vec(),
                targets: targets.to_vec(),
            },
            ng,
        ))
    }

    /// Reverse pass from a scalar `loss`. Consumes the tape.
    pub fn backward(self, loss: Var) -> Result<Gradients> {
        let n = self.nodes[loss.0].value.len();
        if n != 1 {
            return Err(Error::NonScalarLoss(n));
        }
        let mut grads: Vec<Option<Vec<f64>>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let g = match &node.op {
                Op::Leaf => continue,
                _ => match grads[idx].take() {
                    Some(g) => g,
                    None => continue,
                },
            };
            self.backprop(idx, &g, &mut grads);
        }
        for (idx, node) in self.nodes.iter().enumerate() {
            if !matches!(node.op, Op::Leaf) || !node.needs_grad {
                grads[idx] = None;
            }
        }
        Ok(Gradients { grads })
    }

    fn backprop(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.dims(*a);
                let n = self.dims(*b).1;
                if self.needs(*a) {
                    let ga = acc(grads, *a, m * k);
                    gemm(
                        m,
                        n,
                        k,
                        View::normal(g, n),
                        View::transposed(self.value(*b).data(), n),
                        1.0,
                        ga,
                    );
                }
                if self.needs(*b) {
                    let gb = acc(grads, *b, k * n);
                    gemm(
                        k,
                        m,
                        n,
                        View::transposed(self.value(*a).data(), k),
                        View::normal(g, n),
                        1.0,
                        gb,
                    );
                }
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                if self.needs(*a) {
                    add_into(acc(grads, *a, g.len()), g, 1.0);
                }
                if self.needs(*b) {
                    add_into(acc(grads, *b, g.len()), g, sign);
                }
            }
            Op::Mul(a, b) => {
                if self.needs(*a) {
                    let bv = self.value(*b).data();
                    for ((d, gi), bi) in acc(grads, *a, g.len()).iter_mut().zip(g).zip(bv) {
                        *d += gi * bi;
                    }
                }
                if self.needs(*b) {
                    let av = self.value(*a).data();
                    for ((d, gi), ai) in acc(grads, *b, g.len()).iter_mut().zip(g).zip(av) {
                        *d += gi * ai;
                    }
                }
            }
            Op::AddRow(x, r) => {
                let cols = out.cols();
                if self.needs(*x) {
                    add_into(acc(grads, *x, g.len()), g, 1.0);
                }
                if self.needs(*r) {
                    let gr = acc(grads, *r, cols);
                    for row in g.chunks(cols) {
                        add_into(gr, row, 1.0);
                    }
                }
            }
            Op::MulRow(x, r) => {
                let cols = out.cols();
                let rv = self.value(*r).data();
                if self.needs(*x) {
                    let gx = acc(grads, *x, g.len());
                    for (grow, drow) in g.chunks(cols).zip(gx.chunks_mut(cols)) {
                        for j in 0..cols {
                            drow[j] += grow[j] * rv[j];
                        }
                    }
                }
                if self.needs(*r) {
                    let xv = self.value(*x).data();
                    let gr = acc(grads, *r, cols);
                    for (grow, xrow) in g.chunks(cols).zip(xv.chunks(cols)) {
                        for j in 0..cols {
                            gr[j] += grow[j] * xrow[j];
                        }
                    }
                }
            }
            Op::MulCol(x, c) => {
                let cols = out.cols();
                let cv = self.value(*c).data();
                if self.needs(*x) {
                    let gx = acc(grads, *x, g.len());
                    for (i, (grow, drow)) in g.chunks(cols).zip(gx.chunks_mut(cols)).enumerate() {
                        for j in 0..cols {
                            drow[j] += grow[j] * cv[i];
                        }
                    }
                }
                if self.needs(*c) {
                    let xv = self.value(*x).data();
                    let gc = acc(grads, *c, cv.len());
                    for (i, (grow, xrow)) in g.chunks(cols).zip(xv.chunks(cols)).enumerate() {
                        gc[i] += grow.iter().zip(xrow).map(|(a, b)| a * b).sum::<f64>();
                    }
                }
            }
            Op::Scale(x, s) => add_into(acc(grads, *x, g.len()), g, *s),
            Op::AddScalar(x) => add_into(acc(grads, *x, g.len()), g, 1.0),
            Op::Act(x, kind) => {
                let xv = self.value(*x).data();
                let yv = out.data();
                let gx = acc(grads, *x, g.len());
                for i in 0..g.len() {
                    gx[i] += g[i] * kind.derivative(xv[i], yv[i]);
                }
            }
            Op::Square(x) => {
                let xv = self.value(*x).data();
                let gx = acc(grads, *x, g.len());
                for i in 0..g.len() {
                    gx[i] += 2.0 * xv[i] * g[i];
                }
            }
            Op::Rsqrt(x) => {
                let yv = out.data();
                let gx = acc(grads, *x, g.len());
                for i in 0..g.len() {
                    gx[i] += -0.5 * yv[i] * yv[i] * yv[i] * g[i];
                }
            }
            Op::ConcatCols(parts) => {
                let total = out.cols();
                let rows = out.rows();
                let mut offset = 0;
                for &p in parts {
                    let c = self.dims(p).1;
                    if self.needs(p) {
                        let gp = acc(grads, p, rows * c);
                        for i in 0..rows {
                            add_into(
                                &mut gp[i * c..(i + 1) * c],
                                &g[i * total + offset..i * total + offset + c],
                                1.0,
                            );
                        }
                    }
                    offset += c;
                }
            }
            Op::SliceCols(x, start) => {
                let (rows, cols) = self.dims(*x);
                let w = out.cols();
                let gx = acc(grads, *x, rows * cols);
                for i in 0..rows {
                    add_into(
                        &mut gx[i * cols + start..i * cols + start + w],
                        &g[i * w..(i + 1) * w],
                        1.0,
                    );
                }
            }
            Op::SliceRows(x, start) => {
                let (rows, cols) = self.dims(*x);
                let gx = acc(grads, *x, rows * cols);
                add_into(&mut gx[start * cols..start * cols + g.len()], g, 1.0);
            }
            Op::GatherRows(x, index) => {
                let (rows, cols) = self.dims(*x);
                let gx = acc(grads, *x, rows * cols);
                for (r, &i) in index.iter().enumerate() {
                    add_into(&mut gx[i * cols..(i + 1) * cols], &g[r * cols..(r + 1) * cols], 1.0);
                }
            }
            Op::SegmentSum(x, segs) | Op::SegmentMean(x, segs) => {
                let mean = matches!(node.op, Op::SegmentMean(..));
                let (rows, cols) = self.dims(*x);
                let gx = acc(grads, *x, rows * cols);
                for s in 0..segs.num_segments() {
                    let range = segs.range(s);
                    let w = if mean && !range.is_empty() {
                        1.0 / range.len() as f64
                    } else {
                        1.0
                    };
                    for e in range {
                        add_into(&mut gx[e * cols..(e + 1) * cols], &g[s * cols..(s + 1) * cols], w);
                    }
                }
            }
            Op::SegmentMax(x, argmax) => {
                let (rows, cols) = self.dims(*x);
                let gx = acc(grads, *x, rows * cols);
                for (k, &e) in argmax.iter().enumerate() {
                    if e != usize::MAX {
                        gx[e * cols + k % cols] += g[k];
                    }
                }
            }
            Op::SegmentSoftmax(x, segs) => {
                let y = out.data();
                let gx = acc(grads, *x, y.len());
                for s in 0..segs.num_segments() {
                    let range = segs.range(s);
                    let dot: f64 = range.clone().map(|e| y[e] * g[e]).sum();
                    for e in range {
                        gx[e] += y[e] * (g[e] - dot);
                    }
                }
            }
            Op::MeanRows(x) => {
                let (rows, cols) = self.dims(*x);
                let gx = acc(grads, *x, rows * cols);
                let inv = 1.0 / rows as f64;
                for row in gx.chunks_mut(cols) {
                    add_into(row, g, inv);
                }
            }
            Op::Sum(x) => {
                let n = self.value(*x).len();
                let gx = acc(grads, *x, n);
                gx.iter_mut().for_each(|d| *d += g[0]);
            }
            Op::Dropout(x, mask) => {
                let gx = acc(grads, *x, g.len());
                for i in 0..g.len() {
                    gx[i] += g[i] * mask[i];
                }
            }
            Op::LogSoftmaxRows(x) => {
                let cols = out.cols();
                let gx = acc(grads, *x, g.len());
                for ((grow, yrow), drow) in g.chunks(cols).zip(out.data().chunks(cols)).zip(gx.chunks_mut(cols)) {
                    let total: f64 = grow.iter().sum();
                    for j in 0..cols {
                        drow[j] += grow[j] - math::exp(yrow[j]) * total;
                    }
                }
            }
            Op::Pick(x, flat) => {
                let n = self.value(*x).len();
                let gx = acc(grads, *x, n);
                for (k, &i) in flat.iter().enumerate() {
                    gx[i] += g[k];
                }
            }
            Op::CrossEntropy {
                logits,
                rows,
                targets,
                probs,
            } => {
                let (n, c) = self.dims(*logits);
                let gx = acc(grads, *logits, n * c);
                let w = g[0] / rows.len() as f64;
                for (k, (&r, &t)) in rows.iter().zip(targets).enumerate() {
                    for j in 0..c {
                        let y = if j == t { 1.0 } else { 0.0 };
                        gx[r * c + j] += w * (probs[k * c + j] - y);
                    }
                }
            }
            Op::Bce {
                logits,
                rows,
                targets,
            } => {
                let (n, c) = self.dims(*logits);
                let lv = self.value(*logits).data();
                let gx = acc(grads, *logits, n * c);
                let w = g[0] / (rows.len() * c) as f64;
                for (k, &r) in rows.iter().enumerate() {
                    for j in 0..c {
                        let x = lv[r * c + j];
                        gx[r * c + j] += w * (math::sigmoid(x) - targets[k * c + j]);
                    }
                }
            }
        }
    }
}

fn acc(grads: &mut [Option<Vec<f64>>], var: Var, len: usize) -> &mut [f64] {
    grads[var.0].get_or_insert_with(|| vec![0.0; len])
}

fn add_into(dst: &mut [f64], src: &[f64], w: f64) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += w * s;
    }
}

pub(crate) fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + math::ln(row.iter().map(|v| math::exp(v - max)).sum::<f64>())
}

/// Shape-agnostic convenience for one-off reductions outside a model.
pub fn segment_reduce(values: &Tensor, segments: Vec<usize>, num_segments: usize, mode: ReduceMode) -> Result<Tensor> {
    let segs = Segments::new(segments, num_segments)?;
    let mut tape = Tape::new();
    let x = tape.constant(values.clone());
    let y = tape.segment_reduce(x, &segs, mode)?;
    Ok(tape.value(y).clone())
}
