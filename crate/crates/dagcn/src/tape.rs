//! Tape-based reverse-mode differentiation over dense 2-D tensors.
//!
//! A [`Tape`] records every operation of one forward pass into a linear
//! arena. [`Tape::backward`] replays the records in reverse, accumulating
//! gradients by the chain rule, so each recorded node is touched exactly
//! once. A tape is a single-threaded unit of work; run one tape per graph
//! sample and reduce gradients across samples in a fixed order.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to a node on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op<F> {
    Leaf,
    Matmul(usize, usize),
    Transpose(usize),
    Add(usize, usize),
    AddRowBroadcast(usize, usize),
    Mul(usize, usize),
    /// Row-wise scaling of an `n x m` matrix by an `n x 1` column.
    ScaleRows(usize, usize),
    /// Whole-matrix scaling by a `1 x 1` tape scalar.
    ScaleBy(usize, usize),
    /// Whole-matrix scaling by a compile-time constant (not differentiated).
    ScaleConst(usize, F),
    Relu(usize),
    Tanh(usize),
    SoftmaxRows(usize),
    ConcatCols(Vec<usize>),
    /// Columns `[start, start + width)` of the input.
    SliceCols { input: usize, start: usize },
    Reshape(usize),
    SumAll(usize),
    /// `-ln(max(p[index], clamp))` of a `1 x n` probability row.
    NegLogEntry { probs: usize, index: usize },
}

/// Input probabilities below this floor are clamped before the log.
pub const LOG_CLAMP: f64 = 1e-12;

pub struct Tape<F: Scalar> {
    shapes: Vec<(usize, usize)>,
    values: Vec<Vec<F>>,
    grads: Vec<Vec<F>>,
    requires: Vec<bool>,
    ops: Vec<Op<F>>,
    backward_done: bool,
}

impl<F: Scalar> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> Tape<F> {
    pub fn new() -> Self {
        Tape {
            shapes: Vec::new(),
            values: Vec::new(),
            grads: Vec::new(),
            requires: Vec::new(),
            ops: Vec::new(),
            backward_done: false,
        }
    }

    pub fn len(&self) -> usize {
        self.ops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ops.is_empty()
    }

    fn push(&mut self, rows: usize, cols: usize, values: Vec<F>, requires: bool, op: Op<F>) -> Var {
        debug_assert_eq!(values.len(), rows * cols);
        self.shapes.push((rows, cols));
        self.grads.push(if requires {
            vec![F::zero(); values.len()]
        } else {
            Vec::new()
        });
        self.values.push(values);
        self.requires.push(requires);
        self.ops.push(op);
        Var(self.ops.len() - 1)
    }

    /// Enter a tensor as a leaf; its `requires_grad` flag decides whether
    /// `backward` will produce a gradient for it.
    pub fn leaf(&mut self, t: &Tensor<F>) -> Var {
        self.push(
            t.rows(),
            t.cols(),
            t.data().to_vec(),
            t.requires_grad(),
            Op::Leaf,
        )
    }

    /// Enter a non-differentiated constant.
    pub fn constant(&mut self, t: &Tensor<F>) -> Var {
        self.push(t.rows(), t.cols(), t.data().to_vec(), false, Op::Leaf)
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.shapes[v.0]
    }

    pub fn value(&self, v: Var) -> &[F] {
        &self.values[v.0]
    }

    pub fn to_tensor(&self, v: Var) -> Tensor<F> {
        let (r, c) = self.shapes[v.0];
        Tensor::new(r, c, self.values[v.0].clone()).expect("tape node shape is consistent")
    }

    /// Gradient of the last `backward` with respect to node `v`, if tracked.
    pub fn grad(&self, v: Var) -> Option<&[F]> {
        if self.requires[v.0] && self.backward_done {
            Some(&self.grads[v.0])
        } else {
            None
        }
    }

    pub fn grad_tensor(&self, v: Var) -> Result<Tensor<F>> {
        let g = self.grad(v).ok_or_else(|| {
            Error::Contract("no gradient tracked for this node; run backward first".into())
        })?;
        let (r, c) = self.shapes[v.0];
        Tensor::new(r, c, g.to_vec())
    }

    // ── forward operations ──────────────────────────────────────────

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, ka) = self.shapes[a.0];
        let (kb, n) = self.shapes[b.0];
        if ka != kb {
            return Err(Error::dimension("matmul", (m, ka), (kb, n)));
        }
        let mut out = vec![F::zero(); m * n];
        {
            let av = &self.values[a.0];
            let bv = &self.values[b.0];
            for i in 0..m {
                let out_row = &mut out[i * n..(i + 1) * n];
                for (kk, &aik) in av[i * ka..(i + 1) * ka].iter().enumerate() {
                    if aik == F::zero() {
                        continue;
                    }
                    let b_row = &bv[kk * n..(kk + 1) * n];
                    for (o, &bv_) in out_row.iter_mut().zip(b_row) {
                        *o = *o + aik * bv_;
                    }
                }
            }
        }
        let req = self.requires[a.0] || self.requires[b.0];
        Ok(self.push(m, n, out, req, Op::Matmul(a.0, b.0)))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let (r, c) = self.shapes[a.0];
        let mut out = vec![F::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.values[a.0][i * c + j];
            }
        }
        let req = self.requires[a.0];
        self.push(c, r, out, req, Op::Transpose(a.0))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shapes[a.0];
        let sb = self.shapes[b.0];
        if sa != sb {
            return Err(Error::dimension("add", sa, sb));
        }
        let out: Vec<F> = self.values[a.0]
            .iter()
            .zip(&self.values[b.0])
            .map(|(&x, &y)| x + y)
            .collect();
        let req = self.requires[a.0] || self.requires[b.0];
        Ok(self.push(sa.0, sa.1, out, req, Op::Add(a.0, b.0)))
    }

    /// `a + bias` where `bias` is `1 x a.cols`, added to every row.
    pub fn add_row_broadcast(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (r, c) = self.shapes[a.0];
        let sb = self.shapes[bias.0];
        if sb != (1, c) {
            return Err(Error::dimension("add_row_broadcast", (r, c), sb));
        }
        let bv = &self.values[bias.0];
        let out: Vec<F> = self.values[a.0]
            .chunks(c)
            .flat_map(|row| row.iter().zip(bv).map(|(&x, &y)| x + y))
            .collect();
        let req = self.requires[a.0] || self.requires[bias.0];
        Ok(self.push(r, c, out, req, Op::AddRowBroadcast(a.0, bias.0)))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shapes[a.0];
        let sb = self.shapes[b.0];
        if sa != sb {
            return Err(Error::dimension("mul", sa, sb));
        }
        let out: Vec<F> = self.values[a.0]
            .iter()
            .zip(&self.values[b.0])
            .map(|(&x, &y)| x * y)
            .collect();
        let req = self.requires[a.0] || self.requires[b.0];
        Ok(self.push(sa.0, sa.1, out, req, Op::Mul(a.0, b.0)))
    }

    /// Scale row `i` of `a` by entry `i` of the `n x 1` column `scale`.
    pub fn scale_rows(&mut self, a: Var, scale: Var) -> Result<Var> {
        let (r, c) = self.shapes[a.0];
        let ss = self.shapes[scale.0];
        if ss != (r, 1) {
            return Err(Error::dimension("scale_rows", (r, c), ss));
        }
        let sv = &self.values[scale.0];
        let out: Vec<F> = self.values[a.0]
            .chunks(c)
            .zip(sv)
            .flat_map(|(row, &s)| row.iter().map(move |&x| x * s))
            .collect();
        let req = self.requires[a.0] || self.requires[scale.0];
        Ok(self.push(r, c, out, req, Op::ScaleRows(a.0, scale.0)))
    }

    /// Scale the whole matrix by a `1 x 1` tape scalar.
    pub fn scale_by(&mut self, a: Var, s: Var) -> Result<Var> {
        let (r, c) = self.shapes[a.0];
        let ss = self.shapes[s.0];
        if ss != (1, 1) {
            return Err(Error::dimension("scale_by", (r, c), ss));
        }
        let sv = self.values[s.0][0];
        let out: Vec<F> = self.values[a.0].iter().map(|&x| x * sv).collect();
        let req = self.requires[a.0] || self.requires[s.0];
        Ok(self.push(r, c, out, req, Op::ScaleBy(a.0, s.0)))
    }

    /// Scale by a constant factor; the factor is not differentiated.
    pub fn scale_const(&mut self, a: Var, factor: F) -> Var {
        let (r, c) = self.shapes[a.0];
        let out: Vec<F> = self.values[a.0].iter().map(|&x| x * factor).collect();
        let req = self.requires[a.0];
        self.push(r, c, out, req, Op::ScaleConst(a.0, factor))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let (r, c) = self.shapes[a.0];
        let out: Vec<F> = self.values[a.0]
            .iter()
            .map(|&x| if x > F::zero() { x } else { F::zero() })
            .collect();
        let req = self.requires[a.0];
        self.push(r, c, out, req, Op::Relu(a.0))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let (r, c) = self.shapes[a.0];
        let out: Vec<F> = self.values[a.0].iter().map(|&x| x.tanh()).collect();
        let req = self.requires[a.0];
        self.push(r, c, out, req, Op::Tanh(a.0))
    }

    /// Row-wise softmax, stabilized by subtracting each row's maximum.
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let (r, c) = self.shapes[a.0];
        let mut out = vec![F::zero(); r * c];
        for i in 0..r {
            let row = &self.values[a.0][i * c..(i + 1) * c];
            let max = row.iter().copied().fold(F::neg_infinity(), F::max);
            let out_row = &mut out[i * c..(i + 1) * c];
            let mut sum = F::zero();
            for (o, &x) in out_row.iter_mut().zip(row) {
                *o = (x - max).exp();
                sum = sum + *o;
            }
            for o in out_row.iter_mut() {
                *o = *o / sum;
            }
        }
        let req = self.requires[a.0];
        self.push(r, c, out, req, Op::SoftmaxRows(a.0))
    }

    /// Column-wise concatenation; all parts must share the row count.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Contract("concat_cols of zero parts".into()));
        }
        let r = self.shapes[parts[0].0].0;
        let mut total = 0;
        for p in parts {
            let sp = self.shapes[p.0];
            if sp.0 != r {
                return Err(Error::dimension("concat_cols", (r, total), sp));
            }
            total += sp.1;
        }
        let mut out = vec![F::zero(); r * total];
        let mut offset = 0;
        for p in parts {
            let (_, c) = self.shapes[p.0];
            for i in 0..r {
                out[i * total + offset..i * total + offset + c]
                    .copy_from_slice(&self.values[p.0][i * c..(i + 1) * c]);
            }
            offset += c;
        }
        let req = parts.iter().any(|p| self.requires[p.0]);
        Ok(self.push(r, total, out, req, Op::ConcatCols(parts.iter().map(|p| p.0).collect())))
    }

    /// Columns `[start, end)` of the input.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let (r, c) = self.shapes[a.0];
        if start >= end || end > c {
            return Err(Error::Contract(format!(
                "slice_cols [{start}, {end}) out of range for {r}x{c}"
            )));
        }
        let width = end - start;
        let mut out = vec![F::zero(); r * width];
        for i in 0..r {
            out[i * width..(i + 1) * width]
                .copy_from_slice(&self.values[a.0][i * c + start..i * c + end]);
        }
        let req = self.requires[a.0];
        Ok(self.push(r, width, out, req, Op::SliceCols { input: a.0, start }))
    }

    /// Reinterpret the row-major data under a new shape of equal size.
    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Result<Var> {
        let (r, c) = self.shapes[a.0];
        if r * c != rows * cols {
            return Err(Error::dimension("reshape", (r, c), (rows, cols)));
        }
        let out = self.values[a.0].clone();
        let req = self.requires[a.0];
        Ok(self.push(rows, cols, out, req, Op::Reshape(a.0)))
    }

    /// Sum of all entries, as a `1 x 1` tensor.
    pub fn sum_all(&mut self, a: Var) -> Var {
        let total = self.values[a.0]
            .iter()
            .fold(F::zero(), |acc, &x| acc + x);
        let req = self.requires[a.0];
        self.push(1, 1, vec![total], req, Op::SumAll(a.0))
    }

    /// `-ln(max(probs[index], clamp))` of a `1 x n` probability row.
    pub fn neg_log_entry(&mut self, probs: Var, index: usize) -> Result<Var> {
        let (r, c) = self.shapes[probs.0];
        if r != 1 {
            return Err(Error::dimension("neg_log_entry", (r, c), (1, c)));
        }
        if index >= c {
            return Err(Error::Contract(format!(
                "class index {index} out of range for {c} classes"
            )));
        }
        let clamp = F::from_f64(LOG_CLAMP);
        let p = self.values[probs.0][index].max(clamp);
        let out = vec![-p.ln()];
        let req = self.requires[probs.0];
        Ok(self.push(1, 1, out, req, Op::NegLogEntry { probs: probs.0, index }))
    }

    // ── backward pass ───────────────────────────────────────────────

    /// Populate gradients of every tracked node reachable from `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::BackwardConsumed);
        }
        let (r, c) = self.shapes[loss.0];
        if (r, c) != (1, 1) {
            return Err(Error::NonScalarLoss { rows: r, cols: c });
        }
        self.backward_done = true;
        if !self.requires[loss.0] {
            return Ok(());
        }
        self.grads[loss.0][0] = F::one();

        for i in (0..=loss.0).rev() {
            if !self.requires[i] {
                continue;
            }
            let gout = std::mem::take(&mut self.grads[i]);
            self.distribute(i, &gout);
            self.grads[i] = gout;
        }
        Ok(())
    }

    /// Add node `i`'s output gradient onto its inputs.
    fn distribute(&mut self, i: usize, gout: &[F]) {
        let op = self.ops[i].clone();
        match op {
            Op::Leaf => {}
            Op::Matmul(a, b) => {
                let (m, k) = self.shapes[a];
                let (_, n) = self.shapes[b];
                if self.requires[a] {
                    let mut ga = std::mem::take(&mut self.grads[a]);
                    let bv = &self.values[b];
                    for i0 in 0..m {
                        let go_row = &gout[i0 * n..(i0 + 1) * n];
                        let ga_row = &mut ga[i0 * k..(i0 + 1) * k];
                        for kk in 0..k {
                            let b_row = &bv[kk * n..(kk + 1) * n];
                            let mut acc = F::zero();
                            for (g, bvv) in go_row.iter().zip(b_row) {
                                acc = acc + *g * *bvv;
                            }
                            ga_row[kk] = ga_row[kk] + acc;
                        }
                    }
                    self.grads[a] = ga;
                }
                if self.requires[b] {
                    let mut gb = std::mem::take(&mut self.grads[b]);
                    let av = &self.values[a];
                    for i0 in 0..m {
                        let go_row = &gout[i0 * n..(i0 + 1) * n];
                        for (kk, &aik) in av[i0 * k..(i0 + 1) * k].iter().enumerate() {
                            if aik == F::zero() {
                                continue;
                            }
                            let gb_row = &mut gb[kk * n..(kk + 1) * n];
                            for (g, go) in gb_row.iter_mut().zip(go_row) {
                                *g = *g + aik * *go;
                            }
                        }
                    }
                    self.grads[b] = gb;
                }
            }
            Op::Transpose(a) => {
                if self.requires[a] {
                    let (r, c) = self.shapes[a];
                    for i0 in 0..r {
                        for j in 0..c {
                            self.grads[a][i0 * c + j] =
                                self.grads[a][i0 * c + j] + gout[j * r + i0];
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                for input in [a, b] {
                    if self.requires[input] {
                        for (g, go) in self.grads[input].iter_mut().zip(gout) {
                            *g = *g + *go;
                        }
                    }
                }
            }
            Op::AddRowBroadcast(a, bias) => {
                if self.requires[a] {
                    for (g, go) in self.grads[a].iter_mut().zip(gout) {
                        *g = *g + *go;
                    }
                }
                if self.requires[bias] {
                    let c = self.shapes[bias].1;
                    for row in gout.chunks(c) {
                        for (g, go) in self.grads[bias].iter_mut().zip(row) {
                            *g = *g + *go;
                        }
                    }
                }
            }
            Op::Mul(a, b) => {
                if self.requires[a] {
                    let bv = std::mem::take(&mut self.values[b]);
                    for ((g, go), x) in self.grads[a].iter_mut().zip(gout).zip(&bv) {
                        *g = *g + *go * *x;
                    }
                    self.values[b] = bv;
                }
                if self.requires[b] {
                    let av = std::mem::take(&mut self.values[a]);
                    for ((g, go), x) in self.grads[b].iter_mut().zip(gout).zip(&av) {
                        *g = *g + *go * *x;
                    }
                    self.values[a] = av;
                }
            }
            Op::ScaleRows(a, scale) => {
                let (r, c) = self.shapes[a];
                if self.requires[a] {
                    let sv = std::mem::take(&mut self.values[scale]);
                    for i0 in 0..r {
                        let s = sv[i0];
                        let grow = &mut self.grads[a][i0 * c..(i0 + 1) * c];
                        let gorow = &gout[i0 * c..(i0 + 1) * c];
                        for (g, go) in grow.iter_mut().zip(gorow) {
                            *g = *g + *go * s;
                        }
                    }
                    self.values[scale] = sv;
                }
                if self.requires[scale] {
                    let av = std::mem::take(&mut self.values[a]);
                    for i0 in 0..r {
                        let arow = &av[i0 * c..(i0 + 1) * c];
                        let gorow = &gout[i0 * c..(i0 + 1) * c];
                        let mut acc = F::zero();
                        for (x, go) in arow.iter().zip(gorow) {
                            acc = acc + *x * *go;
                        }
                        self.grads[scale][i0] = self.grads[scale][i0] + acc;
                    }
                    self.values[a] = av;
                }
            }
            Op::ScaleBy(a, s) => {
                if self.requires[a] {
                    let sv = self.values[s][0];
                    for (g, go) in self.grads[a].iter_mut().zip(gout) {
                        *g = *g + *go * sv;
                    }
                }
                if self.requires[s] {
                    let av = std::mem::take(&mut self.values[a]);
                    let mut acc = F::zero();
                    for (x, go) in av.iter().zip(gout) {
                        acc = acc + *x * *go;
                    }
                    self.grads[s][0] = self.grads[s][0] + acc;
                    self.values[a] = av;
                }
            }
            Op::ScaleConst(a, factor) => {
                if self.requires[a] {
                    for (g, go) in self.grads[a].iter_mut().zip(gout) {
                        *g = *g + *go * factor;
                    }
                }
            }
            Op::Relu(a) => {
                if self.requires[a] {
                    let av = std::mem::take(&mut self.values[a]);
                    for ((g, go), x) in self.grads[a].iter_mut().zip(gout).zip(&av) {
                        if *x > F::zero() {
                            *g = *g + *go;
                        }
                    }
                    self.values[a] = av;
                }
            }
            Op::Tanh(a) => {
                if self.requires[a] {
                    let yv = &self.values[i];
                    let one = F::one();
                    let mut ga = std::mem::take(&mut self.grads[a]);
                    for ((g, go), y) in ga.iter_mut().zip(gout).zip(yv) {
                        *g = *g + *go * (one - *y * *y);
                    }
                    self.grads[a] = ga;
                }
            }
            Op::SoftmaxRows(a) => {
                if self.requires[a] {
                    let (r, c) = self.shapes[a];
                    let yv = std::mem::take(&mut self.values[i]);
                    for i0 in 0..r {
                        let y = &yv[i0 * c..(i0 + 1) * c];
                        let go = &gout[i0 * c..(i0 + 1) * c];
                        let mut dot = F::zero();
                        for (yj, goj) in y.iter().zip(go) {
                            dot = dot + *yj * *goj;
                        }
                        let grow = &mut self.grads[a][i0 * c..(i0 + 1) * c];
                        for ((g, yj), goj) in grow.iter_mut().zip(y).zip(go) {
                            *g = *g + *yj * (*goj - dot);
                        }
                    }
                    self.values[i] = yv;
                }
            }
            Op::ConcatCols(parts) => {
                let total = self.shapes[i].1;
                let r = self.shapes[i].0;
                let mut offset = 0;
                for p in parts {
                    let c = self.shapes[p].1;
                    if self.requires[p] {
                        for i0 in 0..r {
                            let src = &gout[i0 * total + offset..i0 * total + offset + c];
                            let dst = &mut self.grads[p][i0 * c..(i0 + 1) * c];
                            for (g, go) in dst.iter_mut().zip(src) {
                                *g = *g + *go;
                            }
                        }
                    }
                    offset += c;
                }
            }
            Op::SliceCols { input, start } => {
                if self.requires[input] {
                    let (r, width) = self.shapes[i];
                    let c = self.shapes[input].1;
                    for i0 in 0..r {
                        let src = &gout[i0 * width..(i0 + 1) * width];
                        let dst =
                            &mut self.grads[input][i0 * c + start..i0 * c + start + width];
                        for (g, go) in dst.iter_mut().zip(src) {
                            *g = *g + *go;
                        }
                    }
                }
            }
            Op::Reshape(a) => {
                if self.requires[a] {
                    for (g, go) in self.grads[a].iter_mut().zip(gout) {
                        *g = *g + *go;
                    }
                }
            }
            Op::SumAll(a) => {
                if self.requires[a] {
                    let go = gout[0];
                    for g in self.grads[a].iter_mut() {
                        *g = *g + go;
                    }
                }
            }
            Op::NegLogEntry { probs, index } => {
                if self.requires[probs] {
                    let clamp = F::from_f64(LOG_CLAMP);
                    let p = self.values[probs][index];
                    if p > clamp {
                        self.grads[probs][index] = self.grads[probs][index] - gout[0] / p;
                    }
                }
            }
        }
    }
}

/// Central finite differences of a scalar-valued function, entry by entry:
/// `(f(x + eps e) - f(x - eps e)) / (2 eps)`.
///
/// This is the verification oracle for `backward`; it shares no code with
/// the tape. `eps` must be positive (1e-5 is the usual choice in f64).
pub fn finite_difference_grad<F: Scalar>(
    mut f: impl FnMut(&Tensor<F>) -> F,
    at: &Tensor<F>,
    eps: F,
) -> Tensor<F> {
    assert!(eps > F::zero(), "finite differences need a positive step");
    let mut x = at.clone();
    let mut grad = Tensor::zeros(at.rows(), at.cols());
    let two = F::from_f64(2.0);
    for idx in 0..at.len() {
        let orig = x.data()[idx];
        x.data_mut()[idx] = orig + eps;
        let up = f(&x);
        x.data_mut()[idx] = orig - eps;
        let down = f(&x);
        x.data_mut()[idx] = orig;
        grad.data_mut()[idx] = (up - down) / (two * eps);
    }
    grad
}
