//! Reverse-mode automatic differentiation over dense 2-D values.
//!
//! Every forward operation appends a node to the [`Tape`]; [`Tape::backward`]
//! walks the nodes in exact reverse recording order. Gradients are returned in
//! a separate [`Gradients`] table, so the tape itself is never mutated by a
//! backward pass and repeated passes give identical results.

use super::tensor::{matmul_acc, matmul_at_acc, matmul_bt_acc, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Offset(Var, f64),
    Neg(Var),
    Exp(Var),
    Log(Var),
    Tanh(Var),
    Relu(Var),
    Square(Var),
    Sqrt(Var),
    Softplus(Var),
    Clamp(Var, f64, f64),
    Sum(Var),
    Mean(Var),
    SumCols(Var),
    Concat(Vec<Var>),
    Slice(Var, usize, usize),
    GatherRows(Var, Vec<usize>),
    StopGrad,
    StraightThrough(Var),
}

#[derive(Clone, Debug)]
struct Node {
    rows: usize,
    cols: usize,
    value: Vec<f64>,
    op: Op,
    needs_grad: bool,
}

#[derive(Default, Debug, Clone)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradient table produced by [`Tape::backward`].
#[derive(Debug, Clone, Default)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient of the loss w.r.t. `v`, or `None` when no gradient reached it.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Like [`get`](Self::get) but materializes zeros for unreached values.
    pub fn get_or_zero(&self, v: Var, len: usize) -> Vec<f64> {
        self.get(v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; len])
    }
}

fn same_or_scalar(op: &'static str, a: (usize, usize), b: (usize, usize)) -> Result<(usize, usize)> {
    if a == b || b == (1, 1) {
        Ok(a)
    } else if a == (1, 1) {
        Ok(b)
    } else {
        Err(Error::shape(op, format!("{}x{} vs {}x{}", a.0, a.1, b.0, b.1)))
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::with_capacity(256) }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, rows: usize, cols: usize, value: Vec<f64>, op: Op, needs_grad: bool) -> Var {
        debug_assert_eq!(rows * cols, value.len());
        self.nodes.push(Node { rows, cols, value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        let n = self.node(v);
        (n.rows, n.cols)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.node(v).value
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        self.node(v).value[0]
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        let n = self.node(v);
        Tensor::from_rows(n.rows, n.cols, n.value.clone())
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.node(v).needs_grad
    }

    /// Trainable leaf.
    pub fn param(&mut self, t: &Tensor) -> Var {
        self.push(t.rows(), t.cols(), t.data().to_vec(), Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, t: &Tensor) -> Var {
        self.push(t.rows(), t.cols(), t.data().to_vec(), Op::Leaf, false)
    }

    pub fn constant_rows(&mut self, rows: usize, cols: usize, data: Vec<f64>) -> Var {
        assert_eq!(rows * cols, data.len(), "constant_rows: {rows}x{cols} != {}", data.len());
        self.push(rows, cols, data, Op::Leaf, false)
    }

    pub fn scalar(&mut self, v: f64) -> Var {
        self.push(1, 1, vec![v], Op::Leaf, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.shape(a);
        let (k2, n) = self.shape(b);
        if k != k2 {
            return Err(Error::shape("matmul", format!("{m}x{k} @ {k2}x{n}")));
        }
        let mut out = vec![0.0; m * n];
        matmul_acc(self.value(a), self.value(b), &mut out, m, k, n);
        let ng = self.requires_grad(a) || self.requires_grad(b);
        Ok(self.push(m, n, out, Op::MatMul(a, b), ng))
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        op: Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        let (rows, cols) = same_or_scalar(name, sa, sb)?;
        let va = self.value(a);
        let vb = self.value(b);
        let n = rows * cols;
        let out: Vec<f64> = if sa == sb {
            va.iter().zip(vb).map(|(&x, &y)| f(x, y)).collect()
        } else if sb == (1, 1) {
            let y = vb[0];
            va.iter().map(|&x| f(x, y)).collect()
        } else {
            let x = va[0];
            vb.iter().map(|&y| f(x, y)).collect()
        };
        debug_assert_eq!(out.len(), n);
        let ng = self.requires_grad(a) || self.requires_grad(b);
        Ok(self.push(rows, cols, out, op, ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("div", a, b, Op::Div(a, b), |x, y| x / y)
    }

    /// `x[m,n] + row[1,n]`, broadcasting the row over every row of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (m, n) = self.shape(x);
        let (r, c) = self.shape(row);
        if r != 1 || c != n {
            return Err(Error::shape("add_row", format!("{m}x{n} + {r}x{c}")));
        }
        let b = self.value(row);
        let mut out = self.value(x).to_vec();
        for chunk in out.chunks_mut(n) {
            for (o, &bv) in chunk.iter_mut().zip(b) {
                *o += bv;
            }
        }
        let ng = self.requires_grad(x) || self.requires_grad(row);
        Ok(self.push(m, n, out, Op::AddRow(x, row), ng))
    }

    fn unary(&mut self, x: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let (m, n) = self.shape(x);
        let out = self.value(x).iter().map(|&v| f(v)).collect();
        let ng = self.requires_grad(x);
        self.push(m, n, out, op, ng)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, Op::Scale(x, c), |v| v * c)
    }

    pub fn offset(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, Op::Offset(x, c), |v| v + c)
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.unary(x, Op::Neg(x), |v| -v)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, Op::Exp(x), f64::exp)
    }

    pub fn log(&mut self, x: Var) -> Var {
        self.unary(x, Op::Log(x), f64::ln)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, Op::Tanh(x), f64::tanh)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, Op::Relu(x), |v| v.max(0.0))
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, Op::Square(x), |v| v * v)
    }

    pub fn sqrt(&mut self, x: Var) -> Var {
        self.unary(x, Op::Sqrt(x), f64::sqrt)
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary(x, Op::Softplus(x), |v| v.max(0.0) + (-v.abs()).exp().ln_1p())
    }

    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        self.unary(x, Op::Clamp(x, lo, hi), |v| v.clamp(lo, hi))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().sum();
        let ng = self.requires_grad(x);
        self.push(1, 1, vec![s], Op::Sum(x), ng)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let s = v.iter().sum::<f64>() / v.len() as f64;
        let ng = self.requires_grad(x);
        self.push(1, 1, vec![s], Op::Mean(x), ng)
    }

    /// Row-wise sum: `[m,n] -> [m,1]`.
    pub fn sum_cols(&mut self, x: Var) -> Var {
        let (m, n) = self.shape(x);
        let out = self.value(x).chunks(n.max(1)).map(|r| r.iter().sum()).collect();
        let ng = self.requires_grad(x);
        self.push(m, 1, out, Op::SumCols(x), ng)
    }

    /// Column-wise concatenation of equally tall values.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::shape("concat", "no operands"));
        };
        let m = self.shape(first).0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.shape(p);
            if r != m {
                return Err(Error::shape("concat", format!("row counts {m} vs {r}")));
            }
            widths.push(c);
        }
        let n: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(m * n);
        for i in 0..m {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p)[i * w..(i + 1) * w]);
            }
        }
        let ng = parts.iter().any(|&p| self.requires_grad(p));
        Ok(self.push(m, n, out, Op::Concat(parts.to_vec()), ng))
    }

    /// Columns `[start, end)`.
    pub fn slice(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (m, n) = self.shape(x);
        if start > end || end > n {
            return Err(Error::shape("slice", format!("columns {start}..{end} of {m}x{n}")));
        }
        let w = end - start;
        let v = self.value(x);
        let mut out = Vec::with_capacity(m * w);
        for i in 0..m {
            out.extend_from_slice(&v[i * n + start..i * n + end]);
        }
        let ng = self.requires_grad(x);
        Ok(self.push(m, w, out, Op::Slice(x, start, end), ng))
    }

    /// Selects rows of `x` by index (repeats allowed).
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let (m, n) = self.shape(x);
        if let Some(&bad) = idx.iter().find(|&&i| i >= m) {
            return Err(Error::shape("gather_rows", format!("row {bad} of {m}x{n}")));
        }
        let v = self.value(x);
        let mut out = Vec::with_capacity(idx.len() * n);
        for &i in idx {
            out.extend_from_slice(&v[i * n..(i + 1) * n]);
        }
        let ng = self.requires_grad(x);
        Ok(self.push(idx.len(), n, out, Op::GatherRows(x, idx.to_vec()), ng))
    }

    /// `sg[x]`: identity forward, no gradient backward.
    pub fn stop_grad(&mut self, x: Var) -> Var {
        let (m, n) = self.shape(x);
        let v = self.value(x).to_vec();
        self.push(m, n, v, Op::StopGrad, false)
    }

    /// Forward value is exactly `value`; the backward pass hands the incoming
    /// gradient to `source` unchanged.
    pub fn straight_through(&mut self, source: Var, value: Vec<f64>) -> Result<Var> {
        let (m, n) = self.shape(source);
        if value.len() != m * n {
            return Err(Error::shape(
                "straight_through",
                format!("source {m}x{n}, value of length {}", value.len()),
            ));
        }
        let ng = self.requires_grad(source);
        Ok(self.push(m, n, value, Op::StraightThrough(source), ng))
    }

    /// Re-runs the recorded forward pass with some leaves replaced.
    ///
    /// Stop-gradient nodes keep their recorded values and straight-through
    /// nodes shift by the change in their source, so finite differences of
    /// the replayed values follow the same rules as [`Tape::backward`].
    pub fn replay(&self, overrides: &[(Var, &[f64])]) -> Result<Tape> {
        let mut t = Tape { nodes: Vec::with_capacity(self.nodes.len()) };
        for (i, node) in self.nodes.iter().enumerate() {
            let v = match &node.op {
                Op::Leaf => {
                    let value = match overrides.iter().find(|(v, _)| v.0 == i) {
                        Some((_, d)) if d.len() == node.value.len() => d.to_vec(),
                        Some((_, d)) => {
                            return Err(Error::shape("replay", format!("leaf of length {} given {}", node.value.len(), d.len())))
                        }
                        None => node.value.clone(),
                    };
                    t.push(node.rows, node.cols, value, Op::Leaf, node.needs_grad)
                }
                Op::MatMul(a, b) => t.matmul(*a, *b)?,
                Op::Add(a, b) => t.add(*a, *b)?,
                Op::Sub(a, b) => t.sub(*a, *b)?,
                Op::Mul(a, b) => t.mul(*a, *b)?,
                Op::Div(a, b) => t.div(*a, *b)?,
                Op::AddRow(x, r) => t.add_row(*x, *r)?,
                Op::Scale(x, c) => t.scale(*x, *c),
                Op::Offset(x, c) => t.offset(*x, *c),
                Op::Neg(x) => t.neg(*x),
                Op::Exp(x) => t.exp(*x),
                Op::Log(x) => t.log(*x),
                Op::Tanh(x) => t.tanh(*x),
                Op::Relu(x) => t.relu(*x),
                Op::Square(x) => t.square(*x),
                Op::Sqrt(x) => t.sqrt(*x),
                Op::Softplus(x) => t.softplus(*x),
                Op::Clamp(x, lo, hi) => t.clamp(*x, *lo, *hi),
                Op::Sum(x) => t.sum(*x),
                Op::Mean(x) => t.mean(*x),
                Op::SumCols(x) => t.sum_cols(*x),
                Op::Concat(parts) => t.concat(parts)?,
                Op::Slice(x, s, e) => t.slice(*x, *s, *e)?,
                Op::GatherRows(x, idx) => t.gather_rows(*x, idx)?,
                Op::StopGrad => t.push(node.rows, node.cols, node.value.clone(), Op::StopGrad, false),
                Op::StraightThrough(src) => {
                    let shifted = node
                        .value
                        .iter()
                        .zip(t.value(*src))
                        .zip(self.value(*src))
                        .map(|((&v, &new), &old)| v + (new - old))
                        .collect();
                    t.straight_through(*src, shifted)?
                }
            };
            debug_assert_eq!(v.0, i);
        }
        Ok(t)
    }

    /// Gradients of the scalar `loss` w.r.t. every value that requires one.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.nodes.is_empty() {
            return Ok(Gradients::default());
        }
        let (r, c) = self.shape(loss);
        if (r, c) != (1, 1) {
            return Err(Error::NonScalarLoss(vec![r, c]));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if node.needs_grad {
                self.propagate(node, &g, &mut grads);
            }
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], v: Var, f: impl FnOnce(&mut [f64])) {
        let node = &self.nodes[v.0];
        if !node.needs_grad {
            return;
        }
        let slot = grads[v.0].get_or_insert_with(|| vec![0.0; node.value.len()]);
        f(slot);
    }

    fn binary_grad(
        &self,
        grads: &mut [Option<Vec<f64>>],
        g: &[f64],
        a: Var,
        b: Var,
        da: impl Fn(f64, f64, f64) -> f64,
        db: impl Fn(f64, f64, f64) -> f64,
    ) {
        let va = &self.nodes[a.0].value;
        let vb = &self.nodes[b.0].value;
        let (la, lb) = (va.len(), vb.len());
        let x_at = |i: usize| if la == 1 { va[0] } else { va[i] };
        let y_at = |i: usize| if lb == 1 { vb[0] } else { vb[i] };
        self.accumulate(grads, a, |ga| {
            if la == 1 && g.len() != 1 {
                ga[0] += (0..g.len()).map(|i| da(g[i], x_at(i), y_at(i))).sum::<f64>();
            } else {
                for (i, gi) in ga.iter_mut().enumerate() {
                    *gi += da(g[i], x_at(i), y_at(i));
                }
            }
        });
        self.accumulate(grads, b, |gb| {
            if lb == 1 && g.len() != 1 {
                gb[0] += (0..g.len()).map(|i| db(g[i], x_at(i), y_at(i))).sum::<f64>();
            } else {
                for (i, gi) in gb.iter_mut().enumerate() {
                    *gi += db(g[i], x_at(i), y_at(i));
                }
            }
        });
    }

    fn unary_grad(&self, grads: &mut [Option<Vec<f64>>], g: &[f64], x: Var, out: &[f64], d: impl Fn(f64, f64) -> f64) {
        let vx = &self.nodes[x.0].value;
        self.accumulate(grads, x, |gx| {
            for i in 0..gx.len() {
                gx[i] += g[i] * d(vx[i], out[i]);
            }
        });
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let out = &node.value;
        match &node.op {
            Op::Leaf | Op::StopGrad => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.shape(*a);
                let n = self.shape(*b).1;
                let va = &self.nodes[a.0].value;
                let vb = &self.nodes[b.0].value;
                self.accumulate(grads, *a, |ga| matmul_bt_acc(g, vb, ga, m, k, n));
                self.accumulate(grads, *b, |gb| matmul_at_acc(va, g, gb, m, k, n));
            }
            Op::Add(a, b) => self.binary_grad(grads, g, *a, *b, |g, _, _| g, |g, _, _| g),
            Op::Sub(a, b) => self.binary_grad(grads, g, *a, *b, |g, _, _| g, |g, _, _| -g),
            Op::Mul(a, b) => self.binary_grad(grads, g, *a, *b, |g, _, y| g * y, |g, x, _| g * x),
            Op::Div(a, b) => {
                self.binary_grad(grads, g, *a, *b, |g, _, y| g / y, |g, x, y| -g * x / (y * y))
            }
            Op::AddRow(x, row) => {
                let n = node.cols;
                self.accumulate(grads, *x, |gx| {
                    for (a, &b) in gx.iter_mut().zip(g) {
                        *a += b;
                    }
                });
                self.accumulate(grads, *row, |gr| {
                    for chunk in g.chunks(n) {
                        for (a, &b) in gr.iter_mut().zip(chunk) {
                            *a += b;
                        }
                    }
                });
            }
            Op::Scale(x, c) => {
                let c = *c;
                self.unary_grad(grads, g, *x, out, |_, _| c)
            }
            Op::Offset(x, _) => self.unary_grad(grads, g, *x, out, |_, _| 1.0),
            Op::Neg(x) => self.unary_grad(grads, g, *x, out, |_, _| -1.0),
            Op::Exp(x) => self.unary_grad(grads, g, *x, out, |_, y| y),
            Op::Log(x) => self.unary_grad(grads, g, *x, out, |v, _| 1.0 / v),
            Op::Tanh(x) => self.unary_grad(grads, g, *x, out, |_, y| 1.0 - y * y),
            Op::Relu(x) => self.unary_grad(grads, g, *x, out, |v, _| if v > 0.0 { 1.0 } else { 0.0 }),
            Op::Square(x) => self.unary_grad(grads, g, *x, out, |v, _| 2.0 * v),
            Op::Sqrt(x) => self.unary_grad(grads, g, *x, out, |_, y| 0.5 / y),
            Op::Softplus(x) => self.unary_grad(grads, g, *x, out, |v, _| 1.0 / (1.0 + (-v).exp())),
            Op::Clamp(x, lo, hi) => {
                let (lo, hi) = (*lo, *hi);
                self.unary_grad(grads, g, *x, out, |v, _| if v >= lo && v <= hi { 1.0 } else { 0.0 })
            }
            Op::Sum(x) => {
                let g0 = g[0];
                self.accumulate(grads, *x, |gx| gx.iter_mut().for_each(|a| *a += g0));
            }
            Op::Mean(x) => {
                let len = self.nodes[x.0].value.len() as f64;
                let g0 = g[0] / len;
                self.accumulate(grads, *x, |gx| gx.iter_mut().for_each(|a| *a += g0));
            }
            Op::SumCols(x) => {
                let n = self.shape(*x).1;
                self.accumulate(grads, *x, |gx| {
                    for (row, &gi) in gx.chunks_mut(n.max(1)).zip(g) {
                        row.iter_mut().for_each(|a| *a += gi);
                    }
                });
            }
            Op::Concat(parts) => {
                let total = node.cols;
                let mut offset = 0;
                for &p in parts {
                    let w = self.shape(p).1;
                    self.accumulate(grads, p, |gp| {
                        for (i, row) in gp.chunks_mut(w.max(1)).enumerate() {
                            let src = &g[i * total + offset..i * total + offset + w];
                            for (a, &b) in row.iter_mut().zip(src) {
                                *a += b;
                            }
                        }
                    });
                    offset += w;
                }
            }
            Op::Slice(x, start, end) => {
                let n = self.shape(*x).1;
                let w = end - start;
                self.accumulate(grads, *x, |gx| {
                    for (i, src) in g.chunks(w.max(1)).enumerate() {
                        let dst = &mut gx[i * n + start..i * n + end];
                        for (a, &b) in dst.iter_mut().zip(src) {
                            *a += b;
                        }
                    }
                });
            }
            Op::GatherRows(x, idx) => {
                let n = node.cols;
                self.accumulate(grads, *x, |gx| {
                    for (r, &i) in idx.iter().enumerate() {
                        let src = &g[r * n..(r + 1) * n];
                        for (a, &b) in gx[i * n..(i + 1) * n].iter_mut().zip(src) {
                            *a += b;
                        }
                    }
                });
            }
            Op::StraightThrough(src) => {
                self.accumulate(grads, *src, |gs| {
                    for (a, &b) in gs.iter_mut().zip(g) {
                        *a += b;
                    }
                });
            }
        }
    }
}
