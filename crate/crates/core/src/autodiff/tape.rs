//! Reverse-mode tape over batched matrices.
//!
//! Nodes are appended in evaluation order, so the node list is a topological
//! order by construction. Values are computed eagerly when a node is
//! recorded; [`Tape::backward`] sweeps the list once in reverse. Because the
//! derivative of an [`Op::Act`] node is itself an activation node of the next
//! order, reverse sweeps recorded on the tape can be differentiated again,
//! which is how losses containing `∂_x v` or `∂²_xx v` get parameter
//! gradients.

use alloc::format;
use alloc::vec::Vec;

use super::activation::Activation;
use super::matrix::{affine, gemm_acc, Matrix};
use crate::error::{Error, Result};
use crate::math;

/// Handle to a tape node.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
pub enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    /// `[R x C] + [1 x C]`
    AddRow(Var, Var),
    /// `[R x C] * [1 x C]`
    MulRow(Var, Var),
    /// `[R x C] * [R x 1]`
    MulCol(Var, Var),
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    /// `x w^T + b`
    Affine { x: Var, w: Var, b: Var },
    /// `σ^{(order)}(x)` elementwise.
    Act { x: Var, kind: Activation, order: u32 },
    /// `[R x C] -> [R x 1]`
    RowSum(Var),
    /// `-> [1 x 1]`
    Sum(Var),
    Gather { x: Var, rows: Vec<u32> },
    SliceCols { x: Var, start: usize, len: usize },
    /// Square root with zero derivative where the value is zero.
    Sqrt(Var),
}

struct Node {
    op: Op,
    value: Matrix,
    grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Adjoints of the leaves reached by a backward sweep.
pub struct Gradients {
    adj: Vec<Option<Matrix>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Matrix> {
        self.adj.get(v.0).and_then(|a| a.as_ref())
    }

    /// Copies the adjoint of `v` into `out`, or zeros when `v` was not reached.
    pub fn write(&self, v: Var, out: &mut [f64]) {
        match self.get(v) {
            Some(m) => out.copy_from_slice(&m.data),
            None => out.iter_mut().for_each(|o| *o = 0.0),
        }
    }
}

fn mismatch(node: usize, detail: alloc::string::String) -> Error {
    Error::ShapeMismatch { node, detail }
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

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].grad
    }

    fn push(&mut self, op: Op, value: Matrix, grad: bool) -> Var {
        self.nodes.push(Node { op, value, grad });
        Var(self.nodes.len() - 1)
    }

    fn next_index(&self) -> usize {
        self.nodes.len()
    }

    /// Leaf whose adjoint is tracked.
    pub fn param(&mut self, value: Matrix) -> Var {
        self.push(Op::Leaf, value, true)
    }

    /// Leaf excluded from differentiation.
    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(Op::Leaf, value, false)
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(mismatch(
                self.next_index(),
                format!("{what}: {:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    fn zip(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Matrix {
        let (x, y) = (self.value(a), self.value(b));
        let data = x.data.iter().zip(&y.data).map(|(p, q)| f(*p, *q)).collect();
        Matrix::from_vec(x.rows, x.cols, data)
    }

    fn grad2(&self, a: Var, b: Var) -> bool {
        self.nodes[a.0].grad || self.nodes[b.0].grad
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let v = self.zip(a, b, |p, q| p + q);
        let g = self.grad2(a, b);
        Ok(self.push(Op::Add(a, b), v, g))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let v = self.zip(a, b, |p, q| p - q);
        let g = self.grad2(a, b);
        Ok(self.push(Op::Sub(a, b), v, g))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let v = self.zip(a, b, |p, q| p * q);
        let g = self.grad2(a, b);
        Ok(self.push(Op::Mul(a, b), v, g))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let mut v = self.value(a).clone();
        v.data.iter_mut().for_each(|x| *x *= c);
        let g = self.nodes[a.0].grad;
        self.push(Op::Scale(a, c), v, g)
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (r, c) = self.shape(a);
        if self.shape(row) != (1, c) {
            return Err(mismatch(self.next_index(), format!("add_row: {:?} vs {:?}", (r, c), self.shape(row))));
        }
        let mut v = self.value(a).clone();
        let b = &self.value(row).data;
        for i in 0..r {
            for (x, y) in v.row_mut(i).iter_mut().zip(b) {
                *x += y;
            }
        }
        let g = self.grad2(a, row);
        Ok(self.push(Op::AddRow(a, row), v, g))
    }

    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (r, c) = self.shape(a);
        if self.shape(row) != (1, c) {
            return Err(mismatch(self.next_index(), format!("mul_row: {:?} vs {:?}", (r, c), self.shape(row))));
        }
        let mut v = self.value(a).clone();
        let b = &self.value(row).data;
        for i in 0..r {
            for (x, y) in v.row_mut(i).iter_mut().zip(b) {
                *x *= y;
            }
        }
        let g = self.grad2(a, row);
        Ok(self.push(Op::MulRow(a, row), v, g))
    }

    pub fn mul_col(&mut self, a: Var, col: Var) -> Result<Var> {
        let (r, c) = self.shape(a);
        if self.shape(col) != (r, 1) {
            return Err(mismatch(self.next_index(), format!("mul_col: {:?} vs {:?}", (r, c), self.shape(col))));
        }
        let mut v = self.value(a).clone();
        let s = &self.value(col).data;
        for i in 0..r {
            let k = s[i];
            v.row_mut(i).iter_mut().for_each(|x| *x *= k);
        }
        let g = self.grad2(a, col);
        Ok(self.push(Op::MulCol(a, col), v, g))
    }

    pub fn matmul(&mut self, a: Var, ta: bool, b: Var, tb: bool) -> Result<Var> {
        let (ar, ac) = self.shape(a);
        let (br, bc) = self.shape(b);
        let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
        let (k2, n) = if tb { (bc, br) } else { (br, bc) };
        if k != k2 {
            return Err(mismatch(
                self.next_index(),
                format!("matmul inner dims {k} vs {k2}"),
            ));
        }
        let mut v = Matrix::zeros(m, n);
        gemm_acc(self.value(a), ta, self.value(b), tb, &mut v);
        let g = self.grad2(a, b);
        Ok(self.push(Op::MatMul { a, b, ta, tb }, v, g))
    }

    /// Fused `x w^T + b` with `w: [out x in]`, `b: [1 x out]`.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (_, xin) = self.shape(x);
        let (wo, wi) = self.shape(w);
        if xin != wi || self.shape(b) != (1, wo) {
            return Err(mismatch(
                self.next_index(),
                format!(
                    "affine: x {:?}, w {:?}, b {:?}",
                    self.shape(x),
                    self.shape(w),
                    self.shape(b)
                ),
            ));
        }
        let v = affine(self.value(x), self.value(w), &self.value(b).data);
        let g = self.nodes[x.0].grad || self.nodes[w.0].grad || self.nodes[b.0].grad;
        Ok(self.push(Op::Affine { x, w, b }, v, g))
    }

    pub fn act(&mut self, x: Var, kind: Activation, order: u32) -> Var {
        let src = self.value(x);
        let v = if kind.vanishes(order) {
            Matrix::zeros(src.rows, src.cols)
        } else {
            let data = kind.map(order, &src.data, None);
            Matrix::from_vec(src.rows, src.cols, data)
        };
        let g = self.nodes[x.0].grad && !kind.vanishes(order);
        self.push(Op::Act { x, kind, order }, v, g)
    }

    pub fn sin(&mut self, x: Var) -> Var {
        self.act(x, Activation::Sin, 0)
    }

    pub fn row_sum(&mut self, x: Var) -> Var {
        let m = self.value(x);
        let data = (0..m.rows).map(|r| m.row(r).iter().sum()).collect();
        let v = Matrix::column(data);
        let g = self.nodes[x.0].grad;
        self.push(Op::RowSum(x), v, g)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let v = Matrix::scalar(self.value(x).sum());
        let g = self.nodes[x.0].grad;
        self.push(Op::Sum(x), v, g)
    }

    pub fn gather(&mut self, x: Var, rows: Vec<u32>) -> Result<Var> {
        let src = self.value(x);
        let mut v = Matrix::zeros(rows.len(), src.cols);
        for (i, &r) in rows.iter().enumerate() {
            if r as usize >= src.rows {
                return Err(mismatch(self.next_index(), format!("gather row {r} of {}", src.rows)));
            }
            v.row_mut(i).copy_from_slice(src.row(r as usize));
        }
        let g = self.nodes[x.0].grad;
        Ok(self.push(Op::Gather { x, rows }, v, g))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let src = self.value(x);
        if start + len > src.cols {
            return Err(mismatch(self.next_index(), format!("slice {start}+{len} of {} cols", src.cols)));
        }
        let mut v = Matrix::zeros(src.rows, len);
        for r in 0..src.rows {
            v.row_mut(r).copy_from_slice(&src.row(r)[start..start + len]);
        }
        let g = self.nodes[x.0].grad;
        Ok(self.push(Op::SliceCols { x, start, len }, v, g))
    }

    pub fn sqrt(&mut self, x: Var) -> Var {
        let src = self.value(x);
        let data = src.data.iter().map(|&y| math::sqrt(y.max(0.0))).collect();
        let v = Matrix::from_vec(src.rows, src.cols, data);
        let g = self.nodes[x.0].grad;
        self.push(Op::Sqrt(x), v, g)
    }

    /// Row-wise squared Euclidean norm, `[R x C] -> [R x 1]`.
    pub fn sq_norm_rows(&mut self, x: Var) -> Result<Var> {
        let sq = self.mul(x, x)?;
        Ok(self.row_sum(sq))
    }

    /// Reverse sweep seeded with the given output adjoints. Seeds must match
    /// the shapes of their nodes; several seeds accumulate.
    pub fn backward(&self, seeds: &[(Var, Matrix)]) -> Result<Gradients> {
        let n = self.nodes.len();
        let mut adj: Vec<Option<Matrix>> = (0..n).map(|_| None).collect();
        for (v, s) in seeds {
            if s.shape() != self.shape(*v) {
                return Err(mismatch(v.0, format!("seed {:?} vs node {:?}", s.shape(), self.shape(*v))));
            }
            accumulate(&mut adj[v.0], s);
        }
        for i in (0..n).rev() {
            let node = &self.nodes[i];
            if !node.grad {
                adj[i] = None;
                continue;
            }
            let g = match &node.op {
                Op::Leaf => continue,
                _ => match adj[i].take() {
                    Some(g) => g,
                    None => continue,
                },
            };
            self.propagate(i, &g, &mut adj);
        }
        Ok(Gradients { adj })
    }

    fn propagate(&self, i: usize, g: &Matrix, adj: &mut [Option<Matrix>]) {
        let node = &self.nodes[i];
        let wants = |v: Var| self.nodes[v.0].grad;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if wants(*a) {
                    accumulate(&mut adj[a.0], g);
                }
                if wants(*b) {
                    accumulate(&mut adj[b.0], g);
                }
            }
            Op::Sub(a, b) => {
                if wants(*a) {
                    accumulate(&mut adj[a.0], g);
                }
                if wants(*b) {
                    let mut neg = g.clone();
                    neg.data.iter_mut().for_each(|x| *x = -*x);
                    accumulate(&mut adj[b.0], &neg);
                }
            }
            Op::Mul(a, b) => {
                if wants(*a) {
                    let d = hadamard(g, self.value(*b));
                    accumulate(&mut adj[a.0], &d);
                }
                if wants(*b) {
                    let d = hadamard(g, self.value(*a));
                    accumulate(&mut adj[b.0], &d);
                }
            }
            Op::Scale(a, c) => {
                if wants(*a) {
                    let mut d = g.clone();
                    d.data.iter_mut().for_each(|x| *x *= c);
                    accumulate(&mut adj[a.0], &d);
                }
            }
            Op::AddRow(a, row) => {
                if wants(*a) {
                    accumulate(&mut adj[a.0], g);
                }
                if wants(*row) {
                    accumulate(&mut adj[row.0], &g.col_sums());
                }
            }
            Op::MulRow(a, row) => {
                let rv = self.value(*row);
                if wants(*a) {
                    let mut d = g.clone();
                    for r in 0..d.rows {
                        for (x, y) in d.row_mut(r).iter_mut().zip(&rv.data) {
                            *x *= y;
                        }
                    }
                    accumulate(&mut adj[a.0], &d);
                }
                if wants(*row) {
                    let d = hadamard(g, self.value(*a)).col_sums();
                    accumulate(&mut adj[row.0], &d);
                }
            }
            Op::MulCol(a, col) => {
                let cv = self.value(*col);
                if wants(*a) {
                    let mut d = g.clone();
                    for r in 0..d.rows {
                        let k = cv.data[r];
                        d.row_mut(r).iter_mut().for_each(|x| *x *= k);
                    }
                    accumulate(&mut adj[a.0], &d);
                }
                if wants(*col) {
                    let av = self.value(*a);
                    let data = (0..g.rows)
                        .map(|r| g.row(r).iter().zip(av.row(r)).map(|(p, q)| p * q).sum())
                        .collect();
                    accumulate(&mut adj[col.0], &Matrix::column(data));
                }
            }
            Op::MatMul { a, b, ta, tb } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if wants(*a) {
                    let mut d = Matrix::zeros(av.rows, av.cols);
                    match (ta, tb) {
                        (false, false) => gemm_acc(g, false, bv, true, &mut d),
                        (false, true) => gemm_acc(g, false, bv, false, &mut d),
                        (true, false) => gemm_acc(bv, false, g, true, &mut d),
                        (true, true) => gemm_acc(bv, true, g, true, &mut d),
                    }
                    accumulate(&mut adj[a.0], &d);
                }
                if wants(*b) {
                    let mut d = Matrix::zeros(bv.rows, bv.cols);
                    match (ta, tb) {
                        (false, false) => gemm_acc(av, true, g, false, &mut d),
                        (false, true) => gemm_acc(g, true, av, false, &mut d),
                        (true, false) => gemm_acc(av, false, g, false, &mut d),
                        (true, true) => gemm_acc(g, true, av, true, &mut d),
                    }
                    accumulate(&mut adj[b.0], &d);
                }
            }
            Op::Affine { x, w, b } => {
                if wants(*x) {
                    let wv = self.value(*w);
                    let mut d = Matrix::zeros(g.rows, wv.cols);
                    gemm_acc(g, false, wv, false, &mut d);
                    accumulate(&mut adj[x.0], &d);
                }
                if wants(*w) {
                    let xv = self.value(*x);
                    let mut d = Matrix::zeros(g.cols, xv.cols);
                    gemm_acc(g, true, xv, false, &mut d);
                    accumulate(&mut adj[w.0], &d);
                }
                if wants(*b) {
                    accumulate(&mut adj[b.0], &g.col_sums());
                }
            }
            Op::Act { x, kind, order } => {
                if wants(*x) && !kind.vanishes(order + 1) {
                    let xv = self.value(*x);
                    let data = kind.map(order + 1, &xv.data, Some(&g.data));
                    accumulate(&mut adj[x.0], &Matrix::from_vec(g.rows, g.cols, data));
                }
            }
            Op::RowSum(x) => {
                if wants(*x) {
                    let (r, c) = self.shape(*x);
                    let mut d = Matrix::zeros(r, c);
                    for i in 0..r {
                        let k = g.data[i];
                        d.row_mut(i).iter_mut().for_each(|v| *v = k);
                    }
                    accumulate(&mut adj[x.0], &d);
                }
            }
            Op::Sum(x) => {
                if wants(*x) {
                    let (r, c) = self.shape(*x);
                    accumulate(&mut adj[x.0], &Matrix::filled(r, c, g.data[0]));
                }
            }
            Op::Gather { x, rows } => {
                if wants(*x) {
                    let (r, c) = self.shape(*x);
                    let slot = adj[x.0].get_or_insert_with(|| Matrix::zeros(r, c));
                    for (k, &src) in rows.iter().enumerate() {
                        for (o, v) in slot.row_mut(src as usize).iter_mut().zip(g.row(k)) {
                            *o += v;
                        }
                    }
                }
            }
            Op::SliceCols { x, start, len } => {
                if wants(*x) {
                    let (r, c) = self.shape(*x);
                    let slot = adj[x.0].get_or_insert_with(|| Matrix::zeros(r, c));
                    for k in 0..r {
                        for (o, v) in slot.row_mut(k)[*start..*start + *len].iter_mut().zip(g.row(k)) {
                            *o += v;
                        }
                    }
                }
            }
            Op::Sqrt(x) => {
                if wants(*x) {
                    let yv = &node.value;
                    let data = g
                        .data
                        .iter()
                        .zip(&yv.data)
                        .map(|(gi, &y)| if y > 0.0 { gi * 0.5 / y } else { 0.0 })
                        .collect();
                    accumulate(&mut adj[x.0], &Matrix::from_vec(g.rows, g.cols, data));
                }
            }
        }
    }
}

fn hadamard(a: &Matrix, b: &Matrix) -> Matrix {
    let data = a.data.iter().zip(&b.data).map(|(x, y)| x * y).collect();
    Matrix::from_vec(a.rows, a.cols, data)
}

fn accumulate(slot: &mut Option<Matrix>, g: &Matrix) {
    match slot {
        Some(m) => m.add_assign(g),
        None => *slot = Some(g.clone()),
    }
}
