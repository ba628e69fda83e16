use alloc::vec;
use alloc::vec::Vec;

/// Dense row-major `f64` matrix. Batches are stored one sample per row.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Self { rows, cols, data: vec![value; rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(rows * cols, data.len(), "matrix buffer length");
        Self { rows, cols, data }
    }

    pub fn scalar(value: f64) -> Self {
        Self { rows: 1, cols: 1, data: vec![value] }
    }

    pub fn column(data: Vec<f64>) -> Self {
        Self { rows: data.len(), cols: 1, data }
    }

    pub fn row_vector(data: Vec<f64>) -> Self {
        Self { rows: 1, cols: data.len(), data }
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    pub fn add_assign(&mut self, other: &Matrix) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn sub_assign(&mut self, other: &Matrix) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a -= b;
        }
    }

    /// Column sums as a `1 x cols` matrix.
    pub fn col_sums(&self) -> Matrix {
        let mut out = Matrix::zeros(1, self.cols);
        for r in 0..self.rows {
            for (o, v) in out.data.iter_mut().zip(self.row(r)) {
                *o += v;
            }
        }
        out
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }
}

/// `c += op(a) * op(b)`, where `op` transposes when the flag is set.
pub fn gemm_acc(a: &Matrix, ta: bool, b: &Matrix, tb: bool, c: &mut Matrix) {
    let (m, k) = if ta { (a.cols, a.rows) } else { (a.rows, a.cols) };
    let (k2, n) = if tb { (b.cols, b.rows) } else { (b.rows, b.cols) };
    debug_assert_eq!(k, k2);
    debug_assert_eq!((c.rows, c.cols), (m, n));
    match (ta, tb) {
        (false, false) => kernels::rows_axpy(&a.data, k, &b.data, n, &mut c.data),
        (false, true) => {
            let bt = b.transpose();
            kernels::rows_axpy(&a.data, k, &bt.data, n, &mut c.data);
        }
        (true, false) if n < m => {
            // accumulate the transposed product so the inner loop runs over the longer side
            let mut ct = Matrix::zeros(n, m);
            kernels::outer_acc(&a.data, m, &b.data, n, &mut ct.data);
            for i in 0..m {
                for j in 0..n {
                    c.data[i * n + j] += ct.data[j * m + i];
                }
            }
        }
        (true, false) => kernels::outer_acc(&b.data, n, &a.data, m, &mut c.data),
        (true, true) => {
            let bt = b.transpose();
            gemm_acc(a, true, &bt, false, c);
        }
    }
}

/// `x * w^T + bias` with `w` stored `out x in` and `bias` of length `out`.
pub fn affine(x: &Matrix, w: &Matrix, bias: &[f64]) -> Matrix {
    let n = w.rows;
    let wt = w.transpose();
    let mut out = Matrix::zeros(x.rows, n);
    for orow in out.data.chunks_exact_mut(n.max(1)) {
        orow.copy_from_slice(bias);
    }
    kernels::rows_axpy(&x.data, x.cols, &wt.data, n, &mut out.data);
    out
}

/// Dense loop nests. Each output element is accumulated in a fixed order,
/// so the AVX2 variants (plain vector adds and multiplies, no fused ops)
/// return the same bits as the portable ones.
mod kernels {
    /// `c_i += Σ_k a_ik b_k` over rows: `a` is `m x k`, `b` is `k x n`.
    #[inline(always)]
    fn rows_axpy_body(a: &[f64], k: usize, b: &[f64], n: usize, c: &mut [f64]) {
        if k == 0 || n == 0 {
            return;
        }
        for (arow, crow) in a.chunks_exact(k).zip(c.chunks_exact_mut(n)) {
            for (&aik, brow) in arow.iter().zip(b.chunks_exact(n)) {
                if aik == 0.0 {
                    continue;
                }
                for (cv, bv) in crow.iter_mut().zip(brow) {
                    *cv += aik * bv;
                }
            }
        }
    }

    /// `out_j += Σ_r y_rj x_r` over rows `r`: `x` is `k x p`, `y` is `k x q`,
    /// `out` is `q x p`.
    #[inline(always)]
    fn outer_acc_body(x: &[f64], p: usize, y: &[f64], q: usize, out: &mut [f64]) {
        if p == 0 || q == 0 {
            return;
        }
        for (xrow, yrow) in x.chunks_exact(p).zip(y.chunks_exact(q)) {
            for (&yj, orow) in yrow.iter().zip(out.chunks_exact_mut(p)) {
                if yj == 0.0 {
                    continue;
                }
                for (o, xv) in orow.iter_mut().zip(xrow) {
                    *o += yj * xv;
                }
            }
        }
    }

    #[cfg(all(feature = "std", target_arch = "x86_64"))]
    fn has_avx2() -> bool {
        std::is_x86_feature_detected!("avx2")
    }

    #[cfg(all(feature = "std", target_arch = "x86_64"))]
    #[target_feature(enable = "avx2")]
    unsafe fn rows_axpy_avx2(a: &[f64], k: usize, b: &[f64], n: usize, c: &mut [f64]) {
        rows_axpy_body(a, k, b, n, c)
    }

    #[cfg(all(feature = "std", target_arch = "x86_64"))]
    #[target_feature(enable = "avx2")]
    unsafe fn outer_acc_avx2(x: &[f64], p: usize, y: &[f64], q: usize, out: &mut [f64]) {
        outer_acc_body(x, p, y, q, out)
    }

    pub(super) fn rows_axpy(a: &[f64], k: usize, b: &[f64], n: usize, c: &mut [f64]) {
        #[cfg(all(feature = "std", target_arch = "x86_64"))]
        if has_avx2() {
            // SAFETY: the CPU supports AVX2.
            return unsafe { rows_axpy_avx2(a, k, b, n, c) };
        }
        rows_axpy_body(a, k, b, n, c)
    }

    pub(super) fn outer_acc(x: &[f64], p: usize, y: &[f64], q: usize, out: &mut [f64]) {
        #[cfg(all(feature = "std", target_arch = "x86_64"))]
        if has_avx2() {
            // SAFETY: the CPU supports AVX2.
            return unsafe { outer_acc_avx2(x, p, y, q, out) };
        }
        outer_acc_body(x, p, y, q, out)
    }
}
