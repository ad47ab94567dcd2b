//! Dense numerical kernels: row-major matrices, deterministic parallel
//! matrix products, stabilized log-sum-exp, and log-scaled representations
//! of nonnegative matrices.
//!
//! # Determinism
//!
//! Every reduction in this module has a fixed association order:
//!
//! * [`Mat::matmul`] splits the left operand into fixed 128-row blocks and
//!   computes each block with an independent single-threaded GEMM call, so the
//!   result is bitwise identical regardless of how many worker threads execute
//!   the blocks (the blocking of the inner reduction depends only on the
//!   operand shapes, never on the thread count).
//! * [`logsumexp`] subtracts the maximum and accumulates left to right.
//!
//! # Log-scaled matrices
//!
//! Products of matrices with entries like `exp(z/epsilon)` overflow `f64` long
//! before the quantities of interest (traces, marginals) do. [`ScaledMat`]
//! stores a nonnegative matrix as `row_scale[i]` (a log factor) plus a dense
//! payload whose rows have maximum entry 1, so chains of products stay
//! representable for arbitrary exponent magnitudes.

use rayon::prelude::*;

/// Row block size for parallel GEMM. Fixed so results never depend on the
/// number of worker threads.
const GEMM_ROW_BLOCK: usize = 128;

/// Dense row-major `f64` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Mat {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Mat {
    /// Zero matrix of the given shape.
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    /// Matrix filled with a constant.
    pub fn full(rows: usize, cols: usize, value: f64) -> Self {
        Mat {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    /// Identity matrix.
    pub fn eye(n: usize) -> Self {
        let mut m = Mat::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    /// Builds from a row-major vector; `data.len()` must equal `rows*cols`.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(
            data.len(),
            rows * cols,
            "matrix payload length {} does not match shape {}x{}",
            data.len(),
            rows,
            cols
        );
        Mat { rows, cols, data }
    }

    /// Builds an `r x c` matrix from a function of the index pair.
    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Mat { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    /// Flat row-major payload.
    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    /// Mutable flat row-major payload.
    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Row `i` as a slice.
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    /// Mutable row `i`.
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    /// Transposed copy.
    pub fn transpose(&self) -> Mat {
        let mut out = Mat::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out[(j, i)] = self[(i, j)];
            }
        }
        out
    }

    /// Applies `f` to every entry in place.
    pub fn map_inplace(&mut self, f: impl Fn(f64) -> f64 + Sync) {
        self.data.iter_mut().for_each(|x| *x = f(*x));
    }

    /// True when every entry is finite.
    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Maximum entry (`-inf` for an empty matrix).
    pub fn max_entry(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    /// Product `self * rhs^T` without materializing the transpose.
    ///
    /// Single GEMM call with a transposed stride layout on the right operand;
    /// per-row results are identical to [`Mat::matmul`] against an explicit
    /// transpose.
    pub fn matmul_nt(&self, rhs: &Mat) -> Mat {
        assert_eq!(
            self.cols,
            rhs.cols,
            "matmul_nt shape mismatch: {}x{} * ({}x{})^T",
            self.rows,
            self.cols,
            rhs.rows,
            rhs.cols
        );
        let m = self.rows;
        let k = self.cols;
        let n = rhs.rows;
        let mut out = Mat::zeros(m, n);
        if m == 0 || n == 0 || k == 0 {
            return out;
        }
        unsafe {
            matrixmultiply::dgemm(
                m,
                k,
                n,
                1.0,
                self.data.as_ptr(),
                k as isize,
                1,
                rhs.data.as_ptr(),
                1,
                k as isize,
                0.0,
                out.data.as_mut_ptr(),
                n as isize,
                1,
            );
        }
        out
    }

    /// Product `self^T * rhs` without materializing the transpose.
    pub fn matmul_tn(&self, rhs: &Mat) -> Mat {
        assert_eq!(
            self.rows,
            rhs.rows,
            "matmul_tn shape mismatch: ({}x{})^T * {}x{}",
            self.rows,
            self.cols,
            rhs.rows,
            rhs.cols
        );
        let m = self.cols;
        let k = self.rows;
        let n = rhs.cols;
        let mut out = Mat::zeros(m, n);
        if m == 0 || n == 0 || k == 0 {
            return out;
        }
        unsafe {
            matrixmultiply::dgemm(
                m,
                k,
                n,
                1.0,
                self.data.as_ptr(),
                1,
                self.cols as isize,
                rhs.data.as_ptr(),
                n as isize,
                1,
                0.0,
                out.data.as_mut_ptr(),
                n as isize,
                1,
            );
        }
        out
    }

    /// Matrix product `self * rhs`.
    ///
    /// The left operand is split into fixed 128-row blocks; each block is one
    /// independent GEMM call, and blocks may run on worker threads. Results
    /// are bitwise independent of the thread count.
    pub fn matmul(&self, rhs: &Mat) -> Mat {
        assert_eq!(
            self.cols, rhs.rows,
            "matmul shape mismatch: {}x{} * {}x{}",
            self.rows, self.cols, rhs.rows, rhs.cols
        );
        let mut out = Mat::zeros(self.rows, rhs.cols);
        let k = self.cols;
        let n = rhs.cols;
        let lhs_blocks: Vec<&[f64]> = self.data.chunks(GEMM_ROW_BLOCK * k).collect();
        let out_blocks: Vec<&mut [f64]> = out.data.chunks_mut(GEMM_ROW_BLOCK * n).collect();
        lhs_blocks
            .into_par_iter()
            .zip(out_blocks.into_par_iter())
            .for_each(|(a, c)| {
                let m = a.len() / k.max(1);
                if m == 0 || n == 0 {
                    return;
                }
                unsafe {
                    matrixmultiply::dgemm(
                        m,
                        k,
                        n,
                        1.0,
                        a.as_ptr(),
                        k as isize,
                        1,
                        rhs.data.as_ptr(),
                        n as isize,
                        1,
                        0.0,
                        c.as_mut_ptr(),
                        n as isize,
                        1,
                    );
                }
            });
        out
    }
}

impl std::ops::Index<(usize, usize)> for Mat {
    type Output = f64;
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        &self.data[i * self.cols + j]
    }
}

impl std::ops::IndexMut<(usize, usize)> for Mat {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        &mut self.data[i * self.cols + j]
    }
}

/// Stabilized `log(sum(exp(x)))` over a slice: subtracts the maximum and
/// accumulates left to right. Returns `-inf` for an empty slice.
pub fn logsumexp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        // All -inf (empty sum) or a +inf/NaN poisoned input.
        return m;
    }
    let mut acc = 0.0;
    for &x in xs {
        acc += (x - m).exp();
    }
    m + acc.ln()
}

/// Stabilized `log(exp(a) + exp(b))`.
pub fn logsumexp2(a: f64, b: f64) -> f64 {
    let (hi, lo) = if a >= b { (a, b) } else { (b, a) };
    if hi == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    hi + (lo - hi).exp().ln_1p()
}

/// Nonnegative matrix stored as a dense payload with per-row log scales.
///
/// The represented matrix is `exp(row_scale[i]) * payload[i, j]`, with every
/// payload row normalized so its maximum entry is 1 (rows that are entirely
/// zero carry scale `-inf`). This keeps chained products of matrices with
/// huge dynamic range inside `f64`.
#[derive(Debug, Clone)]
pub struct ScaledMat {
    payload: Mat,
    row_scale: Vec<f64>,
}

impl ScaledMat {
    /// Builds from a matrix of logarithms: represented entry `(i,j)` is
    /// `exp(log_entries[(i,j)])` (use `-inf` for exact zeros).
    pub fn from_log(log_entries: &Mat) -> Self {
        let n = log_entries.rows();
        let c = log_entries.cols();
        let mut payload = Mat::zeros(n, c);
        let mut row_scale = vec![0.0; n];
        for (i, scale) in row_scale.iter_mut().enumerate() {
            let lr = log_entries.row(i);
            let m = lr.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            *scale = m;
            if m.is_finite() {
                let pr = payload.row_mut(i);
                for (j, &v) in lr.iter().enumerate() {
                    pr[j] = (v - m).exp();
                }
            }
        }
        ScaledMat { payload, row_scale }
    }

    /// Builds from an ordinary nonnegative matrix.
    pub fn from_plain(m: &Mat) -> Self {
        let log = Mat::from_fn(m.rows(), m.cols(), |i, j| m[(i, j)].ln());
        ScaledMat::from_log(&log)
    }

    pub fn rows(&self) -> usize {
        self.payload.rows()
    }

    pub fn cols(&self) -> usize {
        self.payload.cols()
    }

    /// Log of the represented entry `(i,j)`.
    pub fn log_entry(&self, i: usize, j: usize) -> f64 {
        self.row_scale[i] + self.payload[(i, j)].ln()
    }

    /// Product of two represented matrices, re-normalized per row.
    ///
    /// The right factor's row scales are folded in through a single global
    /// shift (its maximum scale), which keeps the dense GEMM well-scaled:
    /// entries whose scale sits hundreds of e-folds below the row dominant
    /// underflow to zero, a relative error below ~1e-300 of the row total.
    pub fn matmul(&self, rhs: &ScaledMat) -> ScaledMat {
        assert_eq!(self.cols(), rhs.rows(), "scaled matmul shape mismatch");
        let sigma = rhs
            .row_scale
            .iter()
            .copied()
            .fold(f64::NEG_INFINITY, f64::max);
        if sigma == f64::NEG_INFINITY {
            // rhs is identically zero.
            return ScaledMat {
                payload: Mat::zeros(self.rows(), rhs.cols()),
                row_scale: vec![f64::NEG_INFINITY; self.rows()],
            };
        }
        let mut rhs_dense = rhs.payload.clone();
        for i in 0..rhs_dense.rows() {
            let f = (rhs.row_scale[i] - sigma).exp();
            for v in rhs_dense.row_mut(i) {
                *v *= f;
            }
        }
        let prod = self.payload.matmul(&rhs_dense);
        let n = prod.rows();
        let c = prod.cols();
        let mut payload = Mat::zeros(n, c);
        let mut row_scale = vec![0.0; n];
        for (i, scale) in row_scale.iter_mut().enumerate() {
            let pr = prod.row(i);
            let m = pr.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            if m > 0.0 && m.is_finite() {
                *scale = self.row_scale[i] + sigma + m.ln();
                let out = payload.row_mut(i);
                for (j, &v) in pr.iter().enumerate() {
                    out[j] = v / m;
                }
            } else {
                *scale = f64::NEG_INFINITY;
            }
        }
        ScaledMat { payload, row_scale }
    }

    /// Log of the trace of the represented (square) matrix.
    pub fn log_trace(&self) -> f64 {
        assert_eq!(self.rows(), self.cols(), "trace requires a square matrix");
        let terms: Vec<f64> = (0..self.rows())
            .map(|i| self.row_scale[i] + self.payload[(i, i)].ln())
            .collect();
        logsumexp(&terms)
    }

    /// Log of the sum of row `i` of the represented matrix.
    pub fn log_row_sum(&self, i: usize) -> f64 {
        if self.row_scale[i] == f64::NEG_INFINITY {
            return f64::NEG_INFINITY;
        }
        let s: f64 = self.payload.row(i).iter().sum();
        self.row_scale[i] + s.ln()
    }

    /// Materializes the matrix of entry logarithms.
    pub fn to_log_mat(&self) -> Mat {
        Mat::from_fn(self.rows(), self.cols(), |i, j| self.log_entry(i, j))
    }
}

/// Chained product `mats[0] * mats[1] * ... * mats[last]` of represented
/// matrices, folded left to right. Panics on an empty slice.
pub fn scaled_chain_product(mats: &[&ScaledMat]) -> ScaledMat {
    assert!(!mats.is_empty(), "empty matrix chain");
    let mut acc = mats[0].clone();
    for m in &mats[1..] {
        acc = acc.matmul(m);
    }
    acc
}

#[cfg(test)]
mod tests {
    use super::*;

    fn assert_close(a: f64, b: f64, tol: f64) {
        assert!(
            (a - b).abs() <= tol,
            "expected {b}, got {a} (diff {})",
            (a - b).abs()
        );
    }

    #[test]
    fn logsumexp_matches_direct_evaluation() {
        // ln(1 + 2 + 3) = ln 6
        let v = logsumexp(&[0.0, 2.0_f64.ln(), 3.0_f64.ln()]);
        assert_close(v, 6.0_f64.ln(), 1e-15);
        assert_eq!(logsumexp(&[]), f64::NEG_INFINITY);
        assert_eq!(logsumexp(&[-3.5]), -3.5);
    }

    #[test]
    fn logsumexp_survives_large_inputs() {
        // ln(e^1000 + e^1000) = 1000 + ln 2 — naive evaluation overflows.
        let v = logsumexp(&[1000.0, 1000.0]);
        assert_close(v, 1000.0 + 2.0_f64.ln(), 1e-12);
        let w = logsumexp(&[-1000.0, -1000.0]);
        assert_close(w, -1000.0 + 2.0_f64.ln(), 1e-12);
    }

    #[test]
    fn logsumexp_is_shift_invariant() {
        let xs = [0.3, -1.2, 2.5, 0.0];
        let shifted: Vec<f64> = xs.iter().map(|x| x + 123.456).collect();
        assert_close(logsumexp(&shifted), logsumexp(&xs) + 123.456, 1e-12);
    }

    #[test]
    fn logsumexp2_agrees_with_slice_version() {
        assert_close(logsumexp2(0.5, -2.0), logsumexp(&[0.5, -2.0]), 1e-15);
        assert_eq!(logsumexp2(f64::NEG_INFINITY, f64::NEG_INFINITY), f64::NEG_INFINITY);
        assert_close(logsumexp2(f64::NEG_INFINITY, 3.0), 3.0, 1e-15);
    }

    #[test]
    fn matmul_matches_hand_computation() {
        let a = Mat::from_vec(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let b = Mat::from_vec(3, 2, vec![7.0, 8.0, 9.0, 10.0, 11.0, 12.0]);
        let c = a.matmul(&b);
        // [[58, 64], [139, 154]]
        assert_eq!(c.as_slice(), &[58.0, 64.0, 139.0, 154.0]);
    }

    #[test]
    fn matmul_matches_naive_triple_loop() {
        let mut state = 0x243F6A8885A308D3u64;
        let mut next = || {
            // xorshift for a deterministic pseudo-random fill
            state ^= state << 13;
            state ^= state >> 7;
            state ^= state << 17;
            (state >> 11) as f64 / (1u64 << 53) as f64 - 0.5
        };
        let m = 37;
        let k = 151;
        let n = 29;
        let a = Mat::from_fn(m, k, |_, _| next());
        let b = Mat::from_fn(k, n, |_, _| next());
        let c = a.matmul(&b);
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0;
                for l in 0..k {
                    s += a[(i, l)] * b[(l, j)];
                }
                assert_close(c[(i, j)], s, 1e-12);
            }
        }
    }

    #[test]
    fn matmul_blocks_are_thread_count_invariant() {
        // More rows than one 128-row block so several blocks are in play.
        let m = 300;
        let a = Mat::from_fn(m, 40, |i, j| ((i * 7 + j * 13) % 23) as f64 / 23.0 - 0.4);
        let b = Mat::from_fn(40, 50, |i, j| ((i * 11 + j * 3) % 19) as f64 / 19.0 - 0.5);
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(1)
            .build()
            .unwrap();
        let serial = pool.install(|| a.matmul(&b));
        let parallel = a.matmul(&b);
        assert_eq!(serial.as_slice(), parallel.as_slice());
    }

    #[test]
    fn transposed_products_match_explicit_transposes() {
        let a = Mat::from_fn(13, 7, |i, j| ((i * 5 + j * 11) % 17) as f64 / 17.0 - 0.3);
        let b = Mat::from_fn(9, 7, |i, j| ((i * 3 + j * 13) % 23) as f64 / 23.0 - 0.5);
        let nt = a.matmul_nt(&b);
        let nt_ref = a.matmul(&b.transpose());
        assert_eq!(nt.as_slice(), nt_ref.as_slice());
        let c = Mat::from_fn(13, 4, |i, j| ((i * 7 + j) % 11) as f64 / 11.0);
        let tn = a.matmul_tn(&c);
        let tn_ref = a.transpose().matmul(&c);
        for (x, y) in tn.as_slice().iter().zip(tn_ref.as_slice()) {
            assert!((x - y).abs() < 1e-14);
        }
    }

    #[test]
    fn per_row_products_are_batch_size_invariant() {
        // Row r of X * W^T must not depend on which other rows share the
        // call; chunked evaluation relies on this.
        let w = Mat::from_fn(50, 30, |i, j| ((i * 13 + j * 7) % 31) as f64 / 31.0 - 0.4);
        let x = Mat::from_fn(300, 30, |i, j| ((i * 17 + j * 3) % 29) as f64 / 29.0 - 0.5);
        let full = x.matmul_nt(&w);
        for r in [0usize, 1, 157, 299] {
            let single = Mat::from_vec(1, 30, x.row(r).to_vec());
            let one = single.matmul_nt(&w);
            assert_eq!(one.as_slice(), full.row(r), "row {r} differs");
        }
        let mid = Mat::from_vec(32, 30, x.as_slice()[30 * 100..30 * 132].to_vec());
        let chunk = mid.matmul_nt(&w);
        for r in 0..32 {
            assert_eq!(chunk.row(r), full.row(100 + r));
        }
    }

    #[test]
    fn transpose_round_trips() {
        let a = Mat::from_fn(3, 5, |i, j| (i * 5 + j) as f64);
        let t = a.transpose();
        assert_eq!(t.rows(), 5);
        assert_eq!(t.cols(), 3);
        assert_eq!(t[(4, 2)], a[(2, 4)]);
        assert_eq!(t.transpose(), a);
    }

    #[test]
    fn scaled_product_handles_extreme_dynamic_range() {
        // Log-entry matrices far outside the representable range of exp().
        // Dominant-term analysis gives the product's log entries exactly
        // (corrections are below e^-200, i.e. < 1e-86 relative).
        let a = ScaledMat::from_log(&Mat::from_vec(2, 2, vec![600.0, -600.0, 0.0, 300.0]));
        let b = ScaledMat::from_log(&Mat::from_vec(2, 2, vec![300.0, 0.0, -200.0, 500.0]));
        let p = a.matmul(&b);
        assert_close(p.log_entry(0, 0), 900.0, 1e-12);
        assert_close(p.log_entry(0, 1), 600.0, 1e-12);
        assert_close(p.log_entry(1, 0), 300.0, 1e-12);
        assert_close(p.log_entry(1, 1), 800.0, 1e-12);
    }

    #[test]
    fn scaled_product_matches_plain_product_at_moderate_scale() {
        let a_plain = Mat::from_fn(4, 4, |i, j| 0.1 + ((i * 4 + j) as f64) * 0.37);
        let b_plain = Mat::from_fn(4, 4, |i, j| 0.2 + ((i * 3 + j) as f64) * 0.21);
        let direct = a_plain.matmul(&b_plain);
        let scaled = ScaledMat::from_plain(&a_plain).matmul(&ScaledMat::from_plain(&b_plain));
        for i in 0..4 {
            for j in 0..4 {
                assert_close(scaled.log_entry(i, j), direct[(i, j)].ln(), 1e-13);
            }
        }
    }

    #[test]
    fn log_trace_matches_direct_sum() {
        let m = Mat::from_vec(3, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0]);
        let s = ScaledMat::from_plain(&m);
        assert_close(s.log_trace(), 15.0_f64.ln(), 1e-13);
    }

    #[test]
    fn chain_product_of_identities_is_identity() {
        let e = ScaledMat::from_plain(&Mat::eye(5));
        let p = scaled_chain_product(&[&e, &e, &e]);
        assert_close(p.log_trace(), 5.0_f64.ln(), 1e-13);
        assert_eq!(p.log_entry(2, 3), f64::NEG_INFINITY);
        assert_close(p.log_entry(3, 3), 0.0, 1e-13);
    }

    #[test]
    fn zero_rows_propagate_without_poisoning() {
        let mut log = Mat::full(2, 2, f64::NEG_INFINITY);
        log[(0, 0)] = 1.0;
        let z = ScaledMat::from_log(&log);
        let p = z.matmul(&z);
        assert_close(p.log_entry(0, 0), 2.0, 1e-13);
        assert_eq!(p.log_entry(1, 1), f64::NEG_INFINITY);
        assert_eq!(p.log_row_sum(1), f64::NEG_INFINITY);
    }
}
