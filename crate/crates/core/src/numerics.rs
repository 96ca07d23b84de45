//! Dense f64 kernels: matrix product, row softmax with causal masking,
//! boundary-truncated average pooling, Frobenius norm and the seeded
//! matrix generator.
//!
//! Everything here is a pure function of its inputs.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Row-major dense matrix of `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape(
                "Matrix::new",
                format!("{} entries", rows * cols),
                format!("{} entries", data.len()),
            ));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    /// Builds a matrix from equally sized rows.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::shape("Matrix::from_rows", cols, r.len()));
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    /// An empty matrix with a fixed column count, grown with [`Matrix::push_row`].
    pub fn with_cols(cols: usize) -> Self {
        Self {
            rows: 0,
            cols,
            data: Vec::new(),
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn is_empty(&self) -> bool {
        self.rows == 0 || self.cols == 0
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_iter(&self) -> impl Iterator<Item = &[f64]> {
        // chunks_exact(0) panics; a zero-width matrix still has `rows` empty rows.
        (0..self.rows).map(move |r| self.row(r))
    }

    pub fn push_row(&mut self, row: &[f64]) -> Result<()> {
        if row.len() != self.cols {
            return Err(Error::shape("Matrix::push_row", self.cols, row.len()));
        }
        self.data.extend_from_slice(row);
        self.rows += 1;
        Ok(())
    }

    /// Keeps the listed rows, in the order given.
    pub fn select_rows(&self, rows: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(rows.len() * self.cols);
        for &r in rows {
            data.extend_from_slice(self.row(r));
        }
        Matrix {
            rows: rows.len(),
            cols: self.cols,
            data,
        }
    }

    /// Columns `start..start + width` as a new matrix.
    pub fn col_block(&self, start: usize, width: usize) -> Matrix {
        assert!(start + width <= self.cols, "column block out of range");
        let mut data = Vec::with_capacity(self.rows * width);
        for r in self.row_iter() {
            data.extend_from_slice(&r[start..start + width]);
        }
        Matrix {
            rows: self.rows,
            cols: width,
            data,
        }
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

    pub fn scale(&self, s: f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| v * s).collect(),
        }
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        if self.shape() != other.shape() {
            return Err(Error::shape(
                "Matrix::sub",
                format!("{:?}", self.shape()),
                format!("{:?}", other.shape()),
            ));
        }
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect(),
        })
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Standard matrix product `a · b`.
///
/// Each output entry accumulates `a[i][k] * b[k][j]` for ascending `k`
/// starting from `0.0`, so results are reproducible bit for bit.
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.rows {
        return Err(Error::shape(
            "matmul",
            format!("rhs with {} rows", a.cols),
            format!("{} rows", b.rows),
        ));
    }
    let mut out = Matrix::zeros(a.rows, b.cols);
    for i in 0..a.rows {
        let out_row = &mut out.data[i * b.cols..(i + 1) * b.cols];
        for k in 0..a.cols {
            let aik = a.data[i * a.cols + k];
            let b_row = &b.data[k * b.cols..(k + 1) * b.cols];
            for (o, &bkj) in out_row.iter_mut().zip(b_row) {
                *o += aik * bkj;
            }
        }
    }
    Ok(out)
}

/// Row vector times matrix.
pub fn vecmat(x: &[f64], m: &Matrix) -> Result<Vec<f64>> {
    if x.len() != m.rows {
        return Err(Error::shape("vecmat", m.rows, x.len()));
    }
    let mut out = vec![0.0; m.cols];
    for (k, &xk) in x.iter().enumerate() {
        for (o, &mkj) in out.iter_mut().zip(m.row(k)) {
            *o += xk * mkj;
        }
    }
    Ok(out)
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Cosine similarity; zero when either vector is zero.
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> f64 {
    let denom = l2_norm(a) * l2_norm(b);
    if denom == 0.0 {
        0.0
    } else {
        dot(a, b) / denom
    }
}

/// Numerically stable softmax of one row, in place.
pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// Row-wise softmax with optional causal masking.
///
/// With `causal_offset = Some(o)`, row `i` only sees columns `j <= i + o`;
/// masked entries come out as exactly `0.0`. A prefill score matrix over
/// its own keys uses `Some(0)`.
pub fn softmax_rows(m: &Matrix, causal_offset: Option<usize>) -> Result<Matrix> {
    if !m.is_finite() {
        return Err(Error::InvalidArgument("softmax input contains NaN or Inf".into()));
    }
    if m.cols == 0 && m.rows > 0 {
        return Err(Error::InvalidArgument("softmax over a fully masked row".into()));
    }
    let mut out = m.clone();
    for r in 0..m.rows {
        let visible = match causal_offset {
            Some(o) => (r + o + 1).min(m.cols),
            None => m.cols,
        };
        let row = out.row_mut(r);
        softmax_in_place(&mut row[..visible]);
        row[visible..].iter_mut().for_each(|v| *v = 0.0);
    }
    Ok(out)
}

/// 1D average pooling with an odd `kernel`, same-length output.
///
/// Windows are truncated at the sequence boundaries and averaged over the
/// entries that exist, so edge positions are not pulled toward zero.
pub fn avg_pool_1d(v: &[f64], kernel: usize) -> Result<Vec<f64>> {
    if kernel == 0 || kernel.is_multiple_of(2) {
        return Err(Error::InvalidArgument(format!(
            "pooling kernel must be odd and positive, got {kernel}"
        )));
    }
    let half = kernel / 2;
    let n = v.len();
    Ok((0..n)
        .map(|i| {
            let lo = i.saturating_sub(half);
            let hi = (i + half + 1).min(n);
            // Centered on v[i] so a constant window returns v[i] exactly.
            let center = v[i];
            center + v[lo..hi].iter().map(|x| x - center).sum::<f64>() / (hi - lo) as f64
        })
        .collect())
}

pub fn frobenius_norm(m: &Matrix) -> f64 {
    l2_norm(&m.data)
}

/// Deterministic matrix generator.
///
/// Uses `ChaCha8Rng::seed_from_u64(seed)`; every entry, in row-major order,
/// consumes one `next_u64()` value `x` and maps it to
/// `scale * sqrt(3) * (2u - 1)` with `u = (x >> 11) * 2^-53`. The
/// distribution is uniform on `[-sqrt(3) scale, sqrt(3) scale)`, which is
/// symmetric with standard deviation `scale`.
pub fn seeded_random_matrix(rows: usize, cols: usize, seed: u64, scale: f64) -> Result<Matrix> {
    if !(scale > 0.0 && scale.is_finite()) {
        return Err(Error::InvalidArgument(format!("scale must be positive, got {scale}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let half_width = scale * 3f64.sqrt();
    let data = (0..rows * cols)
        .map(|_| half_width * (2.0 * unit_f64(rng.next_u64()) - 1.0))
        .collect();
    Ok(Matrix { rows, cols, data })
}

/// Independent sub-seed number `stream` of `seed`: the SplitMix64
/// finalizer applied to `seed + (stream + 1)·0x9e3779b97f4a7c15`.
pub fn mix_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed.wrapping_add(stream.wrapping_add(1).wrapping_mul(0x9e37_79b9_7f4a_7c15));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Maps a 64-bit word to `[0, 1)` using its top 53 bits.
pub fn unit_f64(x: u64) -> f64 {
    (x >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn triple_loop(a: &Matrix, b: &Matrix) -> Matrix {
        let mut out = Matrix::zeros(a.rows(), b.cols());
        for i in 0..a.rows() {
            for j in 0..b.cols() {
                let mut acc = 0.0;
                for k in 0..a.cols() {
                    acc += a.get(i, k) * b.get(k, j);
                }
                out.set(i, j, acc);
            }
        }
        out
    }

    #[test]
    fn matmul_identity_and_hand_case() {
        let m = seeded_random_matrix(3, 3, 7, 1.0).unwrap();
        assert_eq!(matmul(&Matrix::identity(3), &m).unwrap(), m);

        let a = Matrix::from_rows(&[[1.0, 2.0]]).unwrap();
        let b = Matrix::from_rows(&[[3.0], [4.0]]).unwrap();
        assert_eq!(matmul(&a, &b).unwrap().data(), &[11.0]);
    }

    #[test]
    fn matmul_matches_triple_loop_exactly() {
        let a = seeded_random_matrix(5, 4, 11, 1.0).unwrap();
        let b = seeded_random_matrix(4, 3, 12, 1.0).unwrap();
        assert_eq!(matmul(&a, &b).unwrap(), triple_loop(&a, &b));
    }

    #[test]
    fn matmul_rejects_mismatch() {
        let a = Matrix::zeros(2, 3);
        assert!(matches!(matmul(&a, &a), Err(Error::Shape { .. })));
    }

    #[test]
    fn softmax_cases() {
        let s = softmax_rows(&Matrix::zeros(1, 3), None).unwrap();
        for &v in s.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }

        let s = softmax_rows(&Matrix::from_rows(&[[1000.0, 0.0]]).unwrap(), None).unwrap();
        assert_eq!(s.get(0, 0), 1.0);
        assert!(s.get(0, 1) >= 0.0 && s.get(0, 1) < 1e-300);
    }

    #[test]
    fn softmax_causal_mask() {
        let m = seeded_random_matrix(4, 4, 3, 2.0).unwrap();
        let s = softmax_rows(&m, Some(0)).unwrap();
        for r in 0..4 {
            let sum: f64 = s.row(r).iter().sum();
            assert!((sum - 1.0).abs() < 1e-12);
            for c in r + 1..4 {
                assert_eq!(s.get(r, c), 0.0);
            }
        }
    }

    #[test]
    fn softmax_rejects_non_finite_and_empty_rows() {
        let m = Matrix::from_rows(&[[f64::NAN, 0.0]]).unwrap();
        assert!(softmax_rows(&m, None).is_err());
        assert!(softmax_rows(&Matrix::zeros(2, 0), None).is_err());
    }

    #[test]
    fn pooling_cases() {
        let v = [1.0, 2.0, 3.0, 4.0, 5.0];
        assert_eq!(avg_pool_1d(&v, 1).unwrap(), v.to_vec());
        assert_eq!(avg_pool_1d(&v, 3).unwrap(), vec![1.5, 2.0, 3.0, 4.0, 4.5]);
        assert_eq!(avg_pool_1d(&[2.5; 7], 5).unwrap(), vec![2.5; 7]);
        assert!(avg_pool_1d(&v, 0).is_err());
        assert!(avg_pool_1d(&v, 4).is_err());
    }

    #[test]
    fn frobenius_cases() {
        assert_eq!(frobenius_norm(&Matrix::zeros(3, 3)), 0.0);
        assert_eq!(frobenius_norm(&Matrix::from_rows(&[[3.0, 4.0]]).unwrap()), 5.0);
        let m = seeded_random_matrix(6, 6, 5, 1.0).unwrap();
        let mut brute = 0.0;
        for r in 0..6 {
            for c in 0..6 {
                brute += m.get(r, c) * m.get(r, c);
            }
        }
        let brute = brute.sqrt();
        assert!(((frobenius_norm(&m) - brute) / brute).abs() < 1e-12);
    }

    #[test]
    fn seeded_generator_is_deterministic() {
        let a = seeded_random_matrix(4, 4, 42, 1.0).unwrap();
        assert_eq!(a, seeded_random_matrix(4, 4, 42, 1.0).unwrap());
        assert_ne!(a, seeded_random_matrix(4, 4, 43, 1.0).unwrap());
        assert!(seeded_random_matrix(2, 2, 0, 0.0).is_err());
    }

    #[test]
    fn seeded_generator_scale() {
        let m = seeded_random_matrix(100, 100, 9, 1.0 / 16f64.sqrt()).unwrap();
        let n = m.data().len() as f64;
        let mean = m.data().iter().sum::<f64>() / n;
        let var = m.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
        assert!((var.sqrt() - 0.25).abs() < 0.05, "sd {}", var.sqrt());
    }

    fn small_matrix(rows: usize, cols: usize) -> impl Strategy<Value = Matrix> {
        proptest::collection::vec(-5.0f64..5.0, rows * cols)
            .prop_map(move |d| Matrix::new(rows, cols, d).unwrap())
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn matmul_is_associative(a in small_matrix(3, 4), b in small_matrix(4, 2), c in small_matrix(2, 5)) {
            let left = matmul(&matmul(&a, &b).unwrap(), &c).unwrap();
            let right = matmul(&a, &matmul(&b, &c).unwrap()).unwrap();
            let scale = frobenius_norm(&left).max(1.0);
            prop_assert!(frobenius_norm(&left.sub(&right).unwrap()) / scale < 1e-9);
        }

        #[test]
        fn softmax_rows_normalized_and_shift_invariant(m in small_matrix(4, 6), shift in -50.0f64..50.0) {
            let s = softmax_rows(&m, None).unwrap();
            for r in s.row_iter() {
                prop_assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                prop_assert!(r.iter().all(|&v| v >= 0.0));
            }
            let shifted = Matrix::new(4, 6, m.data().iter().map(|v| v + shift).collect()).unwrap();
            let t = softmax_rows(&shifted, None).unwrap();
            for (x, y) in s.data().iter().zip(t.data()) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }

        #[test]
        fn pooling_keeps_constant_mean(c in -10.0f64..10.0, n in 1usize..40, half in 0usize..4) {
            let v = vec![c; n];
            let pooled = avg_pool_1d(&v, 2 * half + 1).unwrap();
            prop_assert_eq!(pooled.len(), n);
            for p in pooled {
                prop_assert_eq!(p, c);
            }
        }

        #[test]
        fn frobenius_triangle_inequality(a in small_matrix(3, 3), b in small_matrix(3, 3)) {
            let sum = Matrix::new(3, 3, a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect()).unwrap();
            prop_assert!(frobenius_norm(&sum) <= frobenius_norm(&a) + frobenius_norm(&b) + 1e-12);
        }
    }
}
