//! Dense row-major `f64` matrices.
//!
//! This is deliberately small: the training engine needs products, transposes
//! and an orthogonal initializer, nothing else. Every kernel accumulates each
//! output element in ascending index order, so results are independent of
//! vector width and identical to the naive triple loop bit for bit.

use crate::error::{ItlError, Result};
use crate::linalg::rng::SeededRng;

/// Dense matrix, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(ItlError::shape(
                "Matrix::from_vec",
                format!("{rows}x{cols} needs {} values, got {}", rows * cols, data.len()),
            ));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut m = Matrix::zeros(rows, cols);
        for i in 0..rows {
            for j in 0..cols {
                m.data[i * cols + j] = f(i, j);
            }
        }
        m
    }

    pub fn identity(n: usize) -> Self {
        Matrix::from_fn(n, n, |i, j| if i == j { 1.0 } else { 0.0 })
    }

    /// Matrix with independent standard normal entries, filled row-major.
    pub fn gaussian(rows: usize, cols: usize, rng: &mut SeededRng) -> Self {
        let data = (0..rows * cols).map(|_| rng.next_normal()).collect();
        Matrix { rows, cols, data }
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        out
    }

    /// Largest absolute entry difference; matrices must have equal shape.
    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

/// `a * b`. Accumulates over the inner index in ascending order for every
/// output element, so the result is bit-identical to the textbook triple loop.
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.rows {
        return Err(ItlError::shape(
            "matmul",
            format!("{}x{} * {}x{}", a.rows, a.cols, b.rows, b.cols),
        ));
    }
    let mut out = Matrix::zeros(a.rows, b.cols);
    let n = b.cols;
    for (a_row, out_row) in a
        .data
        .chunks_exact(a.cols)
        .zip(out.data.chunks_exact_mut(n))
    {
        for (k, &aik) in a_row.iter().enumerate() {
            let b_row = &b.data[k * n..(k + 1) * n];
            for (o, &bkj) in out_row.iter_mut().zip(b_row) {
                *o += aik * bkj;
            }
        }
    }
    Ok(out)
}

/// Orthogonal initialization: Householder QR of a Gaussian matrix, with the
/// sign fixed so that R has a positive diagonal. That makes Q a deterministic
/// function of the Gaussian draw, hence of the seed. Requires `cols <= rows`;
/// the returned Q has orthonormal columns.
pub fn orthogonal_init(rows: usize, cols: usize, rng: &mut SeededRng) -> Result<Matrix> {
    if cols > rows {
        return Err(ItlError::invalid(
            "cols",
            format!("orthogonal_init needs cols <= rows, got {rows}x{cols}"),
        ));
    }
    if rows == 0 || cols == 0 {
        return Err(ItlError::invalid("rows", "dimensions must be positive"));
    }

    let mut a = Matrix::gaussian(rows, cols, rng);

    // Householder vectors, one per column.
    let mut reflectors: Vec<Vec<f64>> = Vec::with_capacity(cols);
    for j in 0..cols {
        let mut v: Vec<f64> = (j..rows).map(|i| a.get(i, j)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            // Probability-zero for Gaussian input; keep the column as-is.
            reflectors.push(vec![0.0; rows - j]);
            continue;
        }
        let alpha = if v[0] >= 0.0 { -norm } else { norm };
        v[0] -= alpha;
        let vnorm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if vnorm > 0.0 {
            for x in &mut v {
                *x /= vnorm;
            }
        }
        // Apply H = I - 2vv^T to the trailing block of A.
        for c in j..cols {
            let dot: f64 = (j..rows).map(|i| v[i - j] * a.get(i, c)).sum();
            for i in j..rows {
                let upd = a.get(i, c) - 2.0 * v[i - j] * dot;
                a.set(i, c, upd);
            }
        }
        reflectors.push(v);
    }

    // Q = H_0 H_1 ... H_{cols-1} applied to the first `cols` columns of I.
    let mut q = Matrix::from_fn(rows, cols, |i, j| if i == j { 1.0 } else { 0.0 });
    for j in (0..cols).rev() {
        let v = &reflectors[j];
        for c in 0..cols {
            let dot: f64 = (j..rows).map(|i| v[i - j] * q.get(i, c)).sum();
            for i in j..rows {
                let upd = q.get(i, c) - 2.0 * v[i - j] * dot;
                q.set(i, c, upd);
            }
        }
    }

    // R's diagonal now sits in A; flip Q's columns where it is negative.
    for j in 0..cols {
        if a.get(j, j) < 0.0 {
            for i in 0..rows {
                let flipped = -q.get(i, j);
                q.set(i, j, flipped);
            }
        }
    }

    debug_assert!(q.is_finite(), "orthogonal_init produced non-finite entries");
    Ok(q)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Textbook i-j-k triple loop, the independent oracle for `matmul`.
    fn matmul_naive(a: &Matrix, b: &Matrix) -> Matrix {
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

    fn random_matrix(rows: usize, cols: usize, seed: u64) -> Matrix {
        let mut rng = SeededRng::new(seed);
        Matrix::gaussian(rows, cols, &mut rng)
    }

    #[test]
    fn matmul_identity() {
        let m = Matrix::from_vec(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let got = matmul(&Matrix::identity(2), &m).unwrap();
        assert_eq!(got, m);
    }

    #[test]
    fn matmul_annihilation() {
        let a = Matrix::from_vec(2, 2, vec![1.0, 0.0, 0.0, 0.0]).unwrap();
        let b = Matrix::from_vec(2, 1, vec![0.0, 5.0]).unwrap();
        let got = matmul(&a, &b).unwrap();
        assert_eq!(got.data(), &[0.0, 0.0]);
    }

    #[test]
    fn matmul_matches_triple_loop_exactly() {
        let a = random_matrix(4, 3, 100);
        let b = random_matrix(3, 5, 101);
        let got = matmul(&a, &b).unwrap();
        let want = matmul_naive(&a, &b);
        assert_eq!(got.data(), want.data(), "must match the oracle bit for bit");
    }

    #[test]
    fn matmul_bit_identical_on_larger_shapes() {
        for seed in 0..5 {
            let a = random_matrix(33, 47, 200 + seed);
            let b = random_matrix(47, 29, 300 + seed);
            assert_eq!(
                matmul(&a, &b).unwrap().data(),
                matmul_naive(&a, &b).data()
            );
        }
    }

    #[test]
    fn matmul_rejects_shape_mismatch() {
        let a = Matrix::zeros(2, 3);
        let b = Matrix::zeros(2, 3);
        assert!(matmul(&a, &b).is_err());
    }

    #[test]
    fn matmul_associativity_within_tolerance() {
        for seed in 0..10 {
            let a = random_matrix(6, 5, 400 + seed);
            let b = random_matrix(5, 7, 500 + seed);
            let c = random_matrix(7, 4, 600 + seed);
            let left = matmul(&matmul(&a, &b).unwrap(), &c).unwrap();
            let right = matmul(&a, &matmul(&b, &c).unwrap()).unwrap();
            for (l, r) in left.data().iter().zip(right.data()) {
                if l.abs() >= 1e-6 {
                    assert!(((l - r) / l).abs() <= 1e-9, "l={l} r={r}");
                } else {
                    assert!((l - r).abs() <= 1e-9);
                }
            }
        }
    }

    fn assert_orthonormal_columns(q: &Matrix, tol: f64) {
        let gram = matmul(&q.transpose(), q).unwrap();
        let eye = Matrix::identity(q.cols());
        let err = gram.max_abs_diff(&eye);
        assert!(err <= tol, "max |Q^T Q - I| = {err}");
    }

    #[test]
    fn orthogonal_init_1x1_is_unit() {
        for seed in 0..20 {
            let mut rng = SeededRng::new(seed);
            let q = orthogonal_init(1, 1, &mut rng).unwrap();
            let v = q.get(0, 0);
            assert!(v == 1.0 || v == -1.0, "got {v}");
        }
    }

    #[test]
    fn orthogonal_init_3x2_orthonormal() {
        let mut rng = SeededRng::new(5);
        let q = orthogonal_init(3, 2, &mut rng).unwrap();
        assert_orthonormal_columns(&q, 1e-10);
    }

    #[test]
    fn orthogonal_init_various_shapes_orthonormal() {
        for (rows, cols, seed) in [(256, 11, 42), (784, 11, 1), (8, 8, 2), (50, 1, 3)] {
            let mut rng = SeededRng::new(seed);
            let q = orthogonal_init(rows, cols, &mut rng).unwrap();
            assert_orthonormal_columns(&q, 1e-10);
        }
    }

    #[test]
    fn orthogonal_init_deterministic() {
        let mut r1 = SeededRng::new(42);
        let mut r2 = SeededRng::new(42);
        let a = orthogonal_init(256, 11, &mut r1).unwrap();
        let b = orthogonal_init(256, 11, &mut r2).unwrap();
        assert_eq!(a.data(), b.data(), "same seed must give identical bits");
    }

    #[test]
    fn orthogonal_init_rejects_wide() {
        let mut rng = SeededRng::new(0);
        assert!(orthogonal_init(2, 3, &mut rng).is_err());
    }

    #[test]
    fn transpose_roundtrip() {
        let m = random_matrix(5, 9, 7);
        assert_eq!(m.transpose().transpose(), m);
    }
}
