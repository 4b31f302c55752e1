//! Dense row-major matrices and the elementwise nonlinearities the model needs.
//!
//! Vectors are carried as `1 × n` (row) or `n × 1` (column) matrices. There is
//! no broadcasting: bias addition goes through [`Matrix::add_row`].

use std::fmt;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumericError {
    #[error("dimension mismatch in {op}: {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },
    #[error("matrix must have at least one row and one column, got {rows}x{cols}")]
    Empty { rows: usize, cols: usize },
    #[error("data length {len} does not match shape {rows}x{cols}")]
    Length { rows: usize, cols: usize, len: usize },
}

/// Dense 2-D array of `f64` in row-major order.
#[derive(Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Matrix({}x{}) [", self.rows, self.cols)?;
        for r in 0..self.rows {
            if r > 0 {
                write!(f, "; ")?;
            }
            for (c, v) in self.row(r).iter().enumerate() {
                if c > 0 {
                    write!(f, ", ")?;
                }
                write!(f, "{v}")?;
            }
        }
        write!(f, "]")
    }
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, NumericError> {
        if rows == 0 || cols == 0 {
            return Err(NumericError::Empty { rows, cols });
        }
        if data.len() != rows * cols {
            return Err(NumericError::Length {
                rows,
                cols,
                len: data.len(),
            });
        }
        Ok(Self { rows, cols, data })
    }

    /// # Panics
    /// Panics if either dimension is zero.
    pub fn zeros(rows: usize, cols: usize) -> Self {
        assert!(rows > 0 && cols > 0, "matrix dimensions must be nonzero");
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        Self::from_fn(n, n, |r, c| if r == c { 1.0 } else { 0.0 })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut m = Self::zeros(rows, cols);
        for r in 0..rows {
            for c in 0..cols {
                m.data[r * cols + c] = f(r, c);
            }
        }
        m
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, NumericError> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for row in rows {
            if row.len() != cols {
                return Err(NumericError::Length {
                    rows: rows.len(),
                    cols,
                    len: row.len(),
                });
            }
            data.extend_from_slice(row);
        }
        Self::new(rows.len(), cols, data)
    }

    /// A `1 × n` row vector.
    pub fn row_vector(values: Vec<f64>) -> Result<Self, NumericError> {
        let n = values.len();
        Self::new(1, n, values)
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
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
        let cols = self.cols;
        &mut self.data[r * cols..(r + 1) * cols]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |r, c| self.get(c, r))
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    fn zip_with(
        &self,
        other: &Self,
        op: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Self, NumericError> {
        if self.shape() != other.shape() {
            return Err(NumericError::Shape {
                op,
                left: self.shape(),
                right: other.shape(),
            });
        }
        Ok(Self {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add(&self, other: &Self) -> Result<Self, NumericError> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self, NumericError> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    /// Elementwise product.
    pub fn hadamard(&self, other: &Self) -> Result<Self, NumericError> {
        self.zip_with(other, "hadamard", |a, b| a * b)
    }

    pub fn scale(&self, k: f64) -> Self {
        self.map(|v| v * k)
    }

    /// Adds a `1 × cols` row to every row.
    pub fn add_row(&self, bias: &Self) -> Result<Self, NumericError> {
        if bias.rows != 1 || bias.cols != self.cols {
            return Err(NumericError::Shape {
                op: "add_row",
                left: self.shape(),
                right: bias.shape(),
            });
        }
        let mut out = self.clone();
        for r in 0..out.rows {
            for (v, b) in out.row_mut(r).iter_mut().zip(&bias.data) {
                *v += b;
            }
        }
        Ok(out)
    }

    /// In-place `self += other`.
    pub fn add_assign(&mut self, other: &Self) -> Result<(), NumericError> {
        if self.shape() != other.shape() {
            return Err(NumericError::Shape {
                op: "add_assign",
                left: self.shape(),
                right: other.shape(),
            });
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn fill(&mut self, v: f64) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    pub fn argmax_row(&self, r: usize) -> usize {
        argmax(self.row(r))
    }
}

/// Standard matrix product.
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix, NumericError> {
    if a.cols != b.rows {
        return Err(NumericError::Shape {
            op: "matmul",
            left: a.shape(),
            right: b.shape(),
        });
    }
    let mut out = Matrix::zeros(a.rows, b.cols);
    for i in 0..a.rows {
        let out_row = &mut out.data[i * b.cols..(i + 1) * b.cols];
        for (k, &aik) in a.row(i).iter().enumerate() {
            if aik == 0.0 {
                continue;
            }
            for (o, &bkj) in out_row.iter_mut().zip(b.row(k)) {
                *o += aik * bkj;
            }
        }
    }
    Ok(out)
}

#[inline]
pub fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn sigmoid(x: &Matrix) -> Matrix {
    x.map(sigmoid_scalar)
}

pub fn tanh_act(x: &Matrix) -> Matrix {
    x.map(f64::tanh)
}

/// Derivative of the logistic function expressed through its output `s = σ(x)`.
#[inline]
pub fn sigmoid_grad_from_output(s: f64) -> f64 {
    s * (1.0 - s)
}

/// Derivative of tanh expressed through its output `t = tanh(x)`.
#[inline]
pub fn tanh_grad_from_output(t: f64) -> f64 {
    1.0 - t * t
}

/// Row-wise softmax with max subtraction.
pub fn softmax(logits: &Matrix) -> Matrix {
    let mut out = logits.clone();
    for r in 0..out.rows {
        softmax_in_place(out.row_mut(r));
    }
    out
}

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

/// Index of the first maximal element.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// `out += W · z` for row-major `w` of shape `(out.len(), z.len())`.
#[inline]
pub(crate) fn gemv_acc(w: &Matrix, z: &[f64], out: &mut [f64]) {
    debug_assert_eq!(w.cols, z.len());
    debug_assert_eq!(w.rows, out.len());
    for (o, row) in out.iter_mut().zip(w.data.chunks_exact(w.cols)) {
        *o += dot(row, z);
    }
}

/// `out += Wᵀ · g` for row-major `w` of shape `(g.len(), out.len())`.
#[inline]
pub(crate) fn gemv_t_acc(w: &Matrix, g: &[f64], out: &mut [f64]) {
    debug_assert_eq!(w.rows, g.len());
    debug_assert_eq!(w.cols, out.len());
    for (&gi, row) in g.iter().zip(w.data.chunks_exact(w.cols)) {
        if gi == 0.0 {
            continue;
        }
        for (o, &wij) in out.iter_mut().zip(row) {
            *o += gi * wij;
        }
    }
}

/// `W += g ⊗ z` (outer product accumulate).
#[inline]
pub(crate) fn outer_acc(w: &mut Matrix, g: &[f64], z: &[f64]) {
    debug_assert_eq!(w.rows, g.len());
    debug_assert_eq!(w.cols, z.len());
    let cols = w.cols;
    for (&gi, row) in g.iter().zip(w.data.chunks_exact_mut(cols)) {
        if gi == 0.0 {
            continue;
        }
        for (wij, &zj) in row.iter_mut().zip(z) {
            *wij += gi * zj;
        }
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    // Four accumulators; the summation order is fixed so results stay bitwise reproducible.
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for i in 0..chunks {
        let j = i * 4;
        acc[0] += a[j] * b[j];
        acc[1] += a[j + 1] * b[j + 1];
        acc[2] += a[j + 2] * b[j + 2];
        acc[3] += a[j + 3] * b[j + 3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for j in chunks * 4..a.len() {
        s += a[j] * b[j];
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn m(rows: &[&[f64]]) -> Matrix {
        Matrix::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn matmul_examples() {
        let a = m(&[&[1.0, 2.0], &[3.0, 4.0]]);
        assert_eq!(matmul(&Matrix::identity(2), &a).unwrap(), a);
        assert_eq!(
            matmul(&a, &m(&[&[0.0], &[1.0]])).unwrap(),
            m(&[&[2.0], &[4.0]])
        );
        assert_eq!(
            matmul(&m(&[&[2.0, 0.0], &[0.0, 3.0]]), &m(&[&[1.0, 1.0], &[1.0, 1.0]])).unwrap(),
            m(&[&[2.0, 2.0], &[3.0, 3.0]])
        );
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let err = matmul(&Matrix::zeros(2, 3), &Matrix::zeros(2, 3)).unwrap_err();
        assert_eq!(
            err,
            NumericError::Shape {
                op: "matmul",
                left: (2, 3),
                right: (2, 3)
            }
        );
        let msg = err.to_string();
        assert!(msg.contains("(2, 3)"));
    }

    #[test]
    fn construction_invariants() {
        assert!(matches!(
            Matrix::new(0, 3, vec![]),
            Err(NumericError::Empty { .. })
        ));
        assert!(matches!(
            Matrix::new(2, 2, vec![1.0]),
            Err(NumericError::Length { .. })
        ));
    }

    #[test]
    fn sigmoid_examples() {
        let s = sigmoid(&m(&[&[0.0]]));
        assert_eq!(s.get(0, 0), 0.5);
        let x = 1.7;
        let s = sigmoid(&m(&[&[x, -x]]));
        assert!((s.get(0, 0) - (1.0 - s.get(0, 1))).abs() < 1e-15);
        let s = sigmoid(&m(&[&[40.0]]));
        assert!((s.get(0, 0) - 1.0).abs() < 1e-12);
        assert!(sigmoid(&m(&[&[-800.0]])).get(0, 0) >= 0.0);
    }

    #[test]
    fn tanh_examples() {
        assert_eq!(tanh_act(&m(&[&[0.0]])).get(0, 0), 0.0);
        let t = tanh_act(&m(&[&[0.3, -0.3]]));
        assert_eq!(t.get(0, 0), -t.get(0, 1));
        assert!((tanh_act(&m(&[&[40.0]])).get(0, 0) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn softmax_examples() {
        let p = softmax(&Matrix::zeros(1, 8));
        assert!(p.data().iter().all(|&v| v == 0.125));
        let logits = m(&[&[0.3, -1.2, 2.5, 0.0]]);
        let shifted = logits.map(|v| v + 123.456);
        let a = softmax(&logits);
        let b = softmax(&shifted);
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() < 1e-12);
        }
        let p = softmax(&m(&[&[1000.0, 0.0]]));
        assert!(p.is_finite());
        assert!((p.get(0, 0) - 1.0).abs() < 1e-12);
        assert!(p.get(0, 1) < 1e-300 + 1e-12);
    }

    #[test]
    fn derivative_identities_match_central_differences() {
        let h = 1e-6;
        for i in 0..200 {
            let x = -6.0 + 12.0 * i as f64 / 199.0;
            let fd = (sigmoid_scalar(x + h) - sigmoid_scalar(x - h)) / (2.0 * h);
            let an = sigmoid_grad_from_output(sigmoid_scalar(x));
            assert!((fd - an).abs() < 1e-7 * an.abs().max(1e-2), "sigmoid' at {x}");
            let fd = ((x + h).tanh() - (x - h).tanh()) / (2.0 * h);
            let an = tanh_grad_from_output(x.tanh());
            assert!((fd - an).abs() < 1e-7 * an.abs().max(1e-2), "tanh' at {x}");
        }
    }

    fn arb_matrix(rows: usize, cols: usize) -> impl Strategy<Value = Matrix> {
        prop::collection::vec(-2.0f64..2.0, rows * cols)
            .prop_map(move |d| Matrix::new(rows, cols, d).unwrap())
    }

    proptest! {
        #[test]
        fn matmul_is_associative(
            a in arb_matrix(3, 4),
            b in arb_matrix(4, 2),
            c in arb_matrix(2, 5),
        ) {
            let left = matmul(&matmul(&a, &b).unwrap(), &c).unwrap();
            let right = matmul(&a, &matmul(&b, &c).unwrap()).unwrap();
            let scale = left.data().iter().fold(1.0f64, |m, v| m.max(v.abs()));
            for (x, y) in left.data().iter().zip(right.data()) {
                prop_assert!((x - y).abs() / scale < 1e-9);
            }
        }

        #[test]
        fn softmax_rows_sum_to_one(logits in prop::collection::vec(-1000.0f64..1000.0, 24)) {
            let p = softmax(&Matrix::new(3, 8, logits).unwrap());
            for r in 0..3 {
                let s: f64 = p.row(r).iter().sum();
                prop_assert!((s - 1.0).abs() < 1e-12);
                prop_assert!(p.row(r).iter().all(|&v| v >= 0.0));
            }
        }

        #[test]
        fn gemv_helpers_agree_with_matmul(w in arb_matrix(3, 5), z in prop::collection::vec(-1.0f64..1.0, 5)) {
            let mut out = vec![0.0; 3];
            gemv_acc(&w, &z, &mut out);
            let zc = Matrix::new(5, 1, z.clone()).unwrap();
            let reference = matmul(&w, &zc).unwrap();
            for (a, b) in out.iter().zip(reference.data()) {
                prop_assert!((a - b).abs() < 1e-12);
            }
            let g = vec![0.5, -1.0, 2.0];
            let mut back = vec![0.0; 5];
            gemv_t_acc(&w, &g, &mut back);
            let reference = matmul(&w.transpose(), &Matrix::new(3, 1, g).unwrap()).unwrap();
            for (a, b) in back.iter().zip(reference.data()) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }
    }
}
