use super::scalar::Scalar;
use super::GraphError;

/// Row-major dense matrix over a tape scalar.
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix<S> {
    rows: usize,
    cols: usize,
    values: Vec<S>,
}

/// The 64-bit matrix every public API speaks in.
pub type DenseMatrix = Matrix<f64>;

impl<S: Scalar> Matrix<S> {
    /// Builds a matrix, rejecting a length mismatch or a non-finite entry.
    pub fn new(rows: usize, cols: usize, values: Vec<S>) -> Result<Self, GraphError> {
        if values.len() != rows * cols {
            return Err(GraphError::Layout(format!("{} values cannot fill a {rows}x{cols} matrix", values.len())));
        }
        if let Some(i) = values.iter().position(|v| !v.re().is_finite()) {
            return Err(GraphError::NonFinite { index: i });
        }
        Ok(Self { rows, cols, values })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, values: vec![S::zero(); rows * cols] }
    }

    pub fn filled(rows: usize, cols: usize, v: S) -> Self {
        Self { rows, cols, values: vec![v; rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.values[i * n + i] = S::one();
        }
        m
    }

    /// Single-row matrix.
    pub fn row_vector(values: Vec<S>) -> Self {
        Self { rows: 1, cols: values.len(), values }
    }

    /// Stacks equally long rows.
    pub fn from_rows(rows: &[Vec<S>]) -> Result<Self, GraphError> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut values = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != cols {
                return Err(GraphError::Layout(format!("row {i} has width {} but row 0 has width {cols}", r.len())));
            }
            values.extend_from_slice(r);
        }
        Self::new(rows.len(), cols, values)
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

    pub fn values(&self) -> &[S] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [S] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<S> {
        self.values
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> S {
        self.values[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: S) {
        self.values[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[S] {
        &self.values[r * self.cols..(r + 1) * self.cols]
    }

    pub fn map(&self, f: impl Fn(S) -> S) -> Self {
        Self { rows: self.rows, cols: self.cols, values: self.values.iter().map(|&v| f(v)).collect() }
    }

    pub fn transpose(&self) -> Self {
        let mut out = Self::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.values[c * self.rows + r] = self.values[r * self.cols + c];
            }
        }
        out
    }

    /// `self · other`; the caller guarantees inner dimensions agree.
    pub fn matmul(&self, other: &Self) -> Self {
        debug_assert_eq!(self.cols, other.rows);
        let (n, k, m) = (self.rows, self.cols, other.cols);
        let mut out = Self::zeros(n, m);
        for i in 0..n {
            let out_row = &mut out.values[i * m..(i + 1) * m];
            for p in 0..k {
                let a = self.values[i * k + p];
                let b_row = &other.values[p * m..(p + 1) * m];
                for (o, &b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        out
    }

    /// `selfᵀ · other` without materialising the transpose.
    pub fn t_matmul(&self, other: &Self) -> Self {
        debug_assert_eq!(self.rows, other.rows);
        let (k, n, m) = (self.rows, self.cols, other.cols);
        let mut out = Self::zeros(n, m);
        for p in 0..k {
            let b_row = &other.values[p * m..(p + 1) * m];
            for i in 0..n {
                let a = self.values[p * n + i];
                let out_row = &mut out.values[i * m..(i + 1) * m];
                for (o, &b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        out
    }

    /// `self · otherᵀ`.
    pub fn matmul_t(&self, other: &Self) -> Self {
        debug_assert_eq!(self.cols, other.cols);
        let (n, k, m) = (self.rows, self.cols, other.rows);
        let mut out = Self::zeros(n, m);
        for i in 0..n {
            let a_row = &self.values[i * k..(i + 1) * k];
            for j in 0..m {
                let b_row = &other.values[j * k..(j + 1) * k];
                let mut acc = S::zero();
                for (&a, &b) in a_row.iter().zip(b_row) {
                    acc += a * b;
                }
                out.values[i * m + j] = acc;
            }
        }
        out
    }

    pub fn add_assign(&mut self, other: &Self) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, &b) in self.values.iter_mut().zip(&other.values) {
            *a += b;
        }
    }

    /// Real parts as a 64-bit matrix.
    pub fn to_real(&self) -> DenseMatrix {
        Matrix { rows: self.rows, cols: self.cols, values: self.values.iter().map(|v| v.re()).collect() }
    }

    pub fn from_real(m: &DenseMatrix) -> Self {
        Matrix { rows: m.rows, cols: m.cols, values: m.values.iter().map(|&v| S::from_f64(v)).collect() }
    }
}

impl DenseMatrix {
    pub fn frobenius_sq(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum()
    }

    /// Index of the largest entry in each row; ties go to the lowest index.
    pub fn row_argmax(&self) -> Vec<usize> {
        (0..self.rows)
            .map(|r| {
                let row = self.row(r);
                let mut best = 0;
                for (c, &v) in row.iter().enumerate().skip(1) {
                    if v > row[best] {
                        best = c;
                    }
                }
                best
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn products_agree_with_explicit_transpose() {
        let a = DenseMatrix::new(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let b = DenseMatrix::new(2, 2, vec![1.0, -1.0, 0.5, 2.0]).unwrap();
        assert_eq!(a.t_matmul(&b), a.transpose().matmul(&b));
        let c = DenseMatrix::new(4, 3, (0..12).map(f64::from).collect()).unwrap();
        assert_eq!(a.matmul_t(&c), a.matmul(&c.transpose()));
    }

    #[test]
    fn rejects_bad_length_and_nan() {
        assert!(DenseMatrix::new(2, 2, vec![0.0; 3]).is_err());
        assert!(matches!(DenseMatrix::new(1, 2, vec![0.0, f64::NAN]), Err(GraphError::NonFinite { index: 1 })));
    }

    #[test]
    fn argmax_ties_to_lowest() {
        let m = DenseMatrix::new(2, 3, vec![1.0, 1.0, 0.0, 0.0, 2.0, 2.0]).unwrap();
        assert_eq!(m.row_argmax(), vec![0, 1]);
    }
}
