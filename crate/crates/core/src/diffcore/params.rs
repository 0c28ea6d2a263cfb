use super::matrix::{DenseMatrix, Matrix};
use super::scalar::{Dual, Scalar};
use super::GraphError;

/// Flat parameter storage with the matrix shapes needed to rebuild layers.
#[derive(Clone, Debug, PartialEq)]
pub struct ParameterVector {
    values: Vec<f64>,
    layout: Vec<(usize, usize)>,
}

impl ParameterVector {
    pub fn flatten(mats: &[DenseMatrix]) -> Self {
        let layout = mats.iter().map(DenseMatrix::shape).collect();
        let values = mats.iter().flat_map(|m| m.values().iter().copied()).collect();
        Self { values, layout }
    }

    pub fn from_parts(values: Vec<f64>, layout: Vec<(usize, usize)>) -> Result<Self, GraphError> {
        let expected: usize = layout.iter().map(|(r, c)| r * c).sum();
        if expected != values.len() {
            return Err(GraphError::Layout(format!("layout expects {expected} parameters, got {}", values.len())));
        }
        Ok(Self { values, layout })
    }

    pub fn zeros_like(other: &Self) -> Self {
        Self { values: vec![0.0; other.values.len()], layout: other.layout.clone() }
    }

    pub fn unflatten(&self) -> Vec<DenseMatrix> {
        let mut out = Vec::with_capacity(self.layout.len());
        let mut offset = 0;
        for &(r, c) in &self.layout {
            let n = r * c;
            let m =
                DenseMatrix::new(r, c, self.values[offset..offset + n].to_vec()).expect("layout was validated at construction");
            out.push(m);
            offset += n;
        }
        out
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn layout(&self) -> &[(usize, usize)] {
        &self.layout
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn same_layout(&self, other: &Self) -> bool {
        self.layout == other.layout
    }

    pub fn squared_norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum()
    }

    /// `self += c · other`.
    pub fn axpy(&mut self, c: f64, other: &Self) -> Result<(), GraphError> {
        if !self.same_layout(other) {
            return Err(GraphError::Layout("parameter layouts differ".into()));
        }
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += c * b;
        }
        Ok(())
    }

    pub fn scaled(&self, c: f64) -> Self {
        Self { values: self.values.iter().map(|v| v * c).collect(), layout: self.layout.clone() }
    }

    /// Index of the first non-finite entry.
    pub fn first_non_finite(&self) -> Option<usize> {
        self.values.iter().position(|v| !v.is_finite())
    }
}

impl ParameterVector {
    /// Unflattened matrices lifted into a tape scalar.
    pub fn matrices<S: Scalar>(&self) -> Vec<Matrix<S>> {
        self.unflatten().iter().map(Matrix::from_real).collect()
    }

    /// Unflattened dual matrices whose tangent part is `tangent`.
    pub fn dual_matrices(&self, tangent: &ParameterVector) -> Result<Vec<Matrix<Dual>>, GraphError> {
        if !self.same_layout(tangent) {
            return Err(GraphError::Layout("tangent layout differs from parameters".into()));
        }
        let mut out = Vec::with_capacity(self.layout.len());
        let mut offset = 0;
        for &(r, c) in &self.layout {
            let n = r * c;
            let vals = self.values[offset..offset + n]
                .iter()
                .zip(&tangent.values[offset..offset + n])
                .map(|(&v, &t)| Dual::new(v, t))
                .collect();
            out.push(Matrix::new(r, c, vals)?);
            offset += n;
        }
        Ok(out)
    }

    /// Flattens dual matrices, keeping only the tangent parts.
    pub fn tangent_of(mats: &[Matrix<Dual>]) -> Self {
        let layout = mats.iter().map(Matrix::shape).collect();
        let values = mats.iter().flat_map(|m| m.values().iter().map(|d| d.eps)).collect();
        Self { values, layout }
    }
}
