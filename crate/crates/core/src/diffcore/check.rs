use super::matrix::DenseMatrix;
use super::params::ParameterVector;
use super::GraphError;

/// Denominator floor of [`relative_error`]. Central differences with a
/// 1e-6 step carry roughly 1e-10 of rounding noise, so a gradient that is
/// exactly zero could never match without it.
pub const RELATIVE_FLOOR: f64 = 1e-3;

/// `|a - c| / max(|a| + |c|, RELATIVE_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(RELATIVE_FLOOR)
}

/// Compares an analytic gradient with central differences, coordinate by
/// coordinate, and returns the largest relative error.
///
/// `objective` maps parameters to the graph output and its gradient. The
/// output must be 1×1.
pub fn finite_diff_check<F>(mut objective: F, params: &ParameterVector, step: f64) -> Result<f64, GraphError>
where
    F: FnMut(&ParameterVector) -> Result<(DenseMatrix, ParameterVector), GraphError>,
{
    let scalar = |m: &DenseMatrix| -> Result<f64, GraphError> {
        if m.shape() != (1, 1) {
            return Err(GraphError::NonScalarOutput(m.shape()));
        }
        Ok(m.values()[0])
    };
    let (out, grad) = objective(params)?;
    scalar(&out)?;
    if !grad.same_layout(params) {
        return Err(GraphError::Layout("gradient layout differs from parameters".into()));
    }
    let mut probe = params.clone();
    let mut worst = 0.0f64;
    for i in 0..params.len() {
        let orig = params.values()[i];
        probe.values_mut()[i] = orig + step;
        let plus = scalar(&objective(&probe)?.0)?;
        probe.values_mut()[i] = orig - step;
        let minus = scalar(&objective(&probe)?.0)?;
        probe.values_mut()[i] = orig;
        let numeric = (plus - minus) / (2.0 * step);
        worst = worst.max(relative_error(grad.values()[i], numeric));
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(v: f64) -> DenseMatrix {
        DenseMatrix::filled(1, 1, v)
    }

    #[test]
    fn linear_function_is_exact() {
        let coeffs = [3.0, -2.0, 0.5];
        let p = ParameterVector::flatten(&[DenseMatrix::row_vector(vec![0.1, 0.7, -0.4])]);
        let err = finite_diff_check(
            |p| {
                let v = p.values().iter().zip(coeffs).map(|(x, c)| x * c).sum();
                let g = ParameterVector::from_parts(coeffs.to_vec(), p.layout().to_vec())?;
                Ok((scalar(v), g))
            },
            &p,
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-9, "{err}");
    }

    #[test]
    fn quadratic_matches_hand_gradient() {
        // f(x, y) = x^2 + 3xy - y^2, grad = (2x + 3y, 3x - 2y)
        let p = ParameterVector::flatten(&[DenseMatrix::row_vector(vec![0.8, -1.3])]);
        let err = finite_diff_check(
            |p| {
                let (x, y) = (p.values()[0], p.values()[1]);
                let g = ParameterVector::from_parts(vec![2.0 * x + 3.0 * y, 3.0 * x - 2.0 * y], p.layout().to_vec())?;
                Ok((scalar(x * x + 3.0 * x * y - y * y), g))
            },
            &p,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-7, "{err}");
    }

    #[test]
    fn non_scalar_output_is_rejected() {
        let p = ParameterVector::flatten(&[DenseMatrix::row_vector(vec![1.0])]);
        let res = finite_diff_check(|p| Ok((DenseMatrix::zeros(1, 2), p.clone())), &p, 1e-6);
        assert!(matches!(res, Err(GraphError::NonScalarOutput((1, 2)))));
    }
}
