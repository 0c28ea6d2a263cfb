//! Domain weights on the probability simplex.
//!
//! The objective is `f(α) = Σ α_i c_i + λ_R·√(Σ α_i²/m_i)`, minimised by
//! projected gradient descent with halving backtracking.

const SIMPLEX_TOL: f64 = 1e-9;
pub const DEFAULT_TOLERANCE: f64 = 1e-8;
pub const MAX_ITERS: usize = 100_000;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum AlphaError {
    #[error("no domains")]
    Empty,
    #[error("weights are not on the simplex: {0:?}")]
    OffSimplex(Vec<f64>),
    #[error("sample counts must be at least 1: {0:?}")]
    SampleCounts(Vec<usize>),
    #[error("{got} values for {expected} sources")]
    Length { expected: usize, got: usize },
    #[error("the gradient-norm ledger is undefined without noise; set lambda_r_override to fix the regulariser weight")]
    NoiselessLedger,
    #[error("invalid constant: {0}")]
    Constant(String),
    #[error("no convergence after {iters} iterations (residual {residual:e}); best iterate {best:?}")]
    NotConverged { best: Vec<f64>, residual: f64, iters: usize },
    #[error("grid search over {0} sources is too large (limit 3)")]
    TooManySources(usize),
}

/// `α` on the simplex together with the per-source sample counts.
#[derive(Clone, Debug, PartialEq)]
pub struct DomainWeights {
    pub alpha: Vec<f64>,
    pub m: Vec<usize>,
}

impl DomainWeights {
    pub fn new(alpha: Vec<f64>, m: Vec<usize>) -> Result<Self, AlphaError> {
        if alpha.is_empty() {
            return Err(AlphaError::Empty);
        }
        if alpha.len() != m.len() {
            return Err(AlphaError::Length { expected: m.len(), got: alpha.len() });
        }
        if m.contains(&0) {
            return Err(AlphaError::SampleCounts(m));
        }
        check_simplex(&alpha)?;
        Ok(Self { alpha, m })
    }

    pub fn uniform(m: Vec<usize>) -> Result<Self, AlphaError> {
        let n = m.len();
        Self::new(vec![1.0 / n.max(1) as f64; n], m)
    }

    pub fn len(&self) -> usize {
        self.alpha.len()
    }

    pub fn is_empty(&self) -> bool {
        self.alpha.is_empty()
    }

    /// `Σ α_i²/m_i`, the coefficient appearing in every bound.
    pub fn concentration(&self) -> f64 {
        self.alpha.iter().zip(&self.m).map(|(a, &m)| a * a / m as f64).sum()
    }
}

pub fn check_simplex(alpha: &[f64]) -> Result<(), AlphaError> {
    let sum: f64 = alpha.iter().sum();
    if alpha.is_empty() || alpha.iter().any(|&a| !(a >= -SIMPLEX_TOL)) || (sum - 1.0).abs() > SIMPLEX_TOL {
        return Err(AlphaError::OffSimplex(alpha.to_vec()));
    }
    Ok(())
}

/// Euclidean projection onto `{α ≥ 0, Σα = 1}` by sorting and thresholding.
pub fn simplex_project(point: &[f64]) -> Result<Vec<f64>, AlphaError> {
    if point.is_empty() {
        return Err(AlphaError::Empty);
    }
    if point.iter().any(|v| !v.is_finite()) {
        return Err(AlphaError::Constant(format!("non-finite point {point:?}")));
    }
    let mut sorted = point.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let mut cum = 0.0;
    let mut theta = 0.0;
    for (j, &s) in sorted.iter().enumerate() {
        cum += s;
        let t = (cum - 1.0) / (j + 1) as f64;
        if s - t > 0.0 {
            theta = t;
        }
    }
    Ok(point.iter().map(|&p| (p - theta).max(0.0)).collect())
}

/// Linear coefficients and regulariser weight of the α problem.
#[derive(Clone, Debug, PartialEq)]
pub struct AlphaObjective {
    pub c: Vec<f64>,
    pub lambda_r: f64,
}

/// Constants of the α problem.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AlphaConstants {
    pub epsilon: f64,
    pub tau: f64,
    pub c0: f64,
    pub c1: f64,
}

impl AlphaObjective {
    /// `c_i = (ετ + C0(1−τ))·r_i(v) − (ετ + 1 − τ)·r_i(v′)` and
    /// `λ_R = C1·((1−τ+τε)·√(δ_u+δ_v) + τε·√δ_u)`. A `None` ledger (noiseless
    /// training) is an error unless `lambda_override` is given.
    pub fn build(
        risks_pred: &[f64],
        risks_dup: &[f64],
        k: &AlphaConstants,
        ledger: Option<(f64, f64)>,
        lambda_override: Option<f64>,
    ) -> Result<Self, AlphaError> {
        if risks_pred.len() != risks_dup.len() {
            return Err(AlphaError::Length { expected: risks_pred.len(), got: risks_dup.len() });
        }
        if risks_pred.is_empty() {
            return Err(AlphaError::Empty);
        }
        let (e, t) = (k.epsilon, k.tau);
        if !(0.0..=1.0).contains(&e) || !(0.0..=1.0).contains(&t) || !(k.c0 >= 0.0) || !(k.c1 >= 0.0) {
            return Err(AlphaError::Constant(format!("{k:?}")));
        }
        let a = e * t + k.c0 * (1.0 - t);
        let b = e * t + 1.0 - t;
        let c = risks_pred.iter().zip(risks_dup).map(|(rp, rd)| a * rp - b * rd).collect();
        let lambda_r = match (lambda_override, ledger) {
            (Some(l), _) => l,
            (None, Some((du, dv))) => {
                if !(du >= 0.0 && dv >= 0.0) {
                    return Err(AlphaError::Constant(format!("negative ledger ({du}, {dv})")));
                }
                k.c1 * ((1.0 - t + t * e) * (du + dv).sqrt() + t * e * du.sqrt())
            }
            (None, None) => return Err(AlphaError::NoiselessLedger),
        };
        if !(lambda_r >= 0.0) || !lambda_r.is_finite() {
            return Err(AlphaError::Constant(format!("lambda_r = {lambda_r}")));
        }
        Ok(Self { c, lambda_r })
    }

    fn regulariser(alpha: &[f64], m: &[usize]) -> f64 {
        alpha.iter().zip(m).map(|(a, &m)| a * a / m as f64).sum::<f64>().sqrt()
    }

    pub fn value(&self, alpha: &[f64], m: &[usize]) -> f64 {
        let lin: f64 = self.c.iter().zip(alpha).map(|(c, a)| c * a).sum();
        if self.lambda_r == 0.0 {
            return lin;
        }
        lin + self.lambda_r * Self::regulariser(alpha, m)
    }

    pub fn gradient(&self, alpha: &[f64], m: &[usize]) -> Vec<f64> {
        let r = Self::regulariser(alpha, m);
        self.c
            .iter()
            .zip(alpha.iter().zip(m))
            .map(|(c, (a, &m))| if self.lambda_r == 0.0 || r == 0.0 { *c } else { c + self.lambda_r * a / (m as f64 * r) })
            .collect()
    }
}

/// Fixed-point residual `‖α − P(α − ∇f(α))‖`.
fn residual(obj: &AlphaObjective, alpha: &[f64], m: &[usize]) -> f64 {
    let g = obj.gradient(alpha, m);
    let step: Vec<f64> = alpha.iter().zip(&g).map(|(a, g)| a - g).collect();
    let p = simplex_project(&step).expect("finite step");
    alpha.iter().zip(&p).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt()
}

/// Projected gradient descent from the uniform point.
pub fn solve_alpha(obj: &AlphaObjective, m: &[usize], tolerance: f64) -> Result<DomainWeights, AlphaError> {
    let n = obj.c.len();
    if n == 0 {
        return Err(AlphaError::Empty);
    }
    if m.len() != n {
        return Err(AlphaError::Length { expected: n, got: m.len() });
    }
    if m.contains(&0) {
        return Err(AlphaError::SampleCounts(m.to_vec()));
    }
    if obj.c.iter().any(|c| !c.is_finite()) {
        return Err(AlphaError::Constant(format!("non-finite coefficients {:?}", obj.c)));
    }
    if n == 1 {
        return DomainWeights::new(vec![1.0], m.to_vec());
    }
    let mut alpha = vec![1.0 / n as f64; n];
    let mut f = obj.value(&alpha, m);
    let mut best = (f, alpha.clone());
    let mut res = f64::INFINITY;
    for _ in 0..MAX_ITERS {
        res = residual(obj, &alpha, m);
        if res < tolerance {
            return finish(alpha, m);
        }
        let g = obj.gradient(&alpha, m);
        let mut t = 1.0;
        loop {
            let trial: Vec<f64> = alpha.iter().zip(&g).map(|(a, g)| a - t * g).collect();
            let next = simplex_project(&trial)?;
            let d: Vec<f64> = next.iter().zip(&alpha).map(|(x, a)| x - a).collect();
            let sq: f64 = d.iter().map(|d| d * d).sum();
            let fn_ = obj.value(&next, m);
            // Accept once t is below the local Lipschitz estimate from gradient
            // differences; a test on f stalls because near the optimum its
            // decrease falls below rounding.
            let gn = obj.gradient(&next, m);
            let curv: f64 = gn.iter().zip(&g).zip(&d).map(|((a, b), d)| (a - b) * d).sum();
            if curv <= sq / t || t < 1e-30 {
                alpha = next;
                f = fn_;
                break;
            }
            t *= 0.5;
        }
        if f < best.0 {
            best = (f, alpha.clone());
        }
    }
    Err(AlphaError::NotConverged { best: best.1, residual: res, iters: MAX_ITERS })
}

/// Renormalises away rounding so the result meets the simplex invariant exactly.
fn finish(mut alpha: Vec<f64>, m: &[usize]) -> Result<DomainWeights, AlphaError> {
    for a in &mut alpha {
        *a = a.max(0.0);
    }
    let s: f64 = alpha.iter().sum();
    alpha.iter_mut().for_each(|a| *a /= s);
    DomainWeights::new(alpha, m.to_vec())
}

/// `C·α_old + (1 − C)·α_new`.
pub fn moving_average_update(old: &[f64], new: &[f64], c: f64) -> Result<Vec<f64>, AlphaError> {
    if !(c > 0.0 && c < 1.0) {
        return Err(AlphaError::Constant(format!("moving-average weight {c} outside (0, 1)")));
    }
    if old.len() != new.len() {
        return Err(AlphaError::Length { expected: old.len(), got: new.len() });
    }
    check_simplex(old)?;
    check_simplex(new)?;
    Ok(old.iter().zip(new).map(|(a, b)| c * a + (1.0 - c) * b).collect())
}

/// Exhaustive minimisation over the simplex grid of spacing `step` (N ≤ 3).
pub fn grid_oracle(obj: &AlphaObjective, m: &[usize], step: f64) -> Result<(Vec<f64>, f64), AlphaError> {
    let n = obj.c.len();
    if n > 3 {
        return Err(AlphaError::TooManySources(n));
    }
    if n == 0 {
        return Err(AlphaError::Empty);
    }
    if !(step > 0.0 && step <= 0.01) {
        return Err(AlphaError::Constant(format!("grid step {step} must lie in (0, 0.01]")));
    }
    let k = (1.0 / step).round() as usize;
    let mut best = (vec![1.0], f64::INFINITY);
    let mut consider = |a: Vec<f64>| {
        let v = obj.value(&a, m);
        if v < best.1 {
            best = (a, v);
        }
    };
    match n {
        1 => consider(vec![1.0]),
        2 => (0..=k).for_each(|i| {
            let a = i as f64 / k as f64;
            consider(vec![a, 1.0 - a]);
        }),
        _ => {
            for i in 0..=k {
                for j in 0..=(k - i) {
                    let (a, b) = (i as f64 / k as f64, j as f64 / k as f64);
                    consider(vec![a, b, (1.0 - a - b).max(0.0)]);
                }
            }
        }
    }
    Ok(best)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.iter().zip(b).all(|(x, y)| (x - y).abs() < tol)
    }

    #[test]
    fn projection_examples() {
        assert_eq!(simplex_project(&[0.5, 0.5]).unwrap(), vec![0.5, 0.5]);
        assert!(close(&simplex_project(&[1.2, -0.2]).unwrap(), &[1.0, 0.0], 1e-15));
        assert!(close(&simplex_project(&[0.8, 0.8]).unwrap(), &[0.5, 0.5], 1e-15));
        assert_eq!(simplex_project(&[]), Err(AlphaError::Empty));
    }

    #[test]
    fn coefficient_elimination() {
        let k = |tau| AlphaConstants { epsilon: 0.3, tau, c0: 1.2, c1: 0.5 };
        let o = AlphaObjective::build(&[1.0, 2.0], &[0.5, 0.25], &k(1.0), Some((0.0, 0.0)), None).unwrap();
        assert!(close(&o.c, &[0.3 * 1.0 - 0.3 * 0.5, 0.3 * 2.0 - 0.3 * 0.25], 1e-15));
        let o = AlphaObjective::build(&[1.0, 2.0], &[0.5, 0.25], &k(0.0), Some((0.0, 0.0)), None).unwrap();
        assert!(close(&o.c, &[1.2 - 0.5, 2.4 - 0.25], 1e-15));
    }

    #[test]
    fn lambda_from_ledger() {
        let k = AlphaConstants { epsilon: 1.0, tau: 1.0, c0: 1.2, c1: 0.5 };
        let o = AlphaObjective::build(&[0.0], &[0.0], &k, Some((4.0, 0.0)), None).unwrap();
        assert_eq!(o.lambda_r, 2.0);
        assert_eq!(AlphaObjective::build(&[0.0], &[0.0], &k, None, None), Err(AlphaError::NoiselessLedger));
        assert_eq!(AlphaObjective::build(&[0.0], &[0.0], &k, None, Some(0.7)).unwrap().lambda_r, 0.7);
    }

    #[test]
    fn pure_regulariser_weights_follow_sample_counts() {
        let o = AlphaObjective { c: vec![0.0, 0.0], lambda_r: 1.0 };
        let w = solve_alpha(&o, &[100, 300], DEFAULT_TOLERANCE).unwrap();
        assert!(close(&w.alpha, &[0.25, 0.75], 1e-7), "{:?}", w.alpha);
        let w = solve_alpha(&o, &[50, 50], DEFAULT_TOLERANCE).unwrap();
        assert!(close(&w.alpha, &[0.5, 0.5], 1e-12));
    }

    #[test]
    fn linear_objective_picks_a_vertex() {
        let o = AlphaObjective { c: vec![0.4, -0.1, 0.3], lambda_r: 0.0 };
        let w = solve_alpha(&o, &[10, 10, 10], DEFAULT_TOLERANCE).unwrap();
        assert!(close(&w.alpha, &[0.0, 1.0, 0.0], 1e-12));
    }

    #[test]
    fn single_source_is_trivial() {
        let o = AlphaObjective { c: vec![3.0], lambda_r: 5.0 };
        assert_eq!(solve_alpha(&o, &[7], DEFAULT_TOLERANCE).unwrap().alpha, vec![1.0]);
    }

    #[test]
    fn solver_matches_grid() {
        let o = AlphaObjective { c: vec![0.2, -0.05, 0.1], lambda_r: 0.3 };
        let m = [40, 90, 20];
        let w = solve_alpha(&o, &m, DEFAULT_TOLERANCE).unwrap();
        let (_, gv) = grid_oracle(&o, &m, 0.005).unwrap();
        assert!(o.value(&w.alpha, &m) <= gv + 1e-6);
        assert_eq!(
            grid_oracle(&AlphaObjective { c: vec![0.0; 4], lambda_r: 0.0 }, &[1; 4], 0.01),
            Err(AlphaError::TooManySources(4))
        );
    }

    #[test]
    fn converges_with_a_large_regulariser() {
        // Weights of this size arise from small Langevin noise.
        for &(lambda, c) in &[(1.3e4, [0.31, 0.44]), (2.7e6, [-0.2, 0.9]), (85.0, [0.05, 0.02])] {
            let o = AlphaObjective { c: c.to_vec(), lambda_r: lambda };
            let m = [1497, 2000];
            let w = solve_alpha(&o, &m, DEFAULT_TOLERANCE).unwrap();
            let (_, gv) = grid_oracle(&o, &m, 0.001).unwrap();
            assert!(o.value(&w.alpha, &m) <= gv + 1e-6 * gv.abs().max(1.0));
        }
    }

    #[test]
    fn moving_average_examples() {
        let a = moving_average_update(&[0.5, 0.5], &[1.0, 0.0], 0.9).unwrap();
        assert!(close(&a, &[0.55, 0.45], 1e-15));
        assert_eq!(moving_average_update(&[0.3, 0.7], &[0.3, 0.7], 0.5).unwrap(), vec![0.3, 0.7]);
        assert!(moving_average_update(&[0.3, 0.3], &[0.5, 0.5], 0.5).is_err());
        assert!(moving_average_update(&[0.5, 0.5], &[0.5, 0.5], 1.0).is_err());
    }
}
