//! Exact transport on tiny instances, inequality checks and bound calculators.
//!
//! `exact_w1` enumerates permutation couplings: for two uniform measures with
//! the same number of atoms an optimal coupling is a permutation (Birkhoff),
//! so the enumeration is exact. Mutual-information terms and the ideal joint
//! errors are never estimated; they enter as user-supplied inputs.

use std::path::Path;

use crate::data::{LabeledBatch, Targets};
use crate::diffcore::DenseMatrix;
use crate::models::{lipschitz_upper_bound, LipschitzCertificate, ModelError, ModelTriple, Task};
use crate::risks::{self, RiskError};

pub const MAX_EXACT_ATOMS: usize = 7;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum TheoryError {
    #[error("measures have {0} and {1} atoms; exact transport needs equal sizes")]
    UnequalSizes(usize, usize),
    #[error("{0} atoms exceed the exact-transport limit of {MAX_EXACT_ATOMS}")]
    TooLarge(usize),
    #[error("empty measure")]
    Empty,
    #[error("points have different widths")]
    Width,
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Risk(#[from] RiskError),
    #[error("csv: {0}")]
    Csv(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LabelLoss {
    /// `|y − y′|`.
    Absolute,
    /// `1[y ≠ y′]`.
    ZeroOne,
}

impl LabelLoss {
    pub fn eval(self, a: f64, b: f64) -> f64 {
        match self {
            LabelLoss::Absolute => (a - b).abs(),
            LabelLoss::ZeroOne => f64::from(u8::from(a != b)),
        }
    }
}

/// Which space the metric lives on, which fixes the certificate scale.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MetricSpace {
    /// Inputs: scale `L·M·K`.
    Example,
    /// Representations: scale `L·M`.
    Representation,
}

/// `ρ((x, y), (x′, y′)) = ℓ(y, y′) + scale·‖x − x′‖₂`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GroundMetric {
    pub label_loss: LabelLoss,
    pub scale: f64,
}

impl GroundMetric {
    pub fn new(label_loss: LabelLoss, scale: f64) -> Result<Self, TheoryError> {
        if !(scale >= 0.0) || !scale.is_finite() {
            return Err(TheoryError::Invalid(format!("metric scale {scale}")));
        }
        Ok(Self { label_loss, scale })
    }

    pub fn from_certificate(space: MetricSpace, label_loss: LabelLoss, cert: &LipschitzCertificate) -> Result<Self, TheoryError> {
        let scale = match space {
            MetricSpace::Example => cert.l * cert.m * cert.k,
            MetricSpace::Representation => cert.l * cert.m,
        };
        Self::new(label_loss, scale)
    }

    pub fn distance(&self, a: &LabeledPoint, b: &LabeledPoint) -> f64 {
        let d2: f64 = a.x.iter().zip(&b.x).map(|(p, q)| (p - q) * (p - q)).sum();
        let label = self.label_loss.eval(a.y, b.y);
        if self.scale == 0.0 {
            label
        } else {
            label + self.scale * d2.sqrt()
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledPoint {
    pub x: Vec<f64>,
    pub y: f64,
}

impl LabeledPoint {
    pub fn new(x: Vec<f64>, y: f64) -> Self {
        Self { x, y }
    }
}

/// Two uniform empirical measures with the same number of atoms (at most 7).
#[derive(Clone, Debug, PartialEq)]
pub struct DiscreteMeasurePair {
    pub first: Vec<LabeledPoint>,
    pub second: Vec<LabeledPoint>,
}

impl DiscreteMeasurePair {
    pub fn new(first: Vec<LabeledPoint>, second: Vec<LabeledPoint>) -> Result<Self, TheoryError> {
        if first.len() != second.len() {
            return Err(TheoryError::UnequalSizes(first.len(), second.len()));
        }
        if first.is_empty() {
            return Err(TheoryError::Empty);
        }
        if first.len() > MAX_EXACT_ATOMS {
            return Err(TheoryError::TooLarge(first.len()));
        }
        let w = first[0].x.len();
        if first.iter().chain(&second).any(|p| p.x.len() != w) {
            return Err(TheoryError::Width);
        }
        Ok(Self { first, second })
    }

    pub fn len(&self) -> usize {
        self.first.len()
    }

    pub fn is_empty(&self) -> bool {
        self.first.is_empty()
    }

    pub fn swapped(&self) -> Self {
        Self { first: self.second.clone(), second: self.first.clone() }
    }

    fn side_matrix(points: &[LabeledPoint]) -> DenseMatrix {
        let w = points[0].x.len();
        let vals = points.iter().flat_map(|p| p.x.iter().copied()).collect();
        DenseMatrix::new(points.len(), w, vals).expect("widths checked at construction")
    }

    /// The same labels at the representation `x ↦ g(u, x)`.
    pub fn represent(&self, model: &ModelTriple) -> Result<Self, TheoryError> {
        let map = |pts: &[LabeledPoint]| -> Result<Vec<LabeledPoint>, TheoryError> {
            let f = model.represent(&Self::side_matrix(pts))?;
            Ok(pts.iter().enumerate().map(|(i, p)| LabeledPoint::new(f.row(i).to_vec(), p.y)).collect())
        };
        Ok(Self { first: map(&self.first)?, second: map(&self.second)? })
    }

    /// Reads rows `measure,y,x_1,…,x_d` where `measure` is 0 for `first`
    /// and 1 for `second`.
    pub fn read_csv(path: &Path) -> Result<Self, TheoryError> {
        let mut r = csv::Reader::from_path(path).map_err(|e| TheoryError::Csv(e.to_string()))?;
        let (mut first, mut second) = (Vec::new(), Vec::new());
        for rec in r.records() {
            let rec = rec.map_err(|e| TheoryError::Csv(e.to_string()))?;
            let line = rec.position().map_or(0, |p| p.line());
            let vals = rec
                .iter()
                .map(|c| c.trim().parse::<f64>())
                .collect::<Result<Vec<_>, _>>()
                .map_err(|e| TheoryError::Csv(format!("line {line}: {e}")))?;
            if vals.len() < 3 {
                return Err(TheoryError::Csv(format!("line {line}: need measure, y and at least one feature")));
            }
            let p = LabeledPoint::new(vals[2..].to_vec(), vals[1]);
            match vals[0] {
                0.0 => first.push(p),
                1.0 => second.push(p),
                m => return Err(TheoryError::Csv(format!("line {line}: measure must be 0 or 1, got {m}"))),
            }
        }
        Self::new(first, second)
    }

    fn batch(points: &[LabeledPoint]) -> LabeledBatch {
        LabeledBatch { x: Self::side_matrix(points), y: Targets::Values(points.iter().map(|p| p.y).collect()) }
    }
}

/// Optimal transport cost and one optimal matching `first[i] → second[perm[i]]`.
pub fn exact_w1_coupling(pair: &DiscreteMeasurePair, metric: &GroundMetric) -> Result<(f64, Vec<usize>), TheoryError> {
    let n = pair.len();
    if n == 0 {
        return Err(TheoryError::Empty);
    }
    if n > MAX_EXACT_ATOMS {
        return Err(TheoryError::TooLarge(n));
    }
    let cost: Vec<Vec<f64>> = pair.first.iter().map(|a| pair.second.iter().map(|b| metric.distance(a, b)).collect()).collect();
    let total = |p: &[usize]| p.iter().enumerate().map(|(i, &j)| cost[i][j]).sum::<f64>();

    // Heap's algorithm, iterative form.
    let mut perm: Vec<usize> = (0..n).collect();
    let mut best = (total(&perm), perm.clone());
    let mut c = vec![0usize; n];
    let mut i = 0;
    while i < n {
        if c[i] < i {
            if i % 2 == 0 {
                perm.swap(0, i);
            } else {
                perm.swap(c[i], i);
            }
            let t = total(&perm);
            if t < best.0 {
                best = (t, perm.clone());
            }
            c[i] += 1;
            i = 0;
        } else {
            c[i] = 0;
            i += 1;
        }
    }
    Ok((best.0 / n as f64, best.1))
}

pub fn exact_w1(pair: &DiscreteMeasurePair, metric: &GroundMetric) -> Result<f64, TheoryError> {
    Ok(exact_w1_coupling(pair, metric)?.0)
}

/// Outcome of the risk-difference inequality on one instance.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RiskGapCheck {
    /// `|R_T(u, v) − R_S(u, v)|` with absolute-error loss.
    pub lhs: f64,
    /// Exact W1 of the represented measures under `ρ_z̃` (scale `L·M`).
    pub rhs_rep: f64,
    /// Exact W1 of the input measures under `ρ_z` (scale `L·M·K`).
    pub rhs: f64,
    pub holds: bool,
}

/// Checks `|R_T − R_S| ≤ W1(T̃_u, S̃_u) ≤ W1(T, S)` for a regression model.
/// `first` plays the target and `second` the (combined) source.
pub fn check_risk_gap(
    model: &ModelTriple,
    pair: &DiscreteMeasurePair,
    cert: &LipschitzCertificate,
) -> Result<RiskGapCheck, TheoryError> {
    if model.arch.task != Task::Regression {
        return Err(ModelError::AssumptionUnverifiable.into());
    }
    let rt = risks::empirical_risk_target(model, &DiscreteMeasurePair::batch(&pair.first))?;
    let rs = risks::empirical_risk_target(model, &DiscreteMeasurePair::batch(&pair.second))?;
    let lhs = (rt - rs).abs();
    let rep_metric = GroundMetric::from_certificate(MetricSpace::Representation, LabelLoss::Absolute, cert)?;
    let in_metric = GroundMetric::from_certificate(MetricSpace::Example, LabelLoss::Absolute, cert)?;
    let rhs_rep = exact_w1(&pair.represent(model)?, &rep_metric)?;
    let rhs = exact_w1(pair, &in_metric)?;
    let holds = lhs <= rhs_rep + 1e-9 && rhs_rep <= rhs + 1e-9;
    Ok(RiskGapCheck { lhs, rhs_rep, rhs, holds })
}

/// Dual lower bound from the duplicate critic of a regression model.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct KantorovichCheck {
    /// `R_T(u, v′) − R_S(u, v′)`.
    pub critic_value: f64,
    /// Lipschitz constant of `z̃ ↦ |h(v′, x̃) − y|` with respect to `ρ_z̃`.
    pub critic_lipschitz: f64,
    pub normalized: f64,
    /// Exact W1 of the represented measures under `ρ_z̃`.
    pub w1: f64,
}

/// Evaluates the critic at `v′` and divides by its certified Lipschitz
/// constant under `ρ_z̃ = |y − y′| + scale·‖x̃ − x̃′‖`. The normalized value
/// never exceeds the exact W1.
pub fn kantorovich_check(model: &ModelTriple, pair: &DiscreteMeasurePair, scale: f64) -> Result<KantorovichCheck, TheoryError> {
    if model.arch.task != Task::Regression {
        return Err(ModelError::AssumptionUnverifiable.into());
    }
    if !(scale > 0.0) {
        return Err(TheoryError::Invalid("the metric scale must be positive".into()));
    }
    let dual = ModelTriple { pred: model.dup.clone(), ..model.clone() };
    let rt = risks::empirical_risk_target(&dual, &DiscreteMeasurePair::batch(&pair.first))?;
    let rs = risks::empirical_risk_target(&dual, &DiscreteMeasurePair::batch(&pair.second))?;
    let l_dup = lipschitz_upper_bound(&model.arch.predictor, &model.dup)?;
    let critic_lipschitz = (l_dup / scale).max(1.0);
    let metric = GroundMetric::new(LabelLoss::Absolute, scale)?;
    let w1 = exact_w1(&pair.represent(model)?, &metric)?;
    Ok(KantorovichCheck { critic_value: rt - rs, critic_lipschitz, normalized: (rt - rs) / critic_lipschitz, w1 })
}

/// Hoeffding constant `(b − a)/2` of a variable bounded in `[a, b]`.
pub fn subgaussian_from_range(lower: f64, upper: f64) -> Result<f64, TheoryError> {
    if !(upper >= lower) {
        return Err(TheoryError::Invalid(format!("inverted range [{lower}, {upper}]")));
    }
    Ok((upper - lower) / 2.0)
}

/// Symbols shared by the three bounds.
#[derive(Clone, Debug, PartialEq)]
pub struct BoundConstants {
    pub sigma: f64,
    /// Labeled target size.
    pub m_t: usize,
    /// Unlabeled target size.
    pub m_t_prime: usize,
    pub m: Vec<usize>,
    pub alpha: Vec<f64>,
    pub epsilon: f64,
    pub tau: f64,
    pub delta_u: f64,
    pub delta_v: f64,
    /// Ideal joint error, user-supplied.
    pub r_star: f64,
    /// Ideal representation joint error, user-supplied.
    pub r_star_rep: f64,
}

impl BoundConstants {
    fn validate(&self) -> Result<(), TheoryError> {
        let bad = |m: String| Err(TheoryError::Invalid(m));
        if !(self.sigma >= 0.0) {
            return bad(format!("sigma {}", self.sigma));
        }
        if self.m.is_empty() || self.m.len() != self.alpha.len() || self.m.contains(&0) {
            return bad("one positive sample count per source weight".into());
        }
        if !(0.0..=1.0).contains(&self.epsilon) || !(0.0..=1.0).contains(&self.tau) {
            return bad("epsilon and tau must lie in [0, 1]".into());
        }
        if !(self.delta_u >= 0.0 && self.delta_v >= 0.0) {
            return bad("ledger totals must be non-negative".into());
        }
        if !(self.r_star >= 0.0 && self.r_star_rep >= 0.0) {
            return bad("ideal joint errors must be non-negative".into());
        }
        Ok(())
    }

    /// `Σ α_i²/m_i`.
    pub fn concentration(&self) -> f64 {
        self.alpha.iter().zip(&self.m).map(|(a, &m)| a * a / m as f64).sum()
    }

    fn inv(n: usize, what: &str) -> Result<f64, TheoryError> {
        if n == 0 {
            return Err(TheoryError::Invalid(format!("{what} must be at least 1 when its term is active")));
        }
        Ok(1.0 / n as f64)
    }
}

fn non_negative(vals: &[(&str, f64)]) -> Result<(), TheoryError> {
    for (n, v) in vals {
        if !(*v >= 0.0) {
            return Err(TheoryError::Invalid(format!("{n} = {v} must be non-negative")));
        }
    }
    Ok(())
}

/// Named additive terms and their sum.
#[derive(Clone, Debug, PartialEq)]
pub struct BoundTerms {
    pub terms: Vec<(String, f64)>,
    pub total: f64,
}

impl BoundTerms {
    fn from_terms(terms: Vec<(String, f64)>) -> Self {
        let total = terms.iter().map(|(_, v)| v).sum();
        Self { terms, total }
    }
}

/// Supervised gap: `σ√(2((1−ε)²/m_t + ε²Σα²/m)·I_uv) + σ√(2ε²(Σα²/m + 1/m_t)·I_u)`.
pub fn supervised_gap_bound(k: &BoundConstants, i_uv: f64, i_u: f64) -> Result<BoundTerms, TheoryError> {
    k.validate()?;
    non_negative(&[("I_uv", i_uv), ("I_u", i_u)])?;
    let (e, s, q) = (k.epsilon, k.sigma, k.concentration());
    let inv_t = BoundConstants::inv(k.m_t, "m_t")?;
    let a = s * (2.0 * ((1.0 - e).powi(2) * inv_t + e * e * q) * i_uv).sqrt();
    let b = s * (2.0 * e * e * (q + inv_t) * i_u).sqrt();
    Ok(BoundTerms::from_terms(vec![("joint_uv".into(), a), ("representation_u".into(), b)]))
}

/// Unsupervised gap: `√(2σ²(Σα²/m + 1/m_t′)·I_uv) + R*_rep + R*`.
pub fn unsupervised_gap_bound(k: &BoundConstants, i_uv: f64) -> Result<BoundTerms, TheoryError> {
    k.validate()?;
    non_negative(&[("I_uv", i_uv)])?;
    let inv_tp = BoundConstants::inv(k.m_t_prime, "m_t_prime")?;
    let a = (2.0 * k.sigma * k.sigma * (k.concentration() + inv_tp) * i_uv).sqrt();
    Ok(BoundTerms::from_terms(vec![
        ("joint_uv".into(), a),
        ("r_star_rep_user_supplied".into(), k.r_star_rep),
        ("r_star_user_supplied".into(), k.r_star),
    ]))
}

/// Empirical combined risk plus the five terms bounding the expected target risk.
#[derive(Clone, Debug, PartialEq)]
pub struct BoundReport {
    pub empirical: f64,
    pub terms: Vec<(String, f64)>,
    pub total: f64,
}

impl BoundReport {
    pub fn rows(&self) -> Vec<(String, f64)> {
        let mut rows = vec![("empirical_combined_risk".to_string(), self.empirical)];
        rows.extend(self.terms.iter().cloned());
        rows.push(("total".into(), self.total));
        rows
    }

    pub fn write_csv(&self, path: &Path) -> Result<(), TheoryError> {
        let err = |e: csv::Error| TheoryError::Csv(e.to_string());
        let mut w = csv::Writer::from_path(path).map_err(err)?;
        w.write_record(["term_name", "value"]).map_err(err)?;
        for (name, v) in self.rows() {
            w.write_record([name, v.to_string()]).map_err(err)?;
        }
        w.flush().map_err(|e| TheoryError::Csv(e.to_string()))
    }
}

/// The ledger-based bound. Terms whose `τ` or `1 − τ` factor is zero are
/// reported as exactly zero without touching the matching sample count.
pub fn ledger_bound(k: &BoundConstants, empirical: f64) -> Result<BoundReport, TheoryError> {
    k.validate()?;
    if !empirical.is_finite() {
        return Err(TheoryError::Invalid(format!("empirical risk {empirical}")));
    }
    let (e, t, s, q) = (k.epsilon, k.tau, k.sigma, k.concentration());
    let (du, dv) = (k.delta_u, k.delta_v);
    let (sup_uv, sup_u) = if t == 0.0 {
        (0.0, 0.0)
    } else {
        let inv_t = BoundConstants::inv(k.m_t, "m_t")?;
        (t * s * (2.0 * ((1.0 - e).powi(2) * inv_t + e * e * q) * (du + dv)).sqrt(), t * e * s * (2.0 * (q + inv_t) * du).sqrt())
    };
    let (rep, uns, star) = if t == 1.0 {
        (0.0, 0.0, 0.0)
    } else {
        let inv_tp = BoundConstants::inv(k.m_t_prime, "m_t_prime")?;
        ((1.0 - t) * k.r_star_rep, (1.0 - t) * s * (2.0 * (q + inv_tp) * (du + dv)).sqrt(), (1.0 - t) * k.r_star)
    };
    let terms = vec![
        ("supervised_uv".to_string(), sup_uv),
        ("supervised_u".to_string(), sup_u),
        ("r_star_rep_user_supplied".to_string(), rep),
        ("unsupervised_uv".to_string(), uns),
        ("r_star_user_supplied".to_string(), star),
    ];
    let total = empirical + terms.iter().map(|(_, v)| v).sum::<f64>();
    Ok(BoundReport { empirical, terms, total })
}
