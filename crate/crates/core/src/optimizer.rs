//! Langevin updates for `u` and `v`, plain ascent for `v′`, and the ledger of
//! accumulated squared gradient norms `δ_u`, `δ_v`.
//!
//! The ledger stores the realized `‖G‖²` of each step in place of its
//! expectation; `replay` recomputes both totals from the log.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand_distr::{Distribution, Normal};

use crate::diffcore::ParameterVector;
use crate::seeding::Rng;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum OptimError {
    #[error("gradient layout does not match the parameters")]
    Shape,
    #[error("non-finite gradient at coordinate {index}")]
    NonFinite { index: usize },
    #[error("the gradient-norm ledger is undefined without noise")]
    Noiseless,
    #[error("invalid optimizer setting: {0}")]
    Config(String),
    #[error("ledger csv: {0}")]
    Csv(String),
}

/// A per-step quantity: a constant or an explicit list (the last entry
/// repeats once the list is exhausted).
#[derive(Clone, Debug, PartialEq)]
pub enum Schedule {
    Constant(f64),
    List(Vec<f64>),
}

impl Schedule {
    /// Value for the 1-based step `k`.
    pub fn at(&self, k: usize) -> f64 {
        match self {
            Schedule::Constant(v) => *v,
            Schedule::List(vs) => vs[k.saturating_sub(1).min(vs.len() - 1)],
        }
    }

    fn all_positive(&self) -> bool {
        match self {
            Schedule::Constant(v) => *v > 0.0 && v.is_finite(),
            Schedule::List(vs) => !vs.is_empty() && vs.iter().all(|v| *v > 0.0 && v.is_finite()),
        }
    }
}

impl FromStr for Schedule {
    type Err = OptimError;

    /// `0.5` or a comma-separated list `0.5,0.4,0.3`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let vals: Vec<f64> = s
            .split(',')
            .map(|t| t.trim().parse::<f64>().map_err(|_| OptimError::Config(format!("bad number `{t}`"))))
            .collect::<Result<_, _>>()?;
        Ok(if vals.len() == 1 { Schedule::Constant(vals[0]) } else { Schedule::List(vals) })
    }
}

impl fmt::Display for Schedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Schedule::Constant(v) => write!(f, "{v}"),
            Schedule::List(vs) => {
                let parts: Vec<String> = vs.iter().map(f64::to_string).collect();
                f.write_str(&parts.join(","))
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SgldConfig {
    pub eta_u: Schedule,
    pub eta_v: Schedule,
    /// Ascent rate of the duplicate predictor.
    pub eta_dup: Schedule,
    pub sigma: Schedule,
    pub noiseless: bool,
}

impl Default for SgldConfig {
    fn default() -> Self {
        Self {
            eta_u: Schedule::Constant(0.5),
            eta_v: Schedule::Constant(0.5),
            eta_dup: Schedule::Constant(0.5),
            sigma: Schedule::Constant(1e-3),
            noiseless: false,
        }
    }
}

impl SgldConfig {
    pub fn validate(&self) -> Result<(), OptimError> {
        for (name, s) in [("eta_u", &self.eta_u), ("eta_v", &self.eta_v), ("eta_dup", &self.eta_dup)] {
            if !s.all_positive() {
                return Err(OptimError::Config(format!("{name} must be positive")));
            }
        }
        if !self.noiseless && !self.sigma.all_positive() {
            return Err(OptimError::Config("sigma must be positive unless noiseless".into()));
        }
        Ok(())
    }

    /// `σ_k`, or `None` in noiseless mode.
    pub fn sigma_at(&self, k: usize) -> Option<f64> {
        (!self.noiseless).then(|| self.sigma.at(k))
    }
}

fn check_gradient(params: &ParameterVector, gradient: &ParameterVector) -> Result<(), OptimError> {
    if !params.same_layout(gradient) {
        return Err(OptimError::Shape);
    }
    if let Some(index) = gradient.first_non_finite() {
        return Err(OptimError::NonFinite { index });
    }
    Ok(())
}

/// `params − η·gradient + ξ` with `ξ ~ N(0, σ² I)`; `sigma = None` omits `ξ`.
pub fn sgld_step(
    params: &ParameterVector,
    gradient: &ParameterVector,
    eta: f64,
    sigma: Option<f64>,
    rng: &mut Rng,
) -> Result<ParameterVector, OptimError> {
    check_gradient(params, gradient)?;
    let mut out = params.clone();
    for (p, g) in out.values_mut().iter_mut().zip(gradient.values()) {
        *p -= eta * g;
    }
    if let Some(s) = sigma {
        let noise = Normal::new(0.0, s).map_err(|e| OptimError::Config(e.to_string()))?;
        for p in out.values_mut() {
            *p += noise.sample(rng);
        }
    }
    Ok(out)
}

/// `params + η·gradient`: no noise and no ledger entry.
pub fn duplicate_ascent_step(
    params: &ParameterVector,
    gradient: &ParameterVector,
    eta: f64,
) -> Result<ParameterVector, OptimError> {
    check_gradient(params, gradient)?;
    let mut out = params.clone();
    for (p, g) in out.values_mut().iter_mut().zip(gradient.values()) {
        *p += eta * g;
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Block {
    U,
    V,
}

impl fmt::Display for Block {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Block::U => "u",
            Block::V => "v",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LedgerEntry {
    pub step: usize,
    pub block: Block,
    pub eta: f64,
    pub sigma: f64,
    pub grad_sq_norm: f64,
    pub delta_after: f64,
}

fn increment(eta: f64, sigma: f64, grad_sq_norm: f64) -> f64 {
    eta * eta * grad_sq_norm / (2.0 * sigma * sigma)
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradNormLedger {
    pub delta_u: f64,
    pub delta_v: f64,
    pub log: Vec<LedgerEntry>,
}

impl GradNormLedger {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds `η²‖G‖²/(2σ²)` to the block's total. `sigma = None` (noiseless) is an error.
    pub fn accumulate(
        &mut self,
        step: usize,
        block: Block,
        eta: f64,
        sigma: Option<f64>,
        grad_sq_norm: f64,
    ) -> Result<f64, OptimError> {
        let sigma = sigma.ok_or(OptimError::Noiseless)?;
        if !(sigma > 0.0) {
            return Err(OptimError::Config("sigma must be positive".into()));
        }
        if !grad_sq_norm.is_finite() || grad_sq_norm < 0.0 {
            return Err(OptimError::NonFinite { index: 0 });
        }
        let inc = increment(eta, sigma, grad_sq_norm);
        let slot = match block {
            Block::U => &mut self.delta_u,
            Block::V => &mut self.delta_v,
        };
        *slot += inc;
        self.log.push(LedgerEntry { step, block, eta, sigma, grad_sq_norm, delta_after: *slot });
        Ok(inc)
    }

    /// Recomputes `(δ_u, δ_v)` from a log in order.
    pub fn replay(log: &[LedgerEntry]) -> (f64, f64) {
        let (mut du, mut dv) = (0.0, 0.0);
        for e in log {
            let inc = increment(e.eta, e.sigma, e.grad_sq_norm);
            match e.block {
                Block::U => du += inc,
                Block::V => dv += inc,
            }
        }
        (du, dv)
    }

    pub fn write_csv(&self, path: &Path) -> Result<(), OptimError> {
        let err = |e: csv::Error| OptimError::Csv(e.to_string());
        let mut w = csv::Writer::from_path(path).map_err(err)?;
        w.write_record(["step", "block", "eta", "sigma", "grad_sq_norm", "delta_after"]).map_err(err)?;
        for e in &self.log {
            w.write_record([
                e.step.to_string(),
                e.block.to_string(),
                e.eta.to_string(),
                e.sigma.to_string(),
                e.grad_sq_norm.to_string(),
                e.delta_after.to_string(),
            ])
            .map_err(err)?;
        }
        w.flush().map_err(|e| OptimError::Csv(e.to_string()))
    }

    /// Reads a log written by [`GradNormLedger::write_csv`].
    pub fn read_csv(path: &Path) -> Result<Vec<LedgerEntry>, OptimError> {
        let mut r = csv::Reader::from_path(path).map_err(|e| OptimError::Csv(e.to_string()))?;
        let mut out = Vec::new();
        for rec in r.records() {
            let rec = rec.map_err(|e| OptimError::Csv(e.to_string()))?;
            let line = rec.position().map_or(0, |p| p.line());
            let bad = |what: &str| OptimError::Csv(format!("line {line}: bad {what}"));
            let num = |i: usize, what: &str| rec.get(i).and_then(|s| s.parse::<f64>().ok()).ok_or_else(|| bad(what));
            let block = match rec.get(1) {
                Some("u") => Block::U,
                Some("v") => Block::V,
                _ => return Err(bad("block")),
            };
            out.push(LedgerEntry {
                step: rec.get(0).and_then(|s| s.parse().ok()).ok_or_else(|| bad("step"))?,
                block,
                eta: num(2, "eta")?,
                sigma: num(3, "sigma")?,
                grad_sq_norm: num(4, "grad_sq_norm")?,
                delta_after: num(5, "delta_after")?,
            });
        }
        Ok(out)
    }
}
