//! Empirical risks, dual Wasserstein-1 estimates and the two gradient penalties.
//!
//! Every risk is assembled on a [`Graph`] generic over the tape scalar, so the
//! same builder yields values, first-order gradients (`f64`) and
//! Hessian-vector products (`Dual`). The critic maximisation is not done here:
//! a call reports the critic value at the current duplicate parameters and the
//! training loop owns the ascent.

use rand::Rng as _;

use crate::data::{LabeledBatch, Targets};
use crate::diffcore::{DenseMatrix, Dual, Graph, GraphError, Matrix, NodeId, ParameterVector, Scalar};
use crate::models::{Architecture, MlpSpec, ModelError, ModelTriple, Task};
use crate::seeding::Rng;

const SIMPLEX_TOL: f64 = 1e-9;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum RiskError {
    #[error("empty {0} batch")]
    EmptyBatch(&'static str),
    #[error("domain weights are not on the simplex: {0:?}")]
    AlphaOffSimplex(Vec<f64>),
    #[error("expected {expected} source batches, got {got}")]
    SourceCount { expected: usize, got: usize },
    #[error("missing {0} batch for a term with non-zero weight")]
    MissingBatch(&'static str),
    #[error("invalid objective weights: {0}")]
    Weights(String),
    #[error("feature widths differ: {0} vs {1}")]
    Width(usize, usize),
    #[error("{0}")]
    Unsupported(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Graph(#[from] GraphError),
}

/// Checks that `alpha` lies on the probability simplex (to 1e-9).
pub fn check_simplex(alpha: &[f64]) -> Result<(), RiskError> {
    let sum: f64 = alpha.iter().sum();
    if alpha.is_empty() || alpha.iter().any(|&a| !(a >= -SIMPLEX_TOL)) || (sum - 1.0).abs() > SIMPLEX_TOL {
        return Err(RiskError::AlphaOffSimplex(alpha.to_vec()));
    }
    Ok(())
}

/// Unlabeled target inputs with pseudo labels from both predictors.
#[derive(Clone, Debug, PartialEq)]
pub struct PseudoBatch {
    pub x: DenseMatrix,
    /// `argmax h(v, g(u, x))`.
    pub labels: Vec<usize>,
    /// `argmax h(v′, g(u, x))`.
    pub dup_labels: Vec<usize>,
}

impl PseudoBatch {
    /// Labels from the current parameters, dropout off, ties to the lowest class.
    pub fn new(model: &ModelTriple, x: &DenseMatrix) -> Result<Self, RiskError> {
        if x.rows() == 0 {
            return Err(RiskError::EmptyBatch("unlabeled target"));
        }
        if model.arch.n_classes().is_none() {
            return Err(RiskError::Unsupported("pseudo labels need a classification model".into()));
        }
        let feats = model.represent(x)?;
        let labels = model.predict_with(&model.pred, &feats)?.row_argmax();
        let dup_labels = model.predict_with(&model.dup, &feats)?.row_argmax();
        Ok(Self { x: x.clone(), labels, dup_labels })
    }
}

/// Per-step batches. `target` is the labeled target batch, `unlabeled` the
/// target inputs used through pseudo labels.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct StepBatches {
    pub target: Option<LabeledBatch>,
    pub unlabeled: Option<PseudoBatch>,
    pub sources: Vec<LabeledBatch>,
}

/// Mixing weights of the unified objective.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ObjectiveWeights {
    pub epsilon: f64,
    pub tau: f64,
    /// Multiplier on the supervised Wasserstein term.
    pub w1_sup_coef: f64,
    pub coef1: f64,
    pub coef2: f64,
}

impl Default for ObjectiveWeights {
    fn default() -> Self {
        Self { epsilon: 0.5, tau: 1.0, w1_sup_coef: 0.01, coef1: 0.06, coef2: 1.2 }
    }
}

impl ObjectiveWeights {
    pub fn validate(&self) -> Result<(), RiskError> {
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        if !unit(self.epsilon) || !unit(self.tau) {
            return Err(RiskError::Weights(format!("epsilon {} and tau {} must lie in [0, 1]", self.epsilon, self.tau)));
        }
        if !(self.w1_sup_coef >= 0.0 && self.coef1 >= 0.0 && self.coef2 >= 0.0) {
            return Err(RiskError::Weights("penalty coefficients must be non-negative".into()));
        }
        Ok(())
    }

    /// Coefficient on each atomic term after expanding both dual estimates.
    pub fn expand(&self) -> TermCoefficients {
        let (e, t) = (self.epsilon, self.tau);
        let sup = t * e * self.w1_sup_coef;
        TermCoefficients {
            target_pred: t * (1.0 - e),
            sources_pred: t * e,
            target_dup: sup,
            sources_dup: -(sup + (1.0 - t)),
            pseudo_dup: (1.0 - t) * self.coef1,
            pseudo_pred: (1.0 - t) * self.coef2,
        }
    }
}

/// Coefficients of the six atomic risks making up the unified objective.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TermCoefficients {
    /// `R_T(u, v)`.
    pub target_pred: f64,
    /// `R_S^α(u, v)`.
    pub sources_pred: f64,
    /// `R_T(u, v′)`.
    pub target_dup: f64,
    /// `R_S^α(u, v′)`.
    pub sources_dup: f64,
    /// `ℓ(h(v′, g(u, x)), Ŷ)` on unlabeled target inputs.
    pub pseudo_dup: f64,
    /// `ℓ(h(v, g(u, x)), Ŷ′)` on unlabeled target inputs.
    pub pseudo_pred: f64,
}

/// Every quantity of the unified objective at one set of parameters.
/// Terms whose batch was not supplied are `None`.
#[derive(Clone, Debug, PartialEq)]
pub struct RiskBreakdown {
    pub target_risk: Option<f64>,
    pub per_source_risks: Vec<f64>,
    pub combined_source_risk: f64,
    pub w1_supervised: Option<f64>,
    pub w1_pseudo: Option<f64>,
    pub combined: f64,
    pub weights: ObjectiveWeights,
}

impl RiskBreakdown {
    /// `τ(1−ε)R_T + τεR_S^α + τε·w·W_sup + (1−τ)W_pseudo`, with zero-weight
    /// terms contributing nothing even when absent.
    pub fn reassemble(
        weights: &ObjectiveWeights,
        target: Option<f64>,
        sources: f64,
        w_sup: Option<f64>,
        w_pseudo: Option<f64>,
    ) -> f64 {
        let w = weights;
        let term = |c: f64, v: Option<f64>| if c == 0.0 { 0.0 } else { c * v.unwrap_or(f64::NAN) };
        term(w.tau * (1.0 - w.epsilon), target)
            + term(w.tau * w.epsilon, Some(sources))
            + term(w.tau * w.epsilon * w.w1_sup_coef, w_sup)
            + term(1.0 - w.tau, w_pseudo)
    }

    pub fn recombine(&self) -> f64 {
        Self::reassemble(&self.weights, self.target_risk, self.combined_source_risk, self.w1_supervised, self.w1_pseudo)
    }
}

/// Dropout masks for one step: one mask list per representation pass.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct StepMasks {
    pub target: Option<Vec<DenseMatrix>>,
    pub unlabeled: Option<Vec<DenseMatrix>>,
    pub sources: Vec<Option<Vec<DenseMatrix>>>,
}

/// Parameter nodes of the three networks inside one graph.
pub(crate) struct Nets<'a> {
    arch: &'a Architecture,
    rep: Vec<NodeId>,
    pred: Vec<NodeId>,
    dup: Vec<NodeId>,
}

#[derive(Clone, Copy)]
enum Head {
    Pred,
    Dup,
}

impl<'a> Nets<'a> {
    fn register<S: Scalar>(g: &mut Graph<S>, arch: &'a Architecture, mats: [Vec<Matrix<S>>; 3]) -> Self {
        let [r, p, d] = mats;
        let rep = arch.representation.param_nodes(g, r);
        let pred = arch.predictor.param_nodes(g, p);
        let dup = arch.predictor.param_nodes(g, d);
        Self { arch, rep, pred, dup }
    }

    fn features<S: Scalar>(&self, g: &mut Graph<S>, x: &DenseMatrix, masks: Option<&[DenseMatrix]>) -> Result<NodeId, RiskError> {
        let want = self.arch.representation.input_width();
        if x.cols() != want {
            return Err(ModelError::Dimension { expected: want, got: x.cols() }.into());
        }
        let xin = g.constant(Matrix::from_real(x));
        Ok(self.arch.representation.apply(g, xin, &self.rep, masks))
    }

    fn head<S: Scalar>(&self, g: &mut Graph<S>, feats: NodeId, which: Head) -> NodeId {
        let params = match which {
            Head::Pred => &self.pred,
            Head::Dup => &self.dup,
        };
        self.arch.predict_node(g, feats, params)
    }

    fn loss<S: Scalar>(&self, g: &mut Graph<S>, out: NodeId, y: &Targets) -> Result<NodeId, RiskError> {
        match (self.arch.task, y) {
            (Task::Classification { .. }, Targets::Classes(labels)) => Ok(g.nll(out, labels.clone())),
            (Task::Regression, Targets::Values(vals)) => {
                let yv = g.constant(Matrix::from_real(&DenseMatrix::new(vals.len(), 1, vals.clone())?));
                let diff = g.sub(out, yv);
                let a = g.abs(diff);
                Ok(g.mean(a))
            }
            _ => Err(RiskError::Unsupported("label kind does not match the model task".into())),
        }
    }
}

fn check_batch(b: &LabeledBatch, what: &'static str) -> Result<(), RiskError> {
    if b.is_empty() {
        return Err(RiskError::EmptyBatch(what));
    }
    if b.y.len() != b.x.rows() {
        return Err(RiskError::Unsupported(format!("{what} batch has {} rows but {} labels", b.x.rows(), b.y.len())));
    }
    Ok(())
}

fn check_sources(sources: &[LabeledBatch], alpha: &[f64]) -> Result<(), RiskError> {
    check_simplex(alpha)?;
    if sources.len() != alpha.len() {
        return Err(RiskError::SourceCount { expected: alpha.len(), got: sources.len() });
    }
    sources.iter().try_for_each(|b| check_batch(b, "source"))
}

/// Scalar risk nodes of the forward-only evaluation graph.
struct EvalNodes {
    target_pred: Option<NodeId>,
    target_dup: Option<NodeId>,
    sources_pred: Vec<NodeId>,
    sources_dup: Vec<NodeId>,
    pseudo_dup: Option<NodeId>,
    pseudo_pred: Option<NodeId>,
}

fn scalar(g: &Graph<f64>, id: NodeId) -> f64 {
    g.value(id).expect("forward ran").values()[0]
}

fn model_mats<S: Scalar>(m: &ModelTriple) -> [Vec<Matrix<S>>; 3] {
    [m.rep.matrices(), m.pred.matrices(), m.dup.matrices()]
}

/// Evaluates every atomic risk that has data, dropout off.
fn evaluate_terms(model: &ModelTriple, batches: &StepBatches) -> Result<(Graph<f64>, EvalNodes), RiskError> {
    model.validate()?;
    let mut g = Graph::new();
    let nets = Nets::register(&mut g, &model.arch, model_mats(model));
    let mut nodes = EvalNodes {
        target_pred: None,
        target_dup: None,
        sources_pred: vec![],
        sources_dup: vec![],
        pseudo_dup: None,
        pseudo_pred: None,
    };
    if let Some(t) = &batches.target {
        check_batch(t, "target")?;
        let f = nets.features(&mut g, &t.x, None)?;
        let hp = nets.head(&mut g, f, Head::Pred);
        nodes.target_pred = Some(nets.loss(&mut g, hp, &t.y)?);
        let hd = nets.head(&mut g, f, Head::Dup);
        nodes.target_dup = Some(nets.loss(&mut g, hd, &t.y)?);
    }
    for s in &batches.sources {
        check_batch(s, "source")?;
        let f = nets.features(&mut g, &s.x, None)?;
        let hp = nets.head(&mut g, f, Head::Pred);
        nodes.sources_pred.push(nets.loss(&mut g, hp, &s.y)?);
        let hd = nets.head(&mut g, f, Head::Dup);
        nodes.sources_dup.push(nets.loss(&mut g, hd, &s.y)?);
    }
    if let Some(p) = &batches.unlabeled {
        let f = nets.features(&mut g, &p.x, None)?;
        let hd = nets.head(&mut g, f, Head::Dup);
        nodes.pseudo_dup = Some(nets.loss(&mut g, hd, &Targets::Classes(p.labels.clone()))?);
        let hp = nets.head(&mut g, f, Head::Pred);
        nodes.pseudo_pred = Some(nets.loss(&mut g, hp, &Targets::Classes(p.dup_labels.clone()))?);
    }
    if !g.is_empty() {
        // Every node is a function of constants and parameters, so nothing to bind.
        g.forward(&[])?;
    }
    Ok((g, nodes))
}

/// Mean loss of `h(v, g(u, x))` over a labeled target batch.
pub fn empirical_risk_target(model: &ModelTriple, batch: &LabeledBatch) -> Result<f64, RiskError> {
    check_batch(batch, "target")?;
    let b = StepBatches { target: Some(batch.clone()), ..Default::default() };
    let (g, n) = evaluate_terms(model, &b)?;
    Ok(scalar(&g, n.target_pred.expect("target supplied")))
}

/// `(Σ α_i r_i, [r_i])` with `r_i` the unweighted mean loss of `h(v, g(u, ·))` on source `i`.
pub fn empirical_risk_sources(
    model: &ModelTriple,
    sources: &[LabeledBatch],
    alpha: &[f64],
) -> Result<(f64, Vec<f64>), RiskError> {
    check_sources(sources, alpha)?;
    let b = StepBatches { sources: sources.to_vec(), ..Default::default() };
    let (g, n) = evaluate_terms(model, &b)?;
    let per: Vec<f64> = n.sources_pred.iter().map(|&id| scalar(&g, id)).collect();
    Ok((weighted(alpha, &per), per))
}

fn weighted(alpha: &[f64], r: &[f64]) -> f64 {
    alpha.iter().zip(r).map(|(a, r)| a * r).sum()
}

/// `coef1·ℓ(h(v′, g(u,x)), Ŷ) + coef2·ℓ(h(v, g(u,x)), Ŷ′)` averaged over the batch.
pub fn pseudo_label_risk(model: &ModelTriple, batch: &PseudoBatch, coef1: f64, coef2: f64) -> Result<f64, RiskError> {
    if !(coef1 >= 0.0 && coef2 >= 0.0) {
        return Err(RiskError::Weights("pseudo-label coefficients must be non-negative".into()));
    }
    if batch.x.rows() == 0 {
        return Err(RiskError::EmptyBatch("unlabeled target"));
    }
    let b = StepBatches { unlabeled: Some(batch.clone()), ..Default::default() };
    let (g, n) = evaluate_terms(model, &b)?;
    let a = if coef1 == 0.0 { 0.0 } else { coef1 * scalar(&g, n.pseudo_dup.expect("supplied")) };
    let c = if coef2 == 0.0 { 0.0 } else { coef2 * scalar(&g, n.pseudo_pred.expect("supplied")) };
    Ok(a + c)
}

/// Current critic value `R_T(u, v′) − R_S^α(u, v′)`.
pub fn w1_dual_supervised(
    model: &ModelTriple,
    target: &LabeledBatch,
    sources: &[LabeledBatch],
    alpha: &[f64],
) -> Result<f64, RiskError> {
    check_batch(target, "target")?;
    check_sources(sources, alpha)?;
    let b = StepBatches { target: Some(target.clone()), sources: sources.to_vec(), ..Default::default() };
    let (g, n) = evaluate_terms(model, &b)?;
    let src: Vec<f64> = n.sources_dup.iter().map(|&id| scalar(&g, id)).collect();
    Ok(scalar(&g, n.target_dup.expect("supplied")) - weighted(alpha, &src))
}

/// Current critic value `R_pseudo(u, v, v′) − R_S^α(u, v′)`.
pub fn w1_dual_pseudo(
    model: &ModelTriple,
    unlabeled: &PseudoBatch,
    sources: &[LabeledBatch],
    alpha: &[f64],
    coef1: f64,
    coef2: f64,
) -> Result<f64, RiskError> {
    check_sources(sources, alpha)?;
    let pseudo = pseudo_label_risk(model, unlabeled, coef1, coef2)?;
    let b = StepBatches { sources: sources.to_vec(), ..Default::default() };
    let (g, n) = evaluate_terms(model, &b)?;
    let src: Vec<f64> = n.sources_dup.iter().map(|&id| scalar(&g, id)).collect();
    Ok(pseudo - weighted(alpha, &src))
}

/// Evaluates the unified objective and all of its parts.
pub fn combined_objective(
    model: &ModelTriple,
    batches: &StepBatches,
    alpha: &[f64],
    weights: &ObjectiveWeights,
) -> Result<RiskBreakdown, RiskError> {
    weights.validate()?;
    check_sources(&batches.sources, alpha)?;
    let c = weights.expand();
    if c.target_pred != 0.0 && batches.target.is_none() {
        return Err(RiskError::MissingBatch("labeled target"));
    }
    if (c.pseudo_dup != 0.0 || c.pseudo_pred != 0.0) && batches.unlabeled.is_none() {
        return Err(RiskError::MissingBatch("unlabeled target"));
    }
    let (g, n) = evaluate_terms(model, batches)?;
    let per: Vec<f64> = n.sources_pred.iter().map(|&id| scalar(&g, id)).collect();
    let per_dup: Vec<f64> = n.sources_dup.iter().map(|&id| scalar(&g, id)).collect();
    let src = weighted(alpha, &per);
    let src_dup = weighted(alpha, &per_dup);
    let target_risk = n.target_pred.map(|id| scalar(&g, id));
    let w1_supervised = n.target_dup.map(|id| scalar(&g, id) - src_dup);
    let w1_pseudo = match (n.pseudo_dup, n.pseudo_pred) {
        (Some(a), Some(b)) => {
            let pa = if weights.coef1 == 0.0 { 0.0 } else { weights.coef1 * scalar(&g, a) };
            let pb = if weights.coef2 == 0.0 { 0.0 } else { weights.coef2 * scalar(&g, b) };
            Some(pa + pb - src_dup)
        }
        _ => None,
    };
    let combined = RiskBreakdown::reassemble(weights, target_risk, src, w1_supervised, w1_pseudo);
    Ok(RiskBreakdown {
        target_risk,
        per_source_risks: per,
        combined_source_risk: src,
        w1_supervised,
        w1_pseudo,
        combined,
        weights: *weights,
    })
}

/// The unified objective as a single differentiable graph. Terms with a zero
/// coefficient (including sources with `α_i = 0`) are never built, so their
/// batches are never read.
pub struct ObjectiveGraph<S> {
    pub graph: Graph<S>,
    pub output: NodeId,
    rep: Vec<NodeId>,
    pred: Vec<NodeId>,
    dup: Vec<NodeId>,
}

/// Gradients of the objective split by parameter block.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockGradients {
    pub rep: ParameterVector,
    pub pred: ParameterVector,
    pub dup: ParameterVector,
}

impl<S: Scalar> ObjectiveGraph<S> {
    pub fn build(
        arch: &Architecture,
        mats: [Vec<Matrix<S>>; 3],
        batches: &StepBatches,
        alpha: &[f64],
        weights: &ObjectiveWeights,
        masks: Option<&StepMasks>,
    ) -> Result<Self, RiskError> {
        weights.validate()?;
        check_simplex(alpha)?;
        if batches.sources.len() != alpha.len() {
            return Err(RiskError::SourceCount { expected: alpha.len(), got: batches.sources.len() });
        }
        let c = weights.expand();
        let mut g = Graph::new();
        let nets = Nets::register(&mut g, arch, mats);
        let mut terms: Vec<(f64, NodeId)> = Vec::new();

        if c.target_pred != 0.0 || c.target_dup != 0.0 {
            let t = batches.target.as_ref().ok_or(RiskError::MissingBatch("labeled target"))?;
            check_batch(t, "target")?;
            let m = masks.and_then(|m| m.target.as_deref());
            let f = nets.features(&mut g, &t.x, m)?;
            if c.target_pred != 0.0 {
                let h = nets.head(&mut g, f, Head::Pred);
                terms.push((c.target_pred, nets.loss(&mut g, h, &t.y)?));
            }
            if c.target_dup != 0.0 {
                let h = nets.head(&mut g, f, Head::Dup);
                terms.push((c.target_dup, nets.loss(&mut g, h, &t.y)?));
            }
        }
        for (i, (s, &a)) in batches.sources.iter().zip(alpha).enumerate() {
            let (wp, wd) = (a * c.sources_pred, a * c.sources_dup);
            if wp == 0.0 && wd == 0.0 {
                continue;
            }
            check_batch(s, "source")?;
            let m = masks.and_then(|m| m.sources.get(i)).and_then(|m| m.as_deref());
            let f = nets.features(&mut g, &s.x, m)?;
            if wp != 0.0 {
                let h = nets.head(&mut g, f, Head::Pred);
                terms.push((wp, nets.loss(&mut g, h, &s.y)?));
            }
            if wd != 0.0 {
                let h = nets.head(&mut g, f, Head::Dup);
                terms.push((wd, nets.loss(&mut g, h, &s.y)?));
            }
        }
        if c.pseudo_dup != 0.0 || c.pseudo_pred != 0.0 {
            let p = batches.unlabeled.as_ref().ok_or(RiskError::MissingBatch("unlabeled target"))?;
            if p.x.rows() == 0 {
                return Err(RiskError::EmptyBatch("unlabeled target"));
            }
            let m = masks.and_then(|m| m.unlabeled.as_deref());
            let f = nets.features(&mut g, &p.x, m)?;
            if c.pseudo_dup != 0.0 {
                let h = nets.head(&mut g, f, Head::Dup);
                terms.push((c.pseudo_dup, nets.loss(&mut g, h, &Targets::Classes(p.labels.clone()))?));
            }
            if c.pseudo_pred != 0.0 {
                let h = nets.head(&mut g, f, Head::Pred);
                terms.push((c.pseudo_pred, nets.loss(&mut g, h, &Targets::Classes(p.dup_labels.clone()))?));
            }
        }
        let output = match g.weighted_sum(&terms) {
            Some(o) => o,
            None => g.constant(Matrix::zeros(1, 1)),
        };
        let Nets { rep, pred, dup, .. } = nets;
        Ok(Self { graph: g, output, rep, pred, dup })
    }

    /// Forward then backward with a unit seed; returns the objective value.
    fn run(&mut self) -> Result<S, RiskError> {
        self.graph.forward(&[])?;
        let v = self.graph.value(self.output).expect("forward ran").values()[0];
        self.graph.backward(self.output, &Matrix::filled(1, 1, S::one()))?;
        Ok(v)
    }
}

impl ObjectiveGraph<f64> {
    fn block_gradients(&self) -> Result<BlockGradients, RiskError> {
        Ok(BlockGradients {
            rep: self.graph.block_gradient(&self.rep)?,
            pred: self.graph.block_gradient(&self.pred)?,
            dup: self.graph.block_gradient(&self.dup)?,
        })
    }
}

/// Value and gradient of the unified objective with respect to `u`, `v`, `v′`.
pub fn objective_gradients(
    model: &ModelTriple,
    batches: &StepBatches,
    alpha: &[f64],
    weights: &ObjectiveWeights,
    masks: Option<&StepMasks>,
) -> Result<(f64, BlockGradients), RiskError> {
    let mut og = ObjectiveGraph::build(&model.arch, model_mats(model), batches, alpha, weights, masks)?;
    let v = og.run()?;
    Ok((v, og.block_gradients()?))
}

/// Hessian of the objective applied to the tangent `(t_u, t_v, t_v′)`, by a
/// forward-over-reverse pass on dual numbers.
pub fn objective_hvp(
    model: &ModelTriple,
    batches: &StepBatches,
    alpha: &[f64],
    weights: &ObjectiveWeights,
    masks: Option<&StepMasks>,
    tangent: &BlockGradients,
) -> Result<BlockGradients, RiskError> {
    let mats = [
        model.rep.dual_matrices(&tangent.rep)?,
        model.pred.dual_matrices(&tangent.pred)?,
        model.dup.dual_matrices(&tangent.dup)?,
    ];
    let mut og = ObjectiveGraph::<Dual>::build(&model.arch, mats, batches, alpha, weights, masks)?;
    og.run()?;
    let g = &og.graph;
    Ok(BlockGradients {
        rep: ParameterVector::tangent_of(&g.gradients(&og.rep)?),
        pred: ParameterVector::tangent_of(&g.gradients(&og.pred)?),
        dup: ParameterVector::tangent_of(&g.gradients(&og.dup)?),
    })
}

/// Gradients of `R + λ(‖∇_u R‖² + ‖∇_v R‖²)` for `u` and `v`, and the plain
/// `∇_{v′} R` for the duplicate. Returns `(R, λ·(‖∇_u R‖² + ‖∇_v R‖²), gradients)`.
pub fn penalized_gradients(
    model: &ModelTriple,
    batches: &StepBatches,
    alpha: &[f64],
    weights: &ObjectiveWeights,
    masks: Option<&StepMasks>,
    lambda_gn: f64,
) -> Result<(f64, f64, BlockGradients), RiskError> {
    let (value, grads) = objective_gradients(model, batches, alpha, weights, masks)?;
    if lambda_gn == 0.0 {
        return Ok((value, 0.0, grads));
    }
    let penalty = lambda_gn * (gradient_penalty_param(&grads.rep) + gradient_penalty_param(&grads.pred));
    let tangent =
        BlockGradients { rep: grads.rep.clone(), pred: grads.pred.clone(), dup: ParameterVector::zeros_like(&grads.dup) };
    let hv = objective_hvp(model, batches, alpha, weights, masks, &tangent)?;
    let mut out = grads;
    out.rep.axpy(2.0 * lambda_gn, &hv.rep)?;
    out.pred.axpy(2.0 * lambda_gn, &hv.pred)?;
    Ok((value, penalty, out))
}

/// Squared Euclidean norm of a parameter gradient.
pub fn gradient_penalty_param(gradient: &ParameterVector) -> f64 {
    gradient.squared_norm()
}

/// One `λ ~ Unif[0, 1]` per interpolation pair.
pub fn draw_lambdas(n: usize, rng: &mut Rng) -> Vec<f64> {
    (0..n).map(|_| rng.random::<f64>()).collect()
}

/// Rows `λ_i·T[i mod n_T] + (1−λ_i)·S[i mod n_S]` for `i < lambdas.len()`.
pub fn interpolate(t: &DenseMatrix, s: &DenseMatrix, lambdas: &[f64]) -> Result<DenseMatrix, RiskError> {
    if t.cols() != s.cols() {
        return Err(RiskError::Width(t.cols(), s.cols()));
    }
    if t.rows() == 0 || s.rows() == 0 {
        return Err(RiskError::EmptyBatch("interpolation"));
    }
    let mut vals = Vec::with_capacity(lambdas.len() * t.cols());
    for (i, &l) in lambdas.iter().enumerate() {
        let (a, b) = (t.row(i % t.rows()), s.row(i % s.rows()));
        vals.extend(a.iter().zip(b).map(|(x, y)| l * x + (1.0 - l) * y));
    }
    Ok(DenseMatrix::new(lambdas.len(), t.cols(), vals)?)
}

/// Number of interpolation pairs for two batches.
pub fn pair_count(t: &DenseMatrix, s: &DenseMatrix) -> usize {
    t.rows().max(s.rows())
}

fn column_seed<S: Scalar>(rows: usize, cols: usize, c: usize) -> Matrix<S> {
    let mut m = Matrix::zeros(rows, cols);
    for r in 0..rows {
        m.set(r, c, S::one());
    }
    m
}

/// Input gradients `∇_x h_c(x_i)` of every raw output column `c`, one matrix per column.
fn input_jacobian_rows(spec: &MlpSpec, params: &ParameterVector, x: &DenseMatrix) -> Result<Vec<DenseMatrix>, RiskError> {
    spec.check_params(params)?;
    let mut g = Graph::new();
    let xin = g.input();
    let nodes = spec.param_nodes(&mut g, params.matrices());
    let out = spec.apply(&mut g, xin, &nodes, None);
    g.forward(&[(xin, x.clone())])?;
    (0..spec.output_width())
        .map(|c| {
            g.backward(out, &column_seed(x.rows(), spec.output_width(), c))?;
            Ok(g.adjoint_or_zero(xin)?)
        })
        .collect()
}

/// Mean squared Frobenius norm of the input Jacobian of the raw critic
/// output `h(v′, ·)` at the interpolates.
pub fn gradient_penalty_interp_with(
    spec: &MlpSpec,
    dup: &ParameterVector,
    t: &DenseMatrix,
    s: &DenseMatrix,
    lambdas: &[f64],
) -> Result<f64, RiskError> {
    let x = interpolate(t, s, lambdas)?;
    if x.cols() != spec.input_width() {
        return Err(ModelError::Dimension { expected: spec.input_width(), got: x.cols() }.into());
    }
    if x.rows() == 0 {
        return Ok(0.0);
    }
    let jac = input_jacobian_rows(spec, dup, &x)?;
    Ok(jac.iter().map(DenseMatrix::frobenius_sq).sum::<f64>() / x.rows() as f64)
}

/// The interpolation penalty with `λ` drawn from `rng`.
pub fn gradient_penalty_interp(
    spec: &MlpSpec,
    dup: &ParameterVector,
    t: &DenseMatrix,
    s: &DenseMatrix,
    rng: &mut Rng,
) -> Result<f64, RiskError> {
    let lambdas = draw_lambdas(pair_count(t, s), rng);
    gradient_penalty_interp_with(spec, dup, t, s, &lambdas)
}

/// Value and `v′`-gradient of the interpolation penalty. The gradient uses
/// `∇_θ ‖∇_x h_c‖² = 2·(∂²h_c/∂θ∂x)·∇_x h_c`, evaluated by seeding the dual
/// part of the input with the (fixed) input gradient.
pub fn gradient_penalty_interp_grad(
    spec: &MlpSpec,
    dup: &ParameterVector,
    t: &DenseMatrix,
    s: &DenseMatrix,
    lambdas: &[f64],
) -> Result<(f64, ParameterVector), RiskError> {
    let x = interpolate(t, s, lambdas)?;
    if x.cols() != spec.input_width() {
        return Err(ModelError::Dimension { expected: spec.input_width(), got: x.cols() }.into());
    }
    let n = x.rows();
    let mut grad = ParameterVector::zeros_like(dup);
    if n == 0 {
        return Ok((0.0, grad));
    }
    let jac = input_jacobian_rows(spec, dup, &x)?;
    let value = jac.iter().map(DenseMatrix::frobenius_sq).sum::<f64>() / n as f64;

    let mut g: Graph<Dual> = Graph::new();
    let xin = g.input();
    let nodes = spec.param_nodes(&mut g, dup.matrices());
    let out = spec.apply(&mut g, xin, &nodes, None);
    for (c, d) in jac.iter().enumerate() {
        let xd: Vec<Dual> = x.values().iter().zip(d.values()).map(|(&v, &e)| Dual::new(v, e)).collect();
        g.forward(&[(xin, Matrix::new(n, x.cols(), xd)?)])?;
        g.backward(out, &column_seed(n, spec.output_width(), c))?;
        let mixed = ParameterVector::tangent_of(&g.gradients(&nodes)?);
        grad.axpy(2.0 / n as f64, &mixed)?;
    }
    Ok((value, grad))
}
