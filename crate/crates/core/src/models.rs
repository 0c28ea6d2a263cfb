//! Representation learner, predictor and duplicate predictor.
//!
//! All three are plain MLPs. Weight matrices are stored `in × out` so a batch
//! of row vectors maps through `x·W + b`. The predictor and its duplicate
//! always share one [`MlpSpec`].

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::Rng as _;
use rand_distr::{Distribution, Uniform};

use crate::diffcore::{DenseMatrix, Graph, GraphError, Matrix, NodeId, ParameterVector, Scalar};
use crate::seeding::{self, streams, Rng};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum ModelError {
    #[error("dimension mismatch: expected width {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("invalid architecture: {0}")]
    Architecture(String),
    #[error("power iteration did not converge; last estimate {last_estimate}")]
    PowerIteration { last_estimate: f64 },
    #[error("Lipschitz assumption on the loss cannot be certified for a classification model")]
    AssumptionUnverifiable,
    #[error(transparent)]
    Graph(#[from] GraphError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Identity,
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Activation::Relu => "relu",
            Activation::Identity => "identity",
        })
    }
}

impl FromStr for Activation {
    type Err = ModelError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "relu" => Ok(Activation::Relu),
            "identity" | "none" | "linear" => Ok(Activation::Identity),
            other => Err(ModelError::Architecture(format!("unknown activation `{other}`"))),
        }
    }
}

/// Layer widths plus the activation applied after each affine map.
#[derive(Clone, Debug, PartialEq)]
pub struct MlpSpec {
    pub widths: Vec<usize>,
    pub activations: Vec<Activation>,
}

impl MlpSpec {
    /// ReLU after every layer.
    pub fn relu(widths: Vec<usize>) -> Self {
        let n = widths.len().saturating_sub(1);
        Self { widths, activations: vec![Activation::Relu; n] }
    }

    /// ReLU on hidden layers, identity on the last one.
    pub fn head(widths: Vec<usize>) -> Self {
        let n = widths.len().saturating_sub(1);
        let mut activations = vec![Activation::Relu; n];
        if let Some(last) = activations.last_mut() {
            *last = Activation::Identity;
        }
        Self { widths, activations }
    }

    pub fn input_width(&self) -> usize {
        self.widths[0]
    }

    pub fn output_width(&self) -> usize {
        *self.widths.last().expect("validated non-empty")
    }

    pub fn n_layers(&self) -> usize {
        self.widths.len() - 1
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.widths.len() < 2 {
            return Err(ModelError::Architecture("an MLP needs at least one layer".into()));
        }
        if self.widths.contains(&0) {
            return Err(ModelError::Architecture("zero-width layer".into()));
        }
        if self.activations.len() != self.n_layers() {
            return Err(ModelError::Architecture(format!(
                "{} activations for {} layers",
                self.activations.len(),
                self.n_layers()
            )));
        }
        Ok(())
    }

    pub fn layout(&self) -> Vec<(usize, usize)> {
        self.widths.windows(2).flat_map(|w| [(w[0], w[1]), (1, w[1])]).collect()
    }

    /// Symmetric uniform initialisation with `a = sqrt(6 / (fan_in + fan_out))`, zero biases.
    pub fn init(&self, rng: &mut Rng) -> ParameterVector {
        let mut mats = Vec::with_capacity(2 * self.n_layers());
        for w in self.widths.windows(2) {
            let a = (6.0 / (w[0] + w[1]) as f64).sqrt();
            let dist = Uniform::new_inclusive(-a, a).expect("finite bounds");
            let vals = (0..w[0] * w[1]).map(|_| dist.sample(rng)).collect();
            mats.push(DenseMatrix::new(w[0], w[1], vals).expect("sized above"));
            mats.push(DenseMatrix::zeros(1, w[1]));
        }
        ParameterVector::flatten(&mats)
    }

    pub fn check_params(&self, params: &ParameterVector) -> Result<(), ModelError> {
        if params.layout() != self.layout().as_slice() {
            return Err(ModelError::Architecture(format!(
                "parameter layout {:?} does not match widths {:?}",
                params.layout(),
                self.widths
            )));
        }
        Ok(())
    }

    /// Registers one parameter node per matrix.
    pub fn param_nodes<S: Scalar>(&self, g: &mut Graph<S>, mats: Vec<Matrix<S>>) -> Vec<NodeId> {
        mats.into_iter().map(|m| g.parameter(m)).collect()
    }

    /// Appends the network to `g`. `masks`, when given, holds one dropout mask
    /// per layer applied after that layer's activation.
    pub fn apply<S: Scalar>(&self, g: &mut Graph<S>, x: NodeId, params: &[NodeId], masks: Option<&[DenseMatrix]>) -> NodeId {
        let mut h = x;
        for (l, act) in self.activations.iter().enumerate() {
            h = g.affine(h, params[2 * l], params[2 * l + 1]);
            if *act == Activation::Relu {
                h = g.relu(h);
            }
            if let Some(m) = masks.and_then(|ms| ms.get(l)) {
                h = g.mask(h, m.clone());
            }
        }
        h
    }

    /// Plain forward pass for a batch of row vectors.
    pub fn forward(&self, params: &ParameterVector, x: &DenseMatrix) -> Result<DenseMatrix, ModelError> {
        if x.cols() != self.input_width() {
            return Err(ModelError::Dimension { expected: self.input_width(), got: x.cols() });
        }
        let mut g = Graph::new();
        let xin = g.input();
        let nodes = self.param_nodes(&mut g, params.matrices());
        self.apply(&mut g, xin, &nodes, None);
        Ok(g.forward(&[(xin, x.clone())])?)
    }

    /// Draws inverted-dropout masks (entries 0 or `1/(1-p)`) for a batch.
    pub fn dropout_masks(&self, rows: usize, rate: f64, rng: &mut Rng) -> Vec<DenseMatrix> {
        let keep = 1.0 - rate;
        self.widths[1..]
            .iter()
            .map(|&w| {
                let vals = (0..rows * w).map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 }).collect();
                DenseMatrix::new(rows, w, vals).expect("sized above")
            })
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Task {
    /// Log-softmax output over `n_classes`, negative log-likelihood loss.
    Classification { n_classes: usize },
    /// Single raw output, absolute-error loss.
    Regression,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Architecture {
    pub representation: MlpSpec,
    pub predictor: MlpSpec,
    pub task: Task,
    pub dropout: f64,
}

impl Architecture {
    /// Representation `[d_in, hidden..]` with ReLU throughout, predictor
    /// `[last, pred_hidden.., out]` with a linear output layer.
    pub fn mlp(d_in: usize, rep_hidden: &[usize], pred_hidden: &[usize], task: Task) -> Self {
        let mut rep = vec![d_in];
        rep.extend_from_slice(rep_hidden);
        let feat = *rep.last().expect("non-empty");
        let out = match task {
            Task::Classification { n_classes } => n_classes,
            Task::Regression => 1,
        };
        let mut pred = vec![feat];
        pred.extend_from_slice(pred_hidden);
        pred.push(out);
        Self { representation: MlpSpec::relu(rep), predictor: MlpSpec::head(pred), task, dropout: 0.0 }
    }

    /// The desk-scale default: representation `[d_in, 32, 16]`, predictor `[16, n_classes]`.
    pub fn desk_default(d_in: usize, n_classes: usize) -> Self {
        Self::mlp(d_in, &[32, 16], &[], Task::Classification { n_classes })
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        self.representation.validate()?;
        self.predictor.validate()?;
        if self.representation.output_width() != self.predictor.input_width() {
            return Err(ModelError::Architecture(format!(
                "representation outputs {} features but the predictor expects {}",
                self.representation.output_width(),
                self.predictor.input_width()
            )));
        }
        match self.task {
            Task::Classification { n_classes } if n_classes < 2 || self.predictor.output_width() != n_classes => {
                return Err(ModelError::Architecture(format!(
                    "classification over {n_classes} classes needs a predictor of width {n_classes}"
                )))
            }
            Task::Regression if self.predictor.output_width() != 1 => {
                return Err(ModelError::Architecture("regression needs a single output".into()))
            }
            _ => {}
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(ModelError::Architecture(format!("dropout rate {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }

    pub fn n_classes(&self) -> Option<usize> {
        match self.task {
            Task::Classification { n_classes } => Some(n_classes),
            Task::Regression => None,
        }
    }

    /// Predictor head on top of `features`: log-probabilities or the raw output.
    pub fn predict_node<S: Scalar>(&self, g: &mut Graph<S>, features: NodeId, params: &[NodeId]) -> NodeId {
        let out = self.predictor.apply(g, features, params, None);
        match self.task {
            Task::Classification { .. } => g.log_softmax(out),
            Task::Regression => out,
        }
    }

    /// Plain-text `key = value` block.
    pub fn to_kv(&self) -> String {
        let join = |v: &[usize]| v.iter().map(usize::to_string).collect::<Vec<_>>().join(",");
        let acts = |v: &[Activation]| v.iter().map(Activation::to_string).collect::<Vec<_>>().join(",");
        let task = match self.task {
            Task::Classification { n_classes } => format!("classification:{n_classes}"),
            Task::Regression => "regression".to_string(),
        };
        format!(
            "rep_layers = {}\nrep_activations = {}\npred_layers = {}\npred_activations = {}\ntask = {}\ndropout = {}\n",
            join(&self.representation.widths),
            acts(&self.representation.activations),
            join(&self.predictor.widths),
            acts(&self.predictor.activations),
            task,
            self.dropout
        )
    }

    pub fn from_kv(text: &str) -> Result<Self, ModelError> {
        let mut map = BTreeMap::new();
        for line in text.lines() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) =
                line.split_once('=').ok_or_else(|| ModelError::Architecture(format!("expected key = value, got `{line}`")))?;
            map.insert(k.trim().to_string(), v.trim().to_string());
        }
        let get = |k: &str| map.get(k).ok_or_else(|| ModelError::Architecture(format!("missing key `{k}`")));
        let widths = |s: &str| -> Result<Vec<usize>, ModelError> {
            s.split(',').map(|t| t.trim().parse().map_err(|_| ModelError::Architecture(format!("bad width `{t}`")))).collect()
        };
        let acts = |s: &str| -> Result<Vec<Activation>, ModelError> { s.split(',').map(str::parse).collect() };
        let task = match get("task")?.as_str() {
            "regression" => Task::Regression,
            t => {
                let n = t
                    .strip_prefix("classification:")
                    .and_then(|n| n.parse().ok())
                    .ok_or_else(|| ModelError::Architecture(format!("bad task `{t}`")))?;
                Task::Classification { n_classes: n }
            }
        };
        let arch = Self {
            representation: MlpSpec { widths: widths(get("rep_layers")?)?, activations: acts(get("rep_activations")?)? },
            predictor: MlpSpec { widths: widths(get("pred_layers")?)?, activations: acts(get("pred_activations")?)? },
            task,
            dropout: get("dropout")?.parse().map_err(|_| ModelError::Architecture("bad dropout".into()))?,
        };
        arch.validate()?;
        Ok(arch)
    }
}

/// Representation parameters `u`, predictor `v` and duplicate predictor `v′`.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelTriple {
    pub arch: Architecture,
    pub rep: ParameterVector,
    pub pred: ParameterVector,
    pub dup: ParameterVector,
}

impl ModelTriple {
    pub fn init(arch: Architecture, seed: u64) -> Result<Self, ModelError> {
        arch.validate()?;
        let mut rng = seeding::stream(seed, streams::INIT);
        let rep = arch.representation.init(&mut rng);
        let pred = arch.predictor.init(&mut rng);
        let dup = arch.predictor.init(&mut rng);
        Ok(Self { arch, rep, pred, dup })
    }

    pub fn from_parts(
        arch: Architecture,
        rep: ParameterVector,
        pred: ParameterVector,
        dup: ParameterVector,
    ) -> Result<Self, ModelError> {
        let t = Self { arch, rep, pred, dup };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        self.arch.validate()?;
        self.arch.representation.check_params(&self.rep)?;
        self.arch.predictor.check_params(&self.pred)?;
        self.arch.predictor.check_params(&self.dup)?;
        Ok(())
    }

    /// `g(u, x)` for a batch of inputs, dropout disabled.
    pub fn represent(&self, x: &DenseMatrix) -> Result<DenseMatrix, ModelError> {
        self.arch.representation.forward(&self.rep, x)
    }

    /// `h(v, features)` (or `h(v′, ·)` with `params = &self.dup`).
    pub fn predict_with(&self, params: &ParameterVector, features: &DenseMatrix) -> Result<DenseMatrix, ModelError> {
        let spec = &self.arch.predictor;
        if features.cols() != spec.input_width() {
            return Err(ModelError::Dimension { expected: spec.input_width(), got: features.cols() });
        }
        let mut g = Graph::new();
        let f = g.input();
        let nodes = spec.param_nodes(&mut g, params.matrices());
        self.arch.predict_node(&mut g, f, &nodes);
        Ok(g.forward(&[(f, features.clone())])?)
    }

    pub fn predict(&self, features: &DenseMatrix) -> Result<DenseMatrix, ModelError> {
        self.predict_with(&self.pred, features)
    }

    /// Spectral-product certificate for the representation and predictor.
    /// Only regression models (absolute-error loss, `M = 1`) are certifiable.
    pub fn certificate(&self) -> Result<LipschitzCertificate, ModelError> {
        if self.arch.task != Task::Regression {
            return Err(ModelError::AssumptionUnverifiable);
        }
        Ok(LipschitzCertificate {
            k: lipschitz_upper_bound(&self.arch.representation, &self.rep)?,
            l: lipschitz_upper_bound(&self.arch.predictor, &self.pred)?,
            m: 1.0,
            method: CertificateMethod::SpectralProduct,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CertificateMethod {
    SpectralProduct,
}

/// Upper bounds on the representation (`k`), predictor (`l`) and loss (`m`)
/// Lipschitz constants.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LipschitzCertificate {
    pub k: f64,
    pub l: f64,
    pub m: f64,
    pub method: CertificateMethod,
}

const POWER_TOL: f64 = 1e-8;
const POWER_MAX_ITERS: usize = 1000;

/// Largest singular value of `w` by power iteration on the smaller Gram
/// matrix. The converged Rayleigh quotient is inflated by its residual norm,
/// which for a symmetric matrix bounds the distance to the nearest eigenvalue.
pub fn spectral_norm(w: &DenseMatrix) -> Result<f64, ModelError> {
    if w.values().iter().all(|&v| v == 0.0) {
        return Ok(0.0);
    }
    let gram = if w.rows() < w.cols() { w.matmul_t(w) } else { w.t_matmul(w) };
    let n = gram.rows();
    let apply = |x: &[f64]| -> Vec<f64> { (0..n).map(|i| gram.row(i).iter().zip(x).map(|(a, b)| a * b).sum()).collect() };
    let norm = |x: &[f64]| x.iter().map(|v| v * v).sum::<f64>().sqrt();

    let mut rng = seeding::stream(0x5eed, streams::POWER_ITERATION);
    let mut x: Vec<f64> = (0..n).map(|_| rng.random::<f64>() + 0.5).collect();
    let nx = norm(&x);
    x.iter_mut().for_each(|v| *v /= nx);

    let mut lambda = 0.0;
    for _ in 0..POWER_MAX_ITERS {
        let y = apply(&x);
        let ny = norm(&y);
        if ny == 0.0 {
            // Start vector fell in the null space; restart on the heaviest column.
            let j = (0..n).max_by(|&a, &b| gram.get(a, a).total_cmp(&gram.get(b, b))).unwrap_or(0);
            x = vec![0.0; n];
            x[j] = 1.0;
            continue;
        }
        // Stop on the residual rather than the Rayleigh quotient: the quotient
        // settles quadratically faster, so its residual would still be large.
        lambda = x.iter().zip(&y).map(|(a, b)| a * b).sum();
        let resid = norm(&y.iter().zip(&x).map(|(a, b)| a - lambda * b).collect::<Vec<_>>());
        if resid <= POWER_TOL * lambda.abs() {
            return Ok((lambda + resid).sqrt());
        }
        x = y.iter().map(|v| v / ny).collect();
    }
    Err(ModelError::PowerIteration { last_estimate: lambda.max(0.0).sqrt() })
}

/// Product of per-layer spectral norms. Valid because ReLU and identity are
/// 1-Lipschitz and biases do not affect Lipschitz constants.
pub fn lipschitz_upper_bound(spec: &MlpSpec, params: &ParameterVector) -> Result<f64, ModelError> {
    spec.check_params(params)?;
    let mats = params.unflatten();
    let mut bound = 1.0;
    for l in 0..spec.n_layers() {
        bound *= spectral_norm(&mats[2 * l])?;
    }
    Ok(bound)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single_layer(w: DenseMatrix, act: Activation) -> (MlpSpec, ParameterVector) {
        let spec = MlpSpec { widths: vec![w.rows(), w.cols()], activations: vec![act] };
        let b = DenseMatrix::zeros(1, w.cols());
        (spec, ParameterVector::flatten(&[w, b]))
    }

    #[test]
    fn identity_relu_layer_passes_non_negative_input() {
        let (spec, p) = single_layer(DenseMatrix::identity(3), Activation::Relu);
        let x = DenseMatrix::row_vector(vec![0.0, 1.5, 2.0]);
        assert_eq!(spec.forward(&p, &x).unwrap(), x);
    }

    #[test]
    fn zero_weights_give_zero_features() {
        let (spec, p) = single_layer(DenseMatrix::zeros(2, 4), Activation::Relu);
        let out = spec.forward(&p, &DenseMatrix::row_vector(vec![3.0, -1.0])).unwrap();
        assert!(out.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn wrong_input_width_is_rejected() {
        let (spec, p) = single_layer(DenseMatrix::identity(3), Activation::Relu);
        let err = spec.forward(&p, &DenseMatrix::row_vector(vec![1.0, 2.0])).unwrap_err();
        assert_eq!(err, ModelError::Dimension { expected: 3, got: 2 });
    }

    #[test]
    fn zero_predictor_is_uniform() {
        let arch = Architecture::mlp(2, &[3], &[], Task::Classification { n_classes: 2 });
        let mut t = ModelTriple::init(arch, 1).unwrap();
        t.pred = ParameterVector::zeros_like(&t.pred);
        let out = t.predict(&DenseMatrix::row_vector(vec![0.3, -0.2, 5.0])).unwrap();
        for &v in out.values() {
            assert!((v + std::f64::consts::LN_2).abs() < 1e-15);
        }
    }

    #[test]
    fn regression_head_is_affine() {
        let arch = Architecture::mlp(2, &[3], &[], Task::Regression);
        let mut t = ModelTriple::init(arch, 2).unwrap();
        let w = DenseMatrix::new(3, 1, vec![0.5, -1.0, 2.0]).unwrap();
        let b = DenseMatrix::filled(1, 1, 0.25);
        t.pred = ParameterVector::flatten(&[w, b]);
        let out = t.predict(&DenseMatrix::row_vector(vec![1.0, 2.0, 3.0])).unwrap();
        assert!((out.values()[0] - (0.5 - 2.0 + 6.0 + 0.25)).abs() < 1e-15);
    }

    #[test]
    fn spectral_bounds_of_scaled_identity() {
        assert!((spectral_norm(&DenseMatrix::identity(4)).unwrap() - 1.0).abs() < 1e-12);
        let two = DenseMatrix::identity(3).map(|v| 2.0 * v);
        assert!((spectral_norm(&two).unwrap() - 2.0).abs() < 1e-12);
        let (spec, p) = single_layer(DenseMatrix::identity(2), Activation::Relu);
        assert!((lipschitz_upper_bound(&spec, &p).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn architecture_round_trips_through_kv() {
        let mut arch = Architecture::desk_default(5, 3);
        arch.dropout = 0.25;
        let back = Architecture::from_kv(&arch.to_kv()).unwrap();
        assert_eq!(arch, back);
    }

    #[test]
    fn mismatched_feature_width_is_invalid() {
        let mut arch = Architecture::desk_default(2, 2);
        arch.predictor.widths[0] = 8;
        assert!(arch.validate().is_err());
    }

    #[test]
    fn classification_models_cannot_be_certified() {
        let t = ModelTriple::init(Architecture::desk_default(2, 2), 0).unwrap();
        assert_eq!(t.certificate().unwrap_err(), ModelError::AssumptionUnverifiable);
    }

    #[test]
    fn swapping_predictors_keeps_validation() {
        let t = ModelTriple::init(Architecture::desk_default(2, 2), 3).unwrap();
        let swapped = ModelTriple::from_parts(t.arch.clone(), t.rep.clone(), t.dup.clone(), t.pred.clone());
        assert!(swapped.is_ok());
    }
}
