//! The training loop: inner Langevin/ascent steps, then the α update.

use std::path::Path;

use crate::alpha_solver::{self, AlphaConstants, AlphaError, AlphaObjective, DomainWeights};
use crate::data::{self, BatchStream, LabeledSet, MultiSourceDataset, UnlabeledSet};
use crate::diffcore::{DenseMatrix, ParameterVector};
use crate::models::{Architecture, ModelError, ModelTriple, Task};
use crate::optimizer::{self, Block, GradNormLedger};
use crate::risks::{self, ObjectiveWeights, PseudoBatch, RiskBreakdown, StepBatches, StepMasks};
use crate::seeding::{self, streams, Rng};
use crate::theory::{self, BoundConstants, BoundReport};

use super::config::{AlphaRisks, ConfigError, DataSpec, ExperimentConfig, Mode};
use super::RunError;

/// Evaluation after one epoch (epoch 0 is the initial model).
#[derive(Clone, Debug, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub source_accuracy: Vec<f64>,
    pub target_test_accuracy: f64,
    pub target_labeled_accuracy: Option<f64>,
    pub breakdown: RiskBreakdown,
    pub alpha: Vec<f64>,
    pub lambda_r: Option<f64>,
    pub delta_u: Option<f64>,
    pub delta_v: Option<f64>,
    pub bound_total: Option<f64>,
}

/// One inner step, reported to observers.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepRecord {
    pub epoch: usize,
    pub step: usize,
    pub objective: f64,
    pub grad_norm_penalty: f64,
    pub interp_penalty: f64,
}

#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub model: ModelTriple,
    pub metrics: Vec<EpochMetrics>,
    /// `None` in noiseless mode.
    pub ledger: Option<GradNormLedger>,
    pub bound: Option<BoundReport>,
    pub alpha: DomainWeights,
    /// True when some batch size exceeded its set, so that set contributed one full batch per epoch.
    pub oversized_batches: bool,
}

/// Builds the dataset a configuration describes.
pub fn load_dataset(cfg: &ExperimentConfig) -> Result<MultiSourceDataset, RunError> {
    match &cfg.data {
        DataSpec::Synthetic(b) => Ok(b.build(cfg.seed)?),
        DataSpec::Csv { sources, target_labeled, target_unlabeled, target_test, n_classes } => {
            let srcs = sources.iter().map(|p| data::load_csv(p, None)).collect::<Result<Vec<_>, _>>()?;
            let width = srcs[0].width();
            let tl = match target_labeled {
                Some(p) => data::load_csv(p, Some(width))?,
                None => LabeledSet::empty(width),
            };
            let tu = data::load_csv(target_unlabeled, Some(width))?.strip_labels();
            let tt = data::load_csv(target_test, Some(width))?;
            let ds = MultiSourceDataset {
                sources: srcs,
                target_labeled: tl,
                target_unlabeled: tu,
                target_test: tt,
                n_classes: *n_classes,
                width,
            };
            ds.validate()?;
            Ok(ds)
        }
    }
}

/// Fraction of argmax predictions of `h(v, g(u, x))` equal to the labels.
pub fn evaluate(model: &ModelTriple, set: &LabeledSet) -> Result<f64, RunError> {
    if set.is_empty() {
        return Err(RunError::Data(data::DataError::Inconsistent("cannot evaluate on an empty set".into())));
    }
    let pred = model.predict(&model.represent(&set.features)?)?.row_argmax();
    let hits = pred.iter().zip(&set.labels).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / set.len() as f64)
}

/// Seeded cursor over one set's batches, moving to the next epoch's
/// permutation when the current one is used up.
struct Cursor {
    stream: BatchStream,
    epoch: u64,
    batches: Vec<Vec<usize>>,
    pos: usize,
}

impl Cursor {
    fn new(len: usize, batch: usize, seed: u64) -> Result<Self, RunError> {
        let stream = BatchStream::new(len, batch, seed)?;
        let batches = stream.epoch(0);
        Ok(Self { stream, epoch: 0, batches, pos: 0 })
    }

    fn next_batch(&mut self) -> Vec<usize> {
        if self.pos == self.batches.len() {
            self.epoch += 1;
            self.batches = self.stream.epoch(self.epoch);
            self.pos = 0;
        }
        self.pos += 1;
        self.batches[self.pos - 1].clone()
    }
}

/// Per-set batch seed, independent of every other stream.
fn numeric(epoch: usize, step: usize, e: impl std::fmt::Display) -> RunError {
    RunError::Numeric { epoch, step, message: e.to_string() }
}

/// Removes what a regime must never read: target labels when `τ = 0`,
/// unlabeled target inputs when `τ = 1`.
fn regime_view(cfg: &ExperimentConfig, ds: &MultiSourceDataset) -> MultiSourceDataset {
    let mut view = ds.clone();
    let w = cfg.objective_weights();
    if cfg.mode == Mode::Unsupervised || w.tau == 0.0 {
        view.target_labeled = LabeledSet::empty(ds.width);
    }
    if w.tau == 1.0 {
        view.target_unlabeled = UnlabeledSet { features: DenseMatrix::zeros(0, ds.width) };
    }
    view
}

fn check_requirements(cfg: &ExperimentConfig, ds: &MultiSourceDataset) -> Result<(), RunError> {
    cfg.validate()?;
    ds.validate()?;
    let c = cfg.objective_weights().expand();
    if (c.target_pred != 0.0 || c.target_dup != 0.0) && ds.target_labeled.is_empty() {
        return Err(ConfigError::Invalid("this regime needs labeled target data".into()).into());
    }
    if (c.pseudo_dup != 0.0 || c.pseudo_pred != 0.0) && ds.target_unlabeled.is_empty() {
        return Err(ConfigError::Invalid("this regime needs unlabeled target data".into()).into());
    }
    if ds.sources.iter().any(LabeledSet::is_empty) {
        return Err(ConfigError::Invalid("every source needs at least one example".into()).into());
    }
    let solves_alpha = cfg.learn_alpha && cfg.alignment && ds.sources.len() > 1;
    if solves_alpha && cfg.sgld.noiseless && cfg.lambda_r_override.is_none() {
        return Err(RunError::Alpha(AlphaError::NoiselessLedger));
    }
    Ok(())
}

pub fn architecture(cfg: &ExperimentConfig, ds: &MultiSourceDataset) -> Architecture {
    let mut arch =
        Architecture::mlp(ds.width, &cfg.rep_hidden, &cfg.pred_hidden, Task::Classification { n_classes: ds.n_classes });
    arch.dropout = cfg.dropout;
    arch
}

pub fn run(cfg: &ExperimentConfig) -> Result<RunOutcome, RunError> {
    let ds = load_dataset(cfg)?;
    run_on(cfg, &ds, &mut |_, _| {})
}

/// Rebuilds the bound report of a finished run from its `ledger.csv` and the
/// last row of its `metrics.csv`.
pub fn bound_from_outputs(cfg: &ExperimentConfig, dir: &Path) -> Result<BoundReport, RunError> {
    let ledger_path = dir.join(super::LEDGER_FILE);
    if !ledger_path.exists() {
        return Err(RunError::MissingLedger { path: ledger_path.display().to_string() });
    }
    let (delta_u, delta_v) = GradNormLedger::replay(&GradNormLedger::read_csv(&ledger_path)?);
    let rows = super::read_metrics_csv(&dir.join(super::METRICS_FILE))?;
    let last = rows.last().ok_or_else(|| RunError::Io {
        path: dir.join(super::METRICS_FILE).display().to_string(),
        source: std::io::Error::other("no metric rows"),
    })?;
    let ds = regime_view(cfg, &load_dataset(cfg)?);
    let k = BoundConstants {
        sigma: cfg.loss_subgaussian,
        m_t: ds.target_labeled.len(),
        m_t_prime: ds.target_unlabeled.len(),
        m: ds.source_sizes(),
        alpha: last.alpha.clone(),
        epsilon: last.epsilon,
        tau: last.tau,
        delta_u,
        delta_v,
        r_star: cfg.r_star,
        r_star_rep: cfg.r_star_rep,
    };
    Ok(theory::ledger_bound(&k, last.combined)?)
}

/// Trains on `ds`, calling `observer` after every inner step with the
/// updated parameters.
pub fn run_on(
    cfg: &ExperimentConfig,
    ds: &MultiSourceDataset,
    observer: &mut dyn FnMut(&StepRecord, &ModelTriple),
) -> Result<RunOutcome, RunError> {
    check_requirements(cfg, ds)?;
    let ds = regime_view(cfg, ds);
    let mut trainer = Trainer::new(cfg, &ds)?;
    let mut metrics = vec![trainer.epoch_metrics(0, None)?];
    for epoch in 1..=cfg.epochs {
        trainer.run_epoch(epoch, observer)?;
        let lambda = trainer.update_alpha(epoch)?;
        metrics.push(trainer.epoch_metrics(epoch, lambda)?);
    }
    let bound = trainer.bound(metrics.last().expect("initial row").breakdown.combined);
    let Trainer { model, ledger, alpha, oversized, .. } = trainer;
    Ok(RunOutcome { model, metrics, ledger, bound, alpha, oversized_batches: oversized })
}

struct Trainer<'a> {
    cfg: &'a ExperimentConfig,
    ds: &'a MultiSourceDataset,
    weights: ObjectiveWeights,
    model: ModelTriple,
    alpha: DomainWeights,
    ledger: Option<GradNormLedger>,
    target: Option<Cursor>,
    unlabeled: Option<Cursor>,
    sources: Vec<Cursor>,
    noise: Rng,
    dropout: Rng,
    interp: Rng,
    step: usize,
    steps_per_epoch: usize,
    oversized: bool,
    last_sources: Vec<Vec<usize>>,
}

impl<'a> Trainer<'a> {
    fn new(cfg: &'a ExperimentConfig, ds: &'a MultiSourceDataset) -> Result<Self, RunError> {
        let weights = cfg.objective_weights();
        let c = weights.expand();
        let model = ModelTriple::init(architecture(cfg, ds), cfg.seed)?;
        let alpha = DomainWeights::uniform(ds.source_sizes())?;
        let b = cfg.batch_size;
        let uses_target = c.target_pred != 0.0 || c.target_dup != 0.0;
        let uses_unlabeled = c.pseudo_pred != 0.0 || c.pseudo_dup != 0.0;
        let target = uses_target.then(|| Cursor::new(ds.target_labeled.len(), b, seeding::derive(cfg.seed, 0))).transpose()?;
        let unlabeled =
            uses_unlabeled.then(|| Cursor::new(ds.target_unlabeled.len(), b, seeding::derive(cfg.seed, 1))).transpose()?;
        let sources = ds
            .sources
            .iter()
            .enumerate()
            .map(|(i, s)| Cursor::new(s.len(), b, seeding::derive(cfg.seed, 2 + i as u64)))
            .collect::<Result<Vec<_>, _>>()?;
        let uses_sources = c.sources_pred != 0.0 || c.sources_dup != 0.0;
        let mut active: Vec<usize> = Vec::new();
        if uses_target {
            active.push(ds.target_labeled.len());
        }
        if uses_unlabeled {
            active.push(ds.target_unlabeled.len());
        }
        if uses_sources {
            active.extend(ds.sources.iter().map(LabeledSet::len));
        }
        let largest = active.iter().copied().max().unwrap_or(0);
        let oversized = active.iter().any(|&n| b > n);
        Ok(Self {
            cfg,
            ds,
            weights,
            model,
            alpha,
            ledger: (!cfg.sgld.noiseless).then(GradNormLedger::new),
            target,
            unlabeled,
            sources,
            noise: seeding::stream(cfg.seed, streams::NOISE),
            dropout: seeding::stream(cfg.seed, streams::DROPOUT),
            interp: seeding::stream(cfg.seed, streams::INTERPOLATION),
            step: 0,
            steps_per_epoch: largest.div_ceil(b),
            oversized,
            last_sources: vec![Vec::new(); ds.sources.len()],
        })
    }

    fn critic_active(&self) -> bool {
        let c = self.weights.expand();
        c.target_dup != 0.0 || c.sources_dup != 0.0 || c.pseudo_dup != 0.0
    }

    fn draw_masks(&mut self, batches: &StepBatches) -> Option<StepMasks> {
        let rate = self.cfg.dropout;
        if rate == 0.0 {
            return None;
        }
        let spec = &self.model.arch.representation;
        let rng = &mut self.dropout;
        Some(StepMasks {
            target: batches.target.as_ref().map(|b| spec.dropout_masks(b.len(), rate, rng)),
            unlabeled: batches.unlabeled.as_ref().map(|b| spec.dropout_masks(b.x.rows(), rate, rng)),
            sources: batches.sources.iter().map(|b| Some(spec.dropout_masks(b.len(), rate, rng))).collect(),
        })
    }

    fn sample(&mut self) -> Result<StepBatches, RunError> {
        let target = match &mut self.target {
            Some(c) => Some(self.ds.target_labeled.batch(&c.next_batch())),
            None => None,
        };
        let unlabeled = match &mut self.unlabeled {
            Some(c) => {
                let x = self.ds.target_unlabeled.batch(&c.next_batch());
                Some(PseudoBatch::new(&self.model, &x)?)
            }
            None => None,
        };
        let mut sources = Vec::with_capacity(self.sources.len());
        for (i, c) in self.sources.iter_mut().enumerate() {
            let idx = c.next_batch();
            sources.push(self.ds.sources[i].batch(&idx));
            self.last_sources[i] = idx;
        }
        Ok(StepBatches { target, unlabeled, sources })
    }

    /// `∇_{v′}` of the interpolation penalty, summed over every critic
    /// evaluation (supervised and pseudo-label), and its value.
    fn interp_gradient(&mut self, batches: &StepBatches) -> Result<Option<(f64, ParameterVector)>, RunError> {
        let w = self.cfg.interp_penalty_weight;
        if w == 0.0 || !self.critic_active() || !self.cfg.alignment {
            return Ok(None);
        }
        let c = self.weights.expand();
        let rep = |x: &DenseMatrix| self.model.represent(x);
        let mut src_rows = Vec::new();
        let mut n_src = 0;
        for (b, &a) in batches.sources.iter().zip(&self.alpha.alpha) {
            if a > 0.0 {
                let f = rep(&b.x)?;
                n_src += f.rows();
                src_rows.extend_from_slice(f.values());
            }
        }
        if n_src == 0 {
            return Ok(None);
        }
        let width = self.model.arch.predictor.input_width();
        let s_feats = DenseMatrix::new(n_src, width, src_rows).map_err(ModelError::from)?;
        let mut t_sides = Vec::new();
        if c.target_dup != 0.0 {
            if let Some(t) = &batches.target {
                t_sides.push(rep(&t.x)?);
            }
        }
        if c.pseudo_dup != 0.0 || self.weights.tau < 1.0 {
            if let Some(p) = &batches.unlabeled {
                t_sides.push(rep(&p.x)?);
            }
        }
        let mut total = 0.0;
        let mut grad = ParameterVector::zeros_like(&self.model.dup);
        for t in &t_sides {
            let lambdas = risks::draw_lambdas(risks::pair_count(t, &s_feats), &mut self.interp);
            let (v, g) = risks::gradient_penalty_interp_grad(&self.model.arch.predictor, &self.model.dup, t, &s_feats, &lambdas)?;
            total += w * v;
            grad.axpy(w, &g).map_err(ModelError::from)?;
        }
        Ok(Some((total, grad)))
    }

    fn run_epoch(&mut self, epoch: usize, observer: &mut dyn FnMut(&StepRecord, &ModelTriple)) -> Result<(), RunError> {
        for _ in 0..self.steps_per_epoch {
            self.step += 1;
            let k = self.step;
            let batches = self.sample()?;
            let masks = self.draw_masks(&batches);
            let (objective, gn_pen, mut grads) = risks::penalized_gradients(
                &self.model,
                &batches,
                &self.alpha.alpha,
                &self.weights,
                masks.as_ref(),
                self.cfg.grad_norm_penalty_weight,
            )
            .map_err(|e| numeric(epoch, k, e))?;
            let mut interp = 0.0;
            if let Some((v, g)) = self.interp_gradient(&batches).map_err(|e| numeric(epoch, k, e))? {
                interp = v;
                grads.dup.axpy(-1.0, &g).map_err(|e| numeric(epoch, k, e))?;
            }
            let sg = &self.cfg.sgld;
            let sigma = sg.sigma_at(k);
            let (eta_u, eta_v, eta_d) = (sg.eta_u.at(k), sg.eta_v.at(k), sg.eta_dup.at(k));
            let rep = optimizer::sgld_step(&self.model.rep, &grads.rep, eta_u, sigma, &mut self.noise)
                .map_err(|e| numeric(epoch, k, e))?;
            let pred = optimizer::sgld_step(&self.model.pred, &grads.pred, eta_v, sigma, &mut self.noise)
                .map_err(|e| numeric(epoch, k, e))?;
            let dup = optimizer::duplicate_ascent_step(&self.model.dup, &grads.dup, eta_d).map_err(|e| numeric(epoch, k, e))?;
            if let Some(l) = &mut self.ledger {
                l.accumulate(k, Block::U, eta_u, sigma, grads.rep.squared_norm()).map_err(|e| numeric(epoch, k, e))?;
                l.accumulate(k, Block::V, eta_v, sigma, grads.pred.squared_norm()).map_err(|e| numeric(epoch, k, e))?;
            }
            self.model.rep = rep;
            self.model.pred = pred;
            self.model.dup = dup;
            for (name, p) in [("u", &self.model.rep), ("v", &self.model.pred), ("v'", &self.model.dup)] {
                if let Some(i) = p.first_non_finite() {
                    return Err(numeric(epoch, k, format!("parameter {name}[{i}] became non-finite")));
                }
            }
            let rec = StepRecord { epoch, step: k, objective, grad_norm_penalty: gn_pen, interp_penalty: interp };
            observer(&rec, &self.model);
        }
        Ok(())
    }

    fn deltas(&self) -> Option<(f64, f64)> {
        self.ledger.as_ref().map(|l| (l.delta_u, l.delta_v))
    }

    fn alpha_constants(&self) -> AlphaConstants {
        AlphaConstants { epsilon: self.cfg.epsilon, tau: self.cfg.tau, c0: self.cfg.c0, c1: self.cfg.c1 }
    }

    /// Per-source `(r_i(v), r_i(v′))` for the α problem.
    fn alpha_risks(&self) -> Result<(Vec<f64>, Vec<f64>), RunError> {
        let batches: Vec<_> = match self.cfg.alpha_risks {
            AlphaRisks::FullPass => self.ds.sources.iter().map(LabeledSet::as_batch).collect(),
            AlphaRisks::LastBatch => self
                .ds
                .sources
                .iter()
                .zip(&self.last_sources)
                .map(|(s, idx)| if idx.is_empty() { s.as_batch() } else { s.batch(idx) })
                .collect(),
        };
        let n = batches.len();
        let uniform = vec![1.0 / n as f64; n];
        let (_, pred) = risks::empirical_risk_sources(&self.model, &batches, &uniform)?;
        let dual = ModelTriple { pred: self.model.dup.clone(), ..self.model.clone() };
        let (_, dup) = risks::empirical_risk_sources(&dual, &batches, &uniform)?;
        Ok((pred, dup))
    }

    /// End-of-epoch α solve plus moving average; returns the `λ_R` used.
    fn update_alpha(&mut self, epoch: usize) -> Result<Option<f64>, RunError> {
        let n = self.ds.sources.len();
        if !self.cfg.learn_alpha || !self.cfg.alignment || n == 1 {
            return Ok(None);
        }
        let (rp, rd) = self.alpha_risks()?;
        let obj = AlphaObjective::build(&rp, &rd, &self.alpha_constants(), self.deltas(), self.cfg.lambda_r_override)?;
        if epoch <= self.cfg.warmup_epochs {
            return Ok(Some(obj.lambda_r));
        }
        let next = alpha_solver::solve_alpha(&obj, &self.alpha.m, alpha_solver::DEFAULT_TOLERANCE)
            .map_err(|e| numeric(epoch, self.step, e))?;
        let mixed = alpha_solver::moving_average_update(&self.alpha.alpha, &next.alpha, self.cfg.moving_average)?;
        // Rounding can leave the mixture a few ulps off the simplex; renormalise.
        let s: f64 = mixed.iter().sum();
        self.alpha = DomainWeights::new(mixed.iter().map(|a| a / s).collect(), self.alpha.m.clone())?;
        Ok(Some(obj.lambda_r))
    }

    fn full_batches(&self) -> Result<StepBatches, RunError> {
        let unlabeled = if self.ds.target_unlabeled.is_empty() {
            None
        } else {
            Some(PseudoBatch::new(&self.model, &self.ds.target_unlabeled.features)?)
        };
        Ok(StepBatches {
            target: (!self.ds.target_labeled.is_empty()).then(|| self.ds.target_labeled.as_batch()),
            unlabeled,
            sources: self.ds.sources.iter().map(LabeledSet::as_batch).collect(),
        })
    }

    fn bound_constants(&self) -> Option<BoundConstants> {
        let (du, dv) = self.deltas()?;
        Some(BoundConstants {
            sigma: self.cfg.loss_subgaussian,
            m_t: self.ds.target_labeled.len(),
            m_t_prime: self.ds.target_unlabeled.len(),
            m: self.alpha.m.clone(),
            alpha: self.alpha.alpha.clone(),
            epsilon: self.weights.epsilon,
            tau: self.weights.tau,
            delta_u: du,
            delta_v: dv,
            r_star: self.cfg.r_star,
            r_star_rep: self.cfg.r_star_rep,
        })
    }

    fn bound(&self, empirical: f64) -> Option<BoundReport> {
        theory::ledger_bound(&self.bound_constants()?, empirical).ok()
    }

    fn epoch_metrics(&self, epoch: usize, lambda_r: Option<f64>) -> Result<EpochMetrics, RunError> {
        let source_accuracy = self.ds.sources.iter().map(|s| evaluate(&self.model, s)).collect::<Result<Vec<_>, _>>()?;
        let target_test_accuracy = evaluate(&self.model, &self.ds.target_test)?;
        let target_labeled_accuracy =
            if self.ds.target_labeled.is_empty() { None } else { Some(evaluate(&self.model, &self.ds.target_labeled)?) };
        let breakdown = risks::combined_objective(&self.model, &self.full_batches()?, &self.alpha.alpha, &self.weights)?;
        let bound_total = self.bound(breakdown.combined).map(|b| b.total);
        let deltas = self.deltas();
        Ok(EpochMetrics {
            epoch,
            source_accuracy,
            target_test_accuracy,
            target_labeled_accuracy,
            breakdown,
            alpha: self.alpha.alpha.clone(),
            lambda_r,
            delta_u: deltas.map(|d| d.0),
            delta_v: deltas.map(|d| d.1),
            bound_total,
        })
    }
}
