//! Quick property checks behind `imda check`.

use rand::Rng as _;

use crate::alpha_solver::{self, AlphaObjective};
use crate::data::{BatchStream, LabeledBatch, Targets};
use crate::diffcore::{finite_diff_check, relative_error, DenseMatrix, Graph, GraphError, ParameterVector};
use crate::models::{Architecture, ModelTriple, Task};
use crate::optimizer::{Block, GradNormLedger};
use crate::risks::{self, ObjectiveWeights, PseudoBatch, StepBatches, StepMasks};
use crate::seeding::{self, Rng};
use crate::theory::{self, DiscreteMeasurePair, LabeledPoint};

/// One named check and whether it held.
#[derive(Clone, Debug, PartialEq)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

const FD_STEP: f64 = 1e-6;

fn matrix(rng: &mut Rng, rows: usize, cols: usize) -> DenseMatrix {
    let vals = (0..rows * cols).map(|_| rng.random_range(-1.5..1.5)).collect();
    DenseMatrix::new(rows, cols, vals).expect("sized")
}

fn labels(rng: &mut Rng, n: usize, classes: usize) -> Vec<usize> {
    (0..n).map(|_| rng.random_range(0..classes)).collect()
}

/// Worst relative error of a graph that uses every op, and separately of
/// the gradient-reversal node against `−λ` times the plain derivative.
pub fn ops_gradient_error(seed: u64) -> Result<f64, GraphError> {
    let mut rng = seeding::stream(seed, 0xC0FFEE);
    let x = matrix(&mut rng, 4, 3);
    let c = matrix(&mut rng, 4, 3);
    let mask = DenseMatrix::new(4, 4, (0..16).map(|i| if i % 3 == 0 { 0.0 } else { 2.0 }).collect()).expect("4x4");
    let y = labels(&mut rng, 4, 3);
    let lambda = rng.random_range(0.1..2.0);
    let params = ParameterVector::flatten(&[
        matrix(&mut rng, 3, 4),
        matrix(&mut rng, 1, 4),
        matrix(&mut rng, 4, 3),
        matrix(&mut rng, 1, 3),
    ]);

    let build = |p: &ParameterVector, reverse: bool| -> Result<(DenseMatrix, ParameterVector), GraphError> {
        let mut g = Graph::<f64>::new();
        let xin = g.input();
        let ms = p.matrices::<f64>();
        let ids: Vec<_> = ms.into_iter().map(|m| g.parameter(m)).collect();
        let cst = g.constant(c.clone());
        let h = g.affine(xin, ids[0], ids[1]);
        let h = g.relu(h);
        let h = g.mask(h, mask.clone());
        let z = g.affine(h, ids[2], ids[3]);
        let last = if reverse {
            let r = g.negate_gradient(z, lambda);
            let r = g.abs(r);
            g.mean(r)
        } else {
            let a = g.abs(z);
            let a = g.scale(a, 0.7);
            let s = g.add(z, cst);
            let s = g.sub(s, a);
            let lp = g.log_softmax(s);
            let l1 = g.nll(lp, y.clone());
            let picked = g.gather(lp, y.iter().map(|v| (v + 1) % 3).collect());
            let m = g.mean(picked);
            g.weighted_sum(&[(1.0, l1), (0.3, m)]).expect("non-zero weights")
        };
        let out = g.forward(&[(xin, x.clone())])?;
        let grads = g.backward_params(last, &DenseMatrix::filled(1, 1, 1.0))?;
        Ok((out, grads))
    };
    let plain = finite_diff_check(|p| build(p, false), &params, FD_STEP)?;
    // Gradient reversal: forward value is the identity, so central differences
    // see the plain derivative; the analytic gradient must be −λ times it.
    let (_, analytic) = build(&params, true)?;
    let mut probe = params.clone();
    let mut worst = plain;
    for i in 0..params.len() {
        let orig = params.values()[i];
        probe.values_mut()[i] = orig + FD_STEP;
        let plus = build(&probe, true)?.0.values()[0];
        probe.values_mut()[i] = orig - FD_STEP;
        let minus = build(&probe, true)?.0.values()[0];
        probe.values_mut()[i] = orig;
        let fd = (plus - minus) / (2.0 * FD_STEP);
        worst = worst.max(relative_error(analytic.values()[i], -lambda * fd));
    }
    Ok(worst)
}

fn labeled(rng: &mut Rng, n: usize, d: usize, classes: usize) -> LabeledBatch {
    LabeledBatch { x: matrix(rng, n, d), y: Targets::Classes(labels(rng, n, classes)) }
}

/// A small random model with every objective term and a random weighting.
pub fn random_instance(seed: u64) -> (ModelTriple, StepBatches, Vec<f64>, ObjectiveWeights, StepMasks) {
    let mut rng = seeding::stream(seed, 0xFACE);
    let classes = 2 + (seed as usize % 2);
    let pred_hidden: &[usize] = if seed.is_multiple_of(3) { &[3] } else { &[] };
    let arch = Architecture::mlp(3, &[5, 4], pred_hidden, Task::Classification { n_classes: classes });
    let mut model = ModelTriple::init(arch, seed).expect("valid");
    // Zero initial biases put whole rows exactly on ReLU kinks.
    for p in [&mut model.rep, &mut model.pred, &mut model.dup] {
        p.values_mut().iter_mut().for_each(|v| *v = rng.random_range(-1.0..1.0));
    }
    let x = matrix(&mut rng, 3, 3);
    let unlabeled = PseudoBatch::new(&model, &x).expect("non-empty");
    let batches = StepBatches {
        target: Some(labeled(&mut rng, 3, 3, classes)),
        unlabeled: Some(unlabeled),
        sources: vec![labeled(&mut rng, 2, 3, classes), labeled(&mut rng, 3, 3, classes)],
    };
    let a: f64 = rng.random_range(0.05..0.95);
    let weights = ObjectiveWeights {
        epsilon: rng.random_range(0.05..0.95),
        tau: rng.random_range(0.05..0.95),
        w1_sup_coef: rng.random_range(0.0..1.0),
        coef1: rng.random_range(0.0..1.0),
        coef2: rng.random_range(0.0..1.5),
    };
    let spec = &model.arch.representation;
    let masks = StepMasks {
        target: Some(spec.dropout_masks(3, 0.3, &mut rng)),
        unlabeled: Some(spec.dropout_masks(3, 0.3, &mut rng)),
        sources: vec![Some(spec.dropout_masks(2, 0.3, &mut rng)), Some(spec.dropout_masks(3, 0.3, &mut rng))],
    };
    (model, batches, vec![a, 1.0 - a], weights, masks)
}

fn block_mut(m: &mut ModelTriple, b: usize) -> &mut ParameterVector {
    match b {
        0 => &mut m.rep,
        1 => &mut m.pred,
        _ => &mut m.dup,
    }
}

/// Worst relative error of the penalized objective gradient for all three
/// blocks (the `v′` block carries no parameter-gradient penalty).
pub fn objective_gradient_error(seed: u64) -> Result<f64, risks::RiskError> {
    let (model, batches, alpha, w, masks) = random_instance(seed);
    let lam = 0.05 + (seed % 5) as f64 * 0.05;
    let (_, _, g) = risks::penalized_gradients(&model, &batches, &alpha, &w, Some(&masks), lam)?;
    let total = |m: &ModelTriple, with_penalty: bool| -> Result<f64, risks::RiskError> {
        let (v, gr) = risks::objective_gradients(m, &batches, &alpha, &w, Some(&masks))?;
        Ok(if with_penalty { v + lam * (gr.rep.squared_norm() + gr.pred.squared_norm()) } else { v })
    };
    let mut worst = 0.0f64;
    let mut probe = model.clone();
    for (b, analytic) in [&g.rep, &g.pred, &g.dup].into_iter().enumerate() {
        for i in 0..analytic.len() {
            let orig = block_mut(&mut probe, b).values()[i];
            block_mut(&mut probe, b).values_mut()[i] = orig + FD_STEP;
            let plus = total(&probe, b < 2)?;
            block_mut(&mut probe, b).values_mut()[i] = orig - FD_STEP;
            let minus = total(&probe, b < 2)?;
            block_mut(&mut probe, b).values_mut()[i] = orig;
            let fd = (plus - minus) / (2.0 * FD_STEP);
            worst = worst.max(relative_error(analytic.values()[i], fd));
        }
    }
    Ok(worst)
}

/// Worst relative error of the interpolation-penalty gradient in `v′`.
pub fn interp_gradient_error(seed: u64) -> Result<f64, risks::RiskError> {
    let (model, _, _, _, _) = random_instance(seed);
    let mut rng = seeding::stream(seed, 0xBEEF);
    let width = model.arch.predictor.input_width();
    let t = matrix(&mut rng, 3, width);
    let s = matrix(&mut rng, 4, width);
    let lambdas = risks::draw_lambdas(risks::pair_count(&t, &s), &mut rng);
    let spec = &model.arch.predictor;
    let (_, g) = risks::gradient_penalty_interp_grad(spec, &model.dup, &t, &s, &lambdas)?;
    let mut probe = model.dup.clone();
    let mut worst = 0.0f64;
    for i in 0..probe.len() {
        let orig = probe.values()[i];
        probe.values_mut()[i] = orig + FD_STEP;
        let plus = risks::gradient_penalty_interp_with(spec, &probe, &t, &s, &lambdas)?;
        probe.values_mut()[i] = orig - FD_STEP;
        let minus = risks::gradient_penalty_interp_with(spec, &probe, &t, &s, &lambdas)?;
        probe.values_mut()[i] = orig;
        worst = worst.max(relative_error(g.values()[i], (plus - minus) / (2.0 * FD_STEP)));
    }
    Ok(worst)
}

fn regression_pair(rng: &mut Rng, n: usize, d: usize) -> DiscreteMeasurePair {
    let mut side = |shift: f64| {
        (0..n)
            .map(|_| {
                let x = (0..d).map(|_| rng.random_range(-1.0..1.0) + shift).collect();
                LabeledPoint::new(x, rng.random_range(-1.0..1.0))
            })
            .collect()
    };
    let a = side(0.0);
    let b = side(0.5);
    DiscreteMeasurePair::new(a, b).expect("equal non-empty sizes")
}

fn regression_model(seed: u64, d: usize) -> ModelTriple {
    ModelTriple::init(Architecture::mlp(d, &[4], &[3], Task::Regression), seed).expect("valid")
}

fn outcome(name: &'static str, passed: bool, detail: String) -> CheckOutcome {
    CheckOutcome { name, passed, detail }
}

/// Runs every suite on `n` seeds each.
pub fn run_checks(n: u64) -> Vec<CheckOutcome> {
    let mut out = Vec::new();

    let mut worst = 0.0f64;
    let mut failure = None;
    for s in 0..n {
        let r = ops_gradient_error(s)
            .map_err(|e| e.to_string())
            .and_then(|a| Ok(a.max(objective_gradient_error(s).map_err(|e| e.to_string())?)))
            .and_then(|a| Ok(a.max(interp_gradient_error(s).map_err(|e| e.to_string())?)));
        match r {
            Ok(e) => worst = worst.max(e),
            Err(e) => failure = Some(e),
        }
    }
    out.push(match failure {
        Some(e) => outcome("gradients", false, e),
        None => outcome("gradients", worst < 1e-5, format!("worst relative error {worst:.2e}")),
    });

    let mut gap = f64::NEG_INFINITY;
    let mut ok = true;
    for s in 0..n {
        let mut rng = seeding::stream(s, 0xA1FA);
        let k = 2 + (s as usize % 2);
        let obj =
            AlphaObjective { c: (0..k).map(|_| rng.random_range(-1.0..1.0)).collect(), lambda_r: rng.random_range(0.0..5.0) };
        let m: Vec<usize> = (0..k).map(|_| rng.random_range(10..500)).collect();
        match (alpha_solver::solve_alpha(&obj, &m, alpha_solver::DEFAULT_TOLERANCE), alpha_solver::grid_oracle(&obj, &m, 0.005)) {
            (Ok(w), Ok((_, gv))) => gap = gap.max(obj.value(&w.alpha, &m) - gv),
            _ => ok = false,
        }
    }
    out.push(outcome("alpha solver vs grid", ok && gap <= 1e-6, format!("largest excess over grid {gap:.2e}")));

    let mut worst = f64::NEG_INFINITY;
    let mut ok = true;
    for s in 0..n {
        let mut rng = seeding::stream(s, 0x4B52);
        let pair = regression_pair(&mut rng, 1 + s as usize % 6, 2);
        match theory::kantorovich_check(&regression_model(s, 2), &pair, 1.0) {
            Ok(k) => worst = worst.max(k.normalized - k.w1),
            Err(_) => ok = false,
        }
    }
    out.push(outcome("critic below exact W1", ok && worst <= 1e-9, format!("largest excess {worst:.2e}")));

    let mut held = 0;
    for s in 0..n {
        let mut rng = seeding::stream(s, 0x7441);
        let model = regression_model(s, 2);
        let pair = regression_pair(&mut rng, 1 + s as usize % 5, 2);
        if let Ok(c) =
            model.certificate().map_err(theory::TheoryError::from).and_then(|cert| theory::check_risk_gap(&model, &pair, &cert))
        {
            held += c.holds as u64;
        }
    }
    out.push(outcome("risk gap below W1", held == n, format!("{held}/{n} instances hold")));

    let mut ledger = GradNormLedger::new();
    let mut rng = seeding::stream(n, 0x1ED6);
    let mut ok = true;
    for k in 1..=200 {
        for b in [Block::U, Block::V] {
            ok &= ledger.accumulate(k, b, rng.random_range(0.01..1.0), Some(1e-3), rng.random_range(0.0..10.0)).is_ok();
        }
    }
    let (du, dv) = GradNormLedger::replay(&ledger.log);
    out.push(outcome(
        "ledger replay",
        ok && du == ledger.delta_u && dv == ledger.delta_v,
        format!("delta_u {} delta_v {}", ledger.delta_u, ledger.delta_v),
    ));

    let mut ok = true;
    for s in 0..n {
        let len = 1 + s as usize * 7 % 50;
        match BatchStream::new(len, 8, s) {
            Ok(st) => {
                let mut seen: Vec<usize> = st.epoch(s).concat();
                seen.sort_unstable();
                ok &= seen == (0..len).collect::<Vec<_>>();
            }
            Err(_) => ok = false,
        }
    }
    out.push(outcome("batch coverage", ok, "every example once per epoch".into()));
    out
}
