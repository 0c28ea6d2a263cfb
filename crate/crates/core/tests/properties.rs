use imda_core::alpha_solver::{self, AlphaObjective};
use imda_core::data::{apply_target_shift, LabeledBatch, ShiftTarget, Targets};
use imda_core::diffcore::{DenseMatrix, Graph, ParameterVector};
use imda_core::models::{lipschitz_upper_bound, spectral_norm};
use imda_core::optimizer::{self, Schedule};
use imda_core::risks::{self, PseudoBatch, StepBatches};
use imda_core::seeding;
use imda_core::theory::{self, DiscreteMeasurePair, LabelLoss, LabeledPoint};
use imda_core::{
    Architecture, BoundConstants, GroundMetric, ModelTriple, ObjectiveWeights, RiskBreakdown, ShiftSpec, SyntheticBenchmark, Task,
};
use proptest::prelude::*;
use rand::Rng as _;

fn matrix(rng: &mut seeding::Rng, rows: usize, cols: usize) -> DenseMatrix {
    DenseMatrix::new(rows, cols, (0..rows * cols).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap()
}

fn classifier(seed: u64) -> ModelTriple {
    ModelTriple::init(Architecture::mlp(3, &[6, 4], &[], Task::Classification { n_classes: 3 }), seed).unwrap()
}

fn labeled(rng: &mut seeding::Rng, n: usize) -> LabeledBatch {
    LabeledBatch { x: matrix(rng, n, 3), y: Targets::Classes((0..n).map(|_| rng.random_range(0..3)).collect()) }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn negate_gradient_forward_is_bit_identical(seed in any::<u64>(), lambda in 0.0f64..5.0) {
        let mut rng = seeding::stream(seed, 1);
        let x = matrix(&mut rng, 3, 4);
        let (w, b) = (matrix(&mut rng, 4, 2), matrix(&mut rng, 1, 2));
        let run = |reverse: bool| {
            let mut g = Graph::<f64>::new();
            let xin = g.input();
            let (wn, bn) = (g.parameter(w.clone()), g.parameter(b.clone()));
            let mut z = g.affine(xin, wn, bn);
            if reverse {
                z = g.negate_gradient(z, lambda);
            }
            let z = g.relu(z);
            g.mean(z);
            g.forward(&[(xin, x.clone())]).unwrap().values()[0].to_bits()
        };
        prop_assert_eq!(run(false), run(true));
    }

    #[test]
    fn flatten_unflatten_round_trips(shapes in prop::collection::vec((1usize..5, 1usize..5), 1..6), seed in any::<u64>()) {
        let mut rng = seeding::stream(seed, 2);
        let mats: Vec<DenseMatrix> = shapes.iter().map(|&(r, c)| matrix(&mut rng, r, c)).collect();
        let p = ParameterVector::flatten(&mats);
        prop_assert_eq!(p.unflatten(), mats);
        prop_assert!(p.squared_norm() >= 0.0);
    }

    #[test]
    fn reassembly_matches_combined(eps in 0.0f64..=1.0, tau in 0.0f64..=1.0, w in 0.0f64..1.0, seed in 0u64..1000) {
        let mut rng = seeding::stream(seed, 3);
        let model = classifier(seed);
        let weights = ObjectiveWeights { epsilon: eps, tau, w1_sup_coef: w, coef1: 0.06, coef2: 1.2 };
        let x = matrix(&mut rng, 4, 3);
        let batches = StepBatches {
            target: Some(labeled(&mut rng, 3)),
            unlabeled: Some(PseudoBatch::new(&model, &x).unwrap()),
            sources: vec![labeled(&mut rng, 4), labeled(&mut rng, 2)],
        };
        let b = risks::combined_objective(&model, &batches, &[0.3, 0.7], &weights).unwrap();
        prop_assert!((b.recombine() - b.combined).abs() <= 1e-12);
        let again = RiskBreakdown::reassemble(&weights, b.target_risk, b.combined_source_risk, b.w1_supervised, b.w1_pseudo);
        prop_assert!((again - b.combined).abs() <= 1e-12);
    }

    #[test]
    fn source_risk_is_affine_in_alpha(a in 0.0f64..=1.0, b in 0.0f64..=1.0, t in 0.0f64..=1.0, seed in 0u64..1000) {
        let mut rng = seeding::stream(seed, 4);
        let model = classifier(seed);
        let sources = vec![labeled(&mut rng, 3), labeled(&mut rng, 5)];
        let risk = |x: f64| risks::empirical_risk_sources(&model, &sources, &[x, 1.0 - x]).unwrap().0;
        let mixed = risk(t * a + (1.0 - t) * b);
        prop_assert!((mixed - (t * risk(a) + (1.0 - t) * risk(b))).abs() <= 1e-12);
    }

    #[test]
    fn pseudo_labels_are_a_function_of_parameters_and_batch(seed in 0u64..1000) {
        let mut rng = seeding::stream(seed, 5);
        let model = classifier(seed);
        let x = matrix(&mut rng, 6, 3);
        let a = PseudoBatch::new(&model, &x).unwrap();
        let b = PseudoBatch::new(&model.clone(), &x.clone()).unwrap();
        prop_assert_eq!(&a, &b);
        let swapped = ModelTriple { pred: model.dup.clone(), dup: model.pred.clone(), ..model.clone() };
        let s = PseudoBatch::new(&swapped, &x).unwrap();
        prop_assert_eq!(s.labels, a.dup_labels);
        prop_assert_eq!(s.dup_labels, a.labels);
    }

    #[test]
    fn representation_respects_its_certificate(seed in 0u64..1000) {
        let mut rng = seeding::stream(seed, 6);
        let model = ModelTriple::init(Architecture::mlp(3, &[5, 4], &[2], Task::Regression), seed).unwrap();
        let k = model.certificate().unwrap().k;
        let x = matrix(&mut rng, 16, 3);
        let y = matrix(&mut rng, 16, 3);
        let (fx, fy) = (model.represent(&x).unwrap(), model.represent(&y).unwrap());
        let dist = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(p, q)| (p - q) * (p - q)).sum::<f64>().sqrt();
        for i in 0..16 {
            prop_assert!(dist(fx.row(i), fy.row(i)) <= k * dist(x.row(i), y.row(i)) * (1.0 + 1e-12));
        }
    }

    #[test]
    fn power_iteration_bounds_the_top_singular_value(seed in any::<u64>(), cols in 1usize..6) {
        let mut rng = seeding::stream(seed, 7);
        let w = matrix(&mut rng, 2, cols);
        // Largest eigenvalue of the 2×2 Gram matrix W Wᵀ in closed form.
        let g = w.matmul_t(&w);
        let (p, q, r) = (g.get(0, 0), g.get(0, 1), g.get(1, 1));
        let top = ((p + r) / 2.0 + (((p - r) / 2.0).powi(2) + q * q).sqrt()).sqrt();
        let est = spectral_norm(&w).unwrap();
        prop_assert!(est >= top * (1.0 - 1e-12));
        prop_assert!((est - top) / top.max(1e-300) <= 1e-6);
    }

    #[test]
    fn alpha_objective_is_convex(seed in any::<u64>(), t in 0.0f64..=1.0) {
        let mut rng = seeding::stream(seed, 8);
        let n = 2 + (seed % 3) as usize;
        let obj = AlphaObjective { c: (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(), lambda_r: rng.random_range(0.0..5.0) };
        let m: Vec<usize> = (0..n).map(|_| rng.random_range(1..500)).collect();
        let mut point = || {
            let raw: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
            let s: f64 = raw.iter().sum();
            raw.into_iter().map(|v| v / s).collect::<Vec<_>>()
        };
        let (a, b) = (point(), point());
        let mix: Vec<f64> = a.iter().zip(&b).map(|(x, y)| t * x + (1.0 - t) * y).collect();
        prop_assert!(obj.value(&mix, &m) <= t * obj.value(&a, &m) + (1.0 - t) * obj.value(&b, &m) + 1e-12);
    }

    #[test]
    fn solver_output_is_on_the_simplex_and_scale_invariant(seed in any::<u64>(), scale in 0.1f64..10.0) {
        let mut rng = seeding::stream(seed, 9);
        let n = 2 + (seed % 3) as usize;
        let obj = AlphaObjective { c: (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(), lambda_r: rng.random_range(0.1..5.0) };
        let m: Vec<usize> = (0..n).map(|_| rng.random_range(1..500)).collect();
        let w = alpha_solver::solve_alpha(&obj, &m, alpha_solver::DEFAULT_TOLERANCE).unwrap();
        prop_assert!(alpha_solver::check_simplex(&w.alpha).is_ok());
        let scaled = AlphaObjective { c: obj.c.iter().map(|c| c * scale).collect(), lambda_r: obj.lambda_r * scale };
        let v = alpha_solver::solve_alpha(&scaled, &m, alpha_solver::DEFAULT_TOLERANCE).unwrap();
        // Same minimizer, so the unscaled objective agrees at both outputs.
        prop_assert!((obj.value(&v.alpha, &m) - obj.value(&w.alpha, &m)).abs() <= 1e-7);
    }

    #[test]
    fn projection_lands_on_the_simplex(point in prop::collection::vec(-5.0f64..5.0, 1..8)) {
        let p = alpha_solver::simplex_project(&point).unwrap();
        prop_assert!(alpha_solver::check_simplex(&p).is_ok());
    }
}

fn measure(rng: &mut seeding::Rng, n: usize) -> Vec<LabeledPoint> {
    (0..n)
        .map(|_| {
            LabeledPoint::new(
                vec![rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)],
                rng.random_range(0.0f64..2.0).round(),
            )
        })
        .collect()
}

#[test]
fn exact_w1_is_a_metric() {
    let metric = GroundMetric::new(LabelLoss::Absolute, 1.3).unwrap();
    let w = |a: &[LabeledPoint], b: &[LabeledPoint]| {
        theory::exact_w1(&DiscreteMeasurePair::new(a.to_vec(), b.to_vec()).unwrap(), &metric).unwrap()
    };
    for seed in 0..200 {
        let mut rng = seeding::stream(seed, 10);
        let n = 1 + seed as usize % 5;
        let (a, b, c) = (measure(&mut rng, n), measure(&mut rng, n), measure(&mut rng, n));
        assert!((w(&a, &b) - w(&b, &a)).abs() <= 1e-9);
        assert!(w(&a, &a).abs() <= 1e-9);
        assert!(w(&a, &c) <= w(&a, &b) + w(&b, &c) + 1e-9);
        let mut shuffled = a.clone();
        shuffled.reverse();
        assert!(w(&a, &shuffled).abs() <= 1e-9);
    }
}

#[test]
fn zero_one_label_loss_on_equal_labels_reduces_to_features() {
    let metric = GroundMetric::new(LabelLoss::ZeroOne, 2.0).unwrap();
    let a = vec![LabeledPoint::new(vec![0.0], 1.0)];
    let b = vec![LabeledPoint::new(vec![3.0], 1.0)];
    let w = theory::exact_w1(&DiscreteMeasurePair::new(a, b).unwrap(), &metric).unwrap();
    assert_eq!(w, 6.0);
}

#[test]
fn identity_representation_keeps_w1_and_contraction_shrinks_it() {
    let arch = Architecture::mlp(2, &[2], &[], Task::Regression);
    let mut model = ModelTriple::init(arch, 0).unwrap();
    // First layer W = c·I, b = 0 on non-negative inputs.
    for c in [1.0, 0.5] {
        let layer = ParameterVector::flatten(&[DenseMatrix::new(2, 2, vec![c, 0.0, 0.0, c]).unwrap(), DenseMatrix::zeros(1, 2)]);
        model.rep = layer;
        for seed in 0..20 {
            let mut rng = seeding::stream(seed, 11);
            let mut side = || -> Vec<LabeledPoint> {
                (0..4)
                    .map(|_| {
                        LabeledPoint::new(
                            vec![rng.random_range(0.0..2.0), rng.random_range(0.0..2.0)],
                            rng.random_range(0.0..1.0),
                        )
                    })
                    .collect()
            };
            let pair = DiscreteMeasurePair::new(side(), side()).unwrap();
            let metric = GroundMetric::new(LabelLoss::Absolute, 1.0).unwrap();
            let raw = theory::exact_w1(&pair, &metric).unwrap();
            let rep = theory::exact_w1(&pair.represent(&model).unwrap(), &metric).unwrap();
            if c == 1.0 {
                assert!((raw - rep).abs() <= 1e-12);
            } else {
                assert!(rep <= raw + 1e-12);
            }
        }
    }
}

#[test]
fn certified_constants_never_report_a_violation() {
    for seed in 0..60 {
        let mut rng = seeding::stream(seed, 12);
        let n = 1 + seed as usize % 6;
        let pair = DiscreteMeasurePair::new(measure(&mut rng, n), measure(&mut rng, n)).unwrap();
        let model = ModelTriple::init(Architecture::mlp(2, &[4, 4], &[3], Task::Regression), seed).unwrap();
        let cert = model.certificate().unwrap();
        let c = theory::check_risk_gap(&model, &pair, &cert).unwrap();
        assert!(c.holds, "seed {seed}: {c:?}");
        assert!(lipschitz_upper_bound(&model.arch.representation, &model.rep).unwrap() <= cert.k * (1.0 + 1e-12));
    }
}

#[test]
fn bounds_are_monotone_in_every_input() {
    let base = BoundConstants {
        sigma: 0.5,
        m_t: 40,
        m_t_prime: 300,
        m: vec![100, 250],
        alpha: vec![0.3, 0.7],
        epsilon: 0.4,
        tau: 0.6,
        delta_u: 1.0,
        delta_v: 2.0,
        r_star: 0.1,
        r_star_rep: 0.05,
    };
    let steps = [0.0, 0.5, 1.0, 4.0, 9.0];
    for w in steps.windows(2) {
        let (lo, hi) = (w[0], w[1]);
        assert!(
            theory::supervised_gap_bound(&base, lo, 1.0).unwrap().total
                <= theory::supervised_gap_bound(&base, hi, 1.0).unwrap().total
        );
        assert!(
            theory::supervised_gap_bound(&base, 1.0, lo).unwrap().total
                <= theory::supervised_gap_bound(&base, 1.0, hi).unwrap().total
        );
        assert!(
            theory::unsupervised_gap_bound(&base, lo).unwrap().total <= theory::unsupervised_gap_bound(&base, hi).unwrap().total
        );
        let with = |f: &dyn Fn(&mut BoundConstants, f64), v: f64| {
            let mut k = base.clone();
            f(&mut k, v);
            (theory::supervised_gap_bound(&k, 1.0, 1.0).unwrap().total, theory::ledger_bound(&k, 0.3).unwrap().total)
        };
        for f in [
            &(|k: &mut BoundConstants, v: f64| k.sigma = v) as &dyn Fn(&mut BoundConstants, f64),
            &|k, v| k.delta_u = v,
            &|k, v| k.delta_v = v,
        ] {
            let (a, b) = (with(f, lo), with(f, hi));
            assert!(a.0 <= b.0 && a.1 <= b.1);
        }
    }
}

#[test]
fn uniform_weights_shrink_the_unsupervised_gap_as_sources_grow() {
    let gap = |n: usize| {
        let k = BoundConstants {
            sigma: 1.0,
            m_t: 1,
            m_t_prime: 1000,
            m: vec![200; n],
            alpha: vec![1.0 / n as f64; n],
            epsilon: 0.5,
            tau: 0.0,
            delta_u: 0.0,
            delta_v: 0.0,
            r_star: 0.0,
            r_star_rep: 0.0,
        };
        assert!((k.concentration() - 1.0 / (200.0 * n as f64)).abs() < 1e-15);
        theory::unsupervised_gap_bound(&k, 1.0).unwrap().total
    };
    assert!(gap(1) > gap(2) && gap(2) > gap(5));
}

#[test]
fn datasets_are_reproducible_and_source_shift_keeps_the_target() {
    let bench = SyntheticBenchmark { per_domain: 300, target_labeled: 20, target_test: 100, ..Default::default() };
    let a = bench.build(9).unwrap();
    assert_eq!(a, bench.build(9).unwrap());
    assert_ne!(a, bench.build(10).unwrap());
    let unshifted = SyntheticBenchmark { drop_rate: 0.0, ..bench.clone() }.build(9).unwrap();
    let shifted =
        apply_target_shift(&unshifted, &ShiftSpec { drop_classes: vec![0], rate: 0.7, apply_to: ShiftTarget::Sources, seed: 3 })
            .unwrap();
    assert_eq!(shifted.target_labeled, unshifted.target_labeled);
    assert_eq!(shifted.target_unlabeled, unshifted.target_unlabeled);
    assert_eq!(shifted.target_test, unshifted.target_test);
    for (s, u) in shifted.sources.iter().zip(&unshifted.sources) {
        assert!(s.class_counts(2)[0] < u.class_counts(2)[0]);
        assert_eq!(s.class_counts(2)[1], u.class_counts(2)[1]);
    }
}

#[test]
fn noiseless_descent_on_a_quadratic_never_increases() {
    // f(p) = ½ Σ d_i p_i² with curvatures below 1/η.
    let d = [0.5, 1.0, 3.0, 7.0];
    let eta = 0.1;
    let f = |p: &ParameterVector| p.values().iter().zip(d).map(|(x, d)| 0.5 * d * x * x).sum::<f64>();
    let mut p = ParameterVector::flatten(&[DenseMatrix::new(1, 4, vec![1.0, -2.0, 0.5, 3.0]).unwrap()]);
    let mut rng = seeding::stream(0, seeding::streams::NOISE);
    let mut prev = f(&p);
    for _ in 0..200 {
        let g =
            ParameterVector::flatten(&[DenseMatrix::new(1, 4, p.values().iter().zip(d).map(|(x, d)| d * x).collect()).unwrap()]);
        p = optimizer::sgld_step(&p, &g, eta, None, &mut rng).unwrap();
        let now = f(&p);
        assert!(now <= prev);
        prev = now;
    }
    assert!(prev < 1e-6);
}

#[test]
fn constant_and_list_schedules() {
    let s: Schedule = "0.5".parse().unwrap();
    assert_eq!(s.at(1), 0.5);
    let l: Schedule = "0.3,0.2,0.1".parse().unwrap();
    assert_eq!((l.at(1), l.at(3), l.at(10)), (0.3, 0.1, 0.1));
}
