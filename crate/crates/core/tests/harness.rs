use imda_core::harness::{self, ConfigError, ExperimentConfig, RunError, ALPHA_FILE, BOUND_FILE, LEDGER_FILE, METRICS_FILE};
use imda_core::risks::RiskBreakdown;

const SMALL: &str = "synth.per_domain = 80\nsynth.target_labeled = 20\nsynth.target_test = 60\nbatch_size = 10\n";

fn cfg(extra: &str) -> ExperimentConfig {
    ExperimentConfig::parse(&format!("{SMALL}{extra}"), &[]).unwrap()
}

#[test]
fn zero_epochs_records_the_initial_row_only() {
    let out = harness::run(&cfg("mode = semi\nepochs = 0\n")).unwrap();
    assert_eq!(out.metrics.len(), 1);
    assert_eq!(out.metrics[0].epoch, 0);
}

#[test]
fn one_row_per_epoch_plus_the_initial_one() {
    for mode in ["supervised", "unsupervised", "semi"] {
        let out = harness::run(&cfg(&format!("mode = {mode}\nepochs = 3\n"))).unwrap();
        let epochs: Vec<usize> = out.metrics.iter().map(|m| m.epoch).collect();
        assert_eq!(epochs, vec![0, 1, 2, 3], "{mode}");
    }
}

#[test]
fn metrics_file_reassembles_the_combined_risk() {
    let dir = tempfile::tempdir().unwrap();
    for mode in ["supervised", "unsupervised", "semi"] {
        let c = cfg(&format!("mode = {mode}\nepochs = 2\n"));
        let out = harness::run(&c).unwrap();
        let sub = dir.path().join(mode);
        harness::write_outputs(&sub, &out).unwrap();
        let rows = harness::read_metrics_csv(&sub.join(METRICS_FILE)).unwrap();
        assert_eq!(rows.len(), 3);
        for r in &rows {
            let w = imda_core::risks::ObjectiveWeights {
                epsilon: r.epsilon,
                tau: r.tau,
                w1_sup_coef: r.w1_sup_coef,
                ..c.objective_weights()
            };
            let again = RiskBreakdown::reassemble(&w, r.target_risk, r.combined_source_risk, r.w1_supervised, r.w1_pseudo);
            assert!((again - r.combined).abs() <= 1e-9 * r.combined.abs().max(1.0), "{mode} epoch {}", r.epoch);
        }
    }
}

#[test]
fn alpha_rows_stay_on_the_simplex() {
    let out = harness::run(&cfg("mode = semi\nepochs = 4\nsynth.source_angles = 10,40,70\n")).unwrap();
    for m in &out.metrics {
        assert_eq!(m.alpha.len(), 3);
        assert!(m.alpha.iter().all(|&a| a >= 0.0));
        assert!((m.alpha.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
    let dir = tempfile::tempdir().unwrap();
    harness::write_outputs(dir.path(), &out).unwrap();
    let text = std::fs::read_to_string(dir.path().join(ALPHA_FILE)).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap(), "epoch,alpha_1,alpha_2,alpha_3,lambda_r");
    assert_eq!(lines.count(), 5);
}

#[test]
fn same_seed_same_run() {
    let c = cfg("mode = semi\nepochs = 2\nseed = 11\n");
    let a = harness::run(&c).unwrap();
    let b = harness::run(&c).unwrap();
    assert_eq!(a.model, b.model);
    assert_eq!(a.metrics, b.metrics);
    let other = harness::run(&cfg("mode = semi\nepochs = 2\nseed = 12\n")).unwrap();
    assert_ne!(a.model, other.model);
}

#[test]
fn unsupervised_runs_never_read_target_labels() {
    let c = cfg("mode = unsupervised\nepochs = 2\n");
    let ds = harness::load_dataset(&c).unwrap();
    let mut scrambled = ds.clone();
    for l in &mut scrambled.target_labeled.labels {
        *l = (*l + 1) % ds.n_classes;
    }
    let a = harness::run_on(&c, &ds, &mut |_, _| {}).unwrap();
    let b = harness::run_on(&c, &scrambled, &mut |_, _| {}).unwrap();
    assert_eq!(a.model, b.model);
    assert_eq!(a.metrics, b.metrics);
}

#[test]
fn supervised_runs_never_read_unlabeled_target() {
    let c = cfg("mode = supervised\nepochs = 2\n");
    let ds = harness::load_dataset(&c).unwrap();
    let mut poisoned = ds.clone();
    let (rows, cols) = (poisoned.target_unlabeled.features.rows(), poisoned.target_unlabeled.features.cols());
    assert!(rows > 0);
    for i in 0..rows {
        for j in 0..cols {
            poisoned.target_unlabeled.features.set(i, j, f64::NAN);
        }
    }
    let a = harness::run_on(&c, &ds, &mut |_, _| {}).unwrap();
    let b = harness::run_on(&c, &poisoned, &mut |_, _| {}).unwrap();
    assert_eq!(a.model, b.model);
    assert_eq!(a.metrics, b.metrics);
}

#[test]
fn bound_rebuilt_from_files_matches_the_run() {
    let dir = tempfile::tempdir().unwrap();
    let c = cfg(&format!("mode = semi\nepochs = 2\noutput_dir = {}\n", dir.path().display()));
    let out = harness::run(&c).unwrap();
    harness::write_outputs(dir.path(), &out).unwrap();
    let rebuilt = harness::bound_from_outputs(&c, dir.path()).unwrap();
    let direct = out.bound.unwrap();
    for ((n1, v1), (n2, v2)) in rebuilt.rows().into_iter().zip(direct.rows()) {
        assert_eq!(n1, n2);
        assert!((v1 - v2).abs() <= 1e-12 * v2.abs().max(1.0), "{n1}: {v1} vs {v2}");
    }
}

#[test]
fn noiseless_runs_write_no_ledger_or_bound() {
    let dir = tempfile::tempdir().unwrap();
    let c = cfg("mode = supervised\nepochs = 1\nnoiseless = true\nalpha = uniform\n");
    let out = harness::run(&c).unwrap();
    assert!(out.ledger.is_none() && out.bound.is_none());
    harness::write_outputs(dir.path(), &out).unwrap();
    assert!(dir.path().join(METRICS_FILE).exists());
    assert!(!dir.path().join(LEDGER_FILE).exists());
    assert!(!dir.path().join(BOUND_FILE).exists());
    let err = harness::bound_from_outputs(&c, dir.path()).unwrap_err();
    assert!(matches!(err, RunError::MissingLedger { .. }));
    assert_eq!(err.exit_code(), 2);
}

#[test]
fn noiseless_alpha_learning_needs_an_override() {
    let c = cfg("mode = semi\nepochs = 1\nnoiseless = true\n");
    let err = harness::run(&c).unwrap_err();
    assert_eq!(err.exit_code(), 2);
    let ok = cfg("mode = semi\nepochs = 1\nnoiseless = true\nlambda_r_override = 0.1\n");
    assert!(harness::run(&ok).is_ok());
}

#[test]
fn config_errors() {
    let parse = |t: &str| ExperimentConfig::parse(t, &[]);
    assert!(matches!(parse("epochs = 3"), Err(ConfigError::MissingMode)));
    assert!(matches!(parse("mode = semi\nfoo = 1"), Err(ConfigError::UnknownKey(_))));
    assert!(matches!(parse("mode = semi\nepochs"), Err(ConfigError::Syntax { line: 2, .. })));
    assert!(matches!(parse("mode = supervised\ntau = 0.5"), Err(ConfigError::ModeConflict { .. })));
    assert!(matches!(parse("mode = unsupervised\ntau = 0.5"), Err(ConfigError::ModeConflict { .. })));
    assert!(matches!(parse("mode = semi\nc0 = 1\nw1_discri_coef2 = 2"), Err(ConfigError::AliasConflict(..))));
    assert!(parse("mode = semi\nepsilon = 1.5").is_err());
    assert!(parse("mode = semi\nbatch_size = 0").is_err());
    assert!(parse("mode = semi\nepochs = many").is_err());
    let over = ExperimentConfig::parse("mode = semi\nepochs = 3", &["epochs=7".into()]).unwrap();
    assert_eq!(over.epochs, 7);
    let missing = ExperimentConfig::load(std::path::Path::new("/nonexistent/imda.cfg"), &[]);
    assert!(matches!(missing, Err(ConfigError::Io { .. })));
}
