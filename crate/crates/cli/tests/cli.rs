use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn imda(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_imda")).args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn write_config(dir: &Path, extra: &str) -> String {
    let path = dir.join("run.cfg");
    let text = format!(
        "mode = semi\nepochs = 2\nsynth.per_domain = 60\nsynth.target_labeled = 20\nsynth.target_test = 40\noutput_dir = {}\n{extra}",
        dir.join("out").display()
    );
    fs::write(&path, text).unwrap();
    path.display().to_string()
}

#[test]
fn run_then_bound_agree() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let o = imda(&["run", "--config", &cfg]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("target test accuracy"));
    for f in ["metrics.csv", "alpha.csv", "ledger.csv", "bound.csv"] {
        assert!(dir.path().join("out").join(f).exists(), "{f}");
    }
    let b = imda(&["bound", "--config", &cfg]);
    assert_eq!(b.status.code(), Some(0));
    let written = fs::read_to_string(dir.path().join("out/bound.csv")).unwrap();
    assert_eq!(stdout(&b).trim(), written.trim());
}

#[test]
fn overrides_apply() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let o = imda(&["run", "--config", &cfg, "--set", "epochs=1"]);
    assert!(o.status.success());
    let rows = fs::read_to_string(dir.path().join("out/metrics.csv")).unwrap();
    assert_eq!(rows.lines().count(), 3);
}

#[test]
fn bad_input_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "colour = blue\n");
    let o = imda(&["run", "--config", &cfg]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).starts_with("error:"));
    assert_eq!(imda(&["run", "--config", "/nonexistent.cfg"]).status.code(), Some(2));
    let clean = write_config(dir.path(), "");
    assert_eq!(imda(&["bound", "--config", &clean]).status.code(), Some(2));
}

#[test]
fn oracle_w1_prints_value_and_matching() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("pair.csv");
    fs::write(&path, "measure,y,x1\n0,0,0.0\n0,1,1.0\n1,0,0.5\n1,1,2.0\n").unwrap();
    let o = imda(&["oracle-w1", path.to_str().unwrap()]);
    assert!(o.status.success());
    let out = stdout(&o);
    // Straight matching costs 0.5 and 1.0; crossing costs 3.0 and 1.5.
    let w1: f64 = out.lines().next().unwrap().strip_prefix("w1,").unwrap().parse().unwrap();
    assert!((w1 - 0.75).abs() < 1e-12, "{out}");
    assert!(out.contains("match,0,0") && out.contains("match,1,1"));
    fs::write(&path, "measure,y,x1\n2,0,0.0\n").unwrap();
    assert_eq!(imda(&["oracle-w1", path.to_str().unwrap()]).status.code(), Some(2));
}

#[test]
fn check_passes() {
    let o = imda(&["check", "--seeds", "5"]);
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    assert!(stdout(&o).lines().all(|l| l.starts_with("PASS")));
}
