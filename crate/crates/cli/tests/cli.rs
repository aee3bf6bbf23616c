use std::path::Path;
use std::process::Command;

const SMALL: &[&str] = &[
    "--set",
    "grid.half_width=6.0",
    "--set",
    "grid.dx=0.5",
    "--set",
    "grid.dt=0.05",
    "--set",
    "grid.na=8",
    "--set",
    "noise.realizations=20",
];

fn spdelab(args: &[&str], out: &Path) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_spdelab"))
        .args(args)
        .args(SMALL)
        .arg("--out")
        .arg(out)
        .output()
        .unwrap()
}

fn summary(out: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(out.join("summary.json")).unwrap()).unwrap()
}

#[test]
fn convergence_writes_table_and_summary() {
    let dir = tempfile::tempdir().unwrap();
    let o = spdelab(&["convergence", "--seed", "5"], dir.path());
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let s = summary(dir.path());
    assert_eq!(s["root_seed"], 5);
    assert_eq!(s["command"], "convergence");
    assert_eq!(s["config"]["grid"]["dx"], 0.5);
    let table = std::fs::read_to_string(dir.path().join("convergence.csv")).unwrap();
    assert!(table.contains("epsilon,realizations,mean_dev_sq,std_error"));
    assert!(table.contains(&format!("# config_hash={}", s["config_hash"].as_str().unwrap())));
}

#[test]
fn reruns_are_bit_identical() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    for d in [&a, &b] {
        assert!(spdelab(&["ldp-scan", "--set", "experiment.deltas=[0.01, 0.05]"], d.path()).status.success());
    }
    assert_eq!(summary(a.path())["outputs"], summary(b.path())["outputs"]);
}

#[test]
fn minimize_output_feeds_rate() {
    let dir = tempfile::tempdir().unwrap();
    let args = ["--set", "experiment.deltas=[0.2]", "--set", "experiment.penalty_weights=[10.0, 100.0]"];
    let o = spdelab(&[&["minimize"][..], &args].concat(), dir.path());
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let i_star = summary(dir.path())["results"]["i_star"].as_f64().unwrap();
    assert!(i_star > 0.0);
    let control = dir.path().join("control.csv");
    let rate_dir = dir.path().join("rate");
    let o = spdelab(&["rate", "--control", control.to_str().unwrap()], &rate_dir);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let energy = summary(&rate_dir)["results"]["i_energy"].as_f64().unwrap();
    assert!((energy - i_star).abs() <= 1e-9 * i_star);
}

#[test]
fn every_subcommand_runs() {
    for cmd in [
        &["simulate"][..],
        &["particles", "--set", "model.epsilon=0.1"],
        &["compare", "--self-check", "--set", "experiment.times=[0.5, 1.0]"],
        &["metrics"],
    ] {
        let dir = tempfile::tempdir().unwrap();
        let o = spdelab(cmd, dir.path());
        assert!(o.status.success(), "{cmd:?}: {}", String::from_utf8_lossy(&o.stderr));
        assert!(dir.path().join("summary.json").exists());
    }
    let dir = tempfile::tempdir().unwrap();
    let o = spdelab(&["kolmogorov", "--set", "model.epsilon=1.0", "--set", "experiment.pair_count=8"], dir.path());
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn bad_override_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let o = spdelab(&["simulate", "--set", "grid.nonsense=1"], dir.path());
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("nonsense"));
}
