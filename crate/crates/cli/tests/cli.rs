use std::path::Path;
use std::process::{Command, Output};

fn ccd(root: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ccd")).arg("--run-root").arg(root).args(args).output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn text(o: &Output) -> String {
    format!("{}{}", String::from_utf8_lossy(&o.stdout), String::from_utf8_lossy(&o.stderr))
}

#[test]
fn gen_road_is_byte_identical_across_runs() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a.bin"), dir.path().join("b.bin"));
    for p in [&a, &b] {
        let o = ccd(dir.path(), &["--seed", "7", "--preset", "desk", "gen-road", "--out", p.to_str().unwrap()]);
        assert_eq!(code(&o), 0, "{}", text(&o));
    }
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    let other = dir.path().join("c.bin");
    let o = ccd(dir.path(), &["--seed", "8", "--preset", "desk", "gen-road", "--out", other.to_str().unwrap()]);
    assert_eq!(code(&o), 0);
    assert_ne!(std::fs::read(&a).unwrap(), std::fs::read(&other).unwrap());
}

#[test]
fn evaluate_names_the_missing_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nowhere").join("pi9.ckpt");
    let o = ccd(dir.path(), &["evaluate", "--checkpoint", missing.to_str().unwrap(), "--driver", "mild"]);
    assert_eq!(code(&o), 1);
    assert!(text(&o).contains(missing.to_str().unwrap()), "{}", text(&o));
}

#[test]
fn stage_without_its_inputs_is_a_validation_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = ccd(dir.path(), &["--preset", "desk", "train-ccd2", "--driver", "aggressive"]);
    assert_eq!(code(&o), 1, "{}", text(&o));
    assert!(text(&o).contains("pi1.ckpt"), "{}", text(&o));
}

#[test]
fn unknown_subcommand_prints_usage() {
    let dir = tempfile::tempdir().unwrap();
    let o = ccd(dir.path(), &["fly"]);
    assert_eq!(code(&o), 1);
    assert!(text(&o).to_lowercase().contains("usage"), "{}", text(&o));
    let o = ccd(dir.path(), &["--help"]);
    assert_eq!(code(&o), 0);
}

#[test]
fn unknown_config_key_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "seed = 3\n[first_ccd]\nlearning_rate = 0.1\n").unwrap();
    let o = ccd(dir.path(), &["--config", cfg.to_str().unwrap(), "--dry-run", "run"]);
    assert_eq!(code(&o), 1, "{}", text(&o));
}

#[test]
fn dry_run_prints_the_plan_and_touches_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().join("fresh");
    let o = ccd(&root, &["--preset", "desk", "--dry-run", "run"]);
    assert_eq!(code(&o), 0, "{}", text(&o));
    let out = String::from_utf8_lossy(&o.stdout);
    assert!(out.contains("config hash") && out.contains("step1"), "{out}");
    assert!(!root.exists());
}

const SMOKE: &str = r#"
drivers = ["mild"]

[warmstart]
dataset_episodes = 2
dataset_len = 200

[warmstart.bo]
budget = 8
n_init = 4
candidates = 100
local_candidates = 20

[warmstart.pretrain]
epochs = 3

[nets]
policy_hidden = [8]
value_hidden = [8]

[first_ccd]
max_epochs = 2
rollout_len = 200
episode_len = 100
minibatch = 64

[fine_tune]
max_epochs = 1
rollout_len = 200
episode_len = 100
minibatch = 64

[second_ccd]
max_epochs = 2
rollout_len = 200
episode_len = 100
minibatch = 64

[discrepancy.fit]
hidden = [8]
epochs = 1
stride = 20
"#;

#[test]
fn stages_chain_into_a_report() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("smoke.toml");
    std::fs::write(&cfg, SMOKE).unwrap();
    let root = dir.path().join("run");
    let c = cfg.to_str().unwrap();
    for args in [
        vec!["gen-road"],
        vec!["warmstart"],
        vec!["train-ccd1"],
        vec!["deploy", "--driver", "mild"],
        vec!["fit-discrepancy", "--driver", "mild"],
        vec!["train-ccd2", "--driver", "mild"],
        vec!["report"],
    ] {
        let mut full = vec!["--preset", "desk", "--config", c];
        full.extend(args.iter());
        let o = ccd(&root, &full);
        assert_eq!(code(&o), 0, "{args:?}: {}", text(&o));
    }
    let report = std::fs::read_to_string(root.join("report.csv")).unwrap();
    let mut lines = report.lines();
    assert_eq!(lines.next(), Some("driver,metric,before,after,improvement_pct"));
    let rows: Vec<Vec<&str>> = lines.map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 2);
    for r in &rows {
        assert_eq!(r[0], "mild");
        let (b, a, imp): (f64, f64, f64) = (r[2].parse().unwrap(), r[3].parse().unwrap(), r[4].parse().unwrap());
        assert!((imp - 100.0 * (b - a).abs() / b).abs() < 1e-9 * imp.max(1.0));
    }
    assert_eq!(rows[0][1], "rms_heave_acc");
    assert_eq!(rows[1][1], "mean_abs_u");

    // Evaluating a produced checkpoint writes its trace and metrics.
    let trace = dir.path().join("pi3.csv");
    let o = ccd(&root, &["--preset", "desk", "--config", c, "evaluate", "--checkpoint", root.join("mild/step3/pi3.ckpt").to_str().unwrap(), "--driver", "mild", "--out", trace.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", text(&o));
    assert!(trace.exists() && trace.with_extension("json").exists());

    // Reporting twice overwrites with identical content.
    let o = ccd(&root, &["--preset", "desk", "--config", c, "report"]);
    assert_eq!(code(&o), 0);
    assert_eq!(std::fs::read_to_string(root.join("report.csv")).unwrap(), report);
}
