use std::path::Path;
use std::process::Command as Proc;

use featadapt::experiments::{self, config::RunConfig, Command};

fn cfg(out: &Path) -> RunConfig {
    RunConfig {
        output_dir: out.to_path_buf(),
        ..RunConfig::default()
    }
}

#[test]
fn pretrain_clears_gate_and_checkpoint_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let a = experiments::cmd_pretrain(&cfg(&dir.path().join("a"))).unwrap();
    let b = experiments::cmd_pretrain(&cfg(&dir.path().join("b"))).unwrap();
    assert!(a.passed());
    assert!(a.metric("source", "test_accuracy").unwrap() >= 0.95);
    assert_eq!(a.manifest.metrics, b.manifest.metrics);
    let ca = std::fs::read(dir.path().join("a/checkpoints/source.json")).unwrap();
    let cb = std::fs::read(dir.path().join("b/checkpoints/source.json")).unwrap();
    assert_eq!(ca, cb);
    assert!(experiments::verify_dir(&dir.path().join("a")).unwrap().is_empty());
}

#[test]
fn pretrain_gate_failure_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let c = RunConfig {
        pretrain_epochs: 1,
        accuracy_gate: 1.0,
        cluster_std: 2.0,
        ..cfg(dir.path())
    };
    let err = experiments::cmd_pretrain(&c).unwrap_err();
    assert!(matches!(err, featadapt::Error::Gate { .. }), "{err}");
    assert!(!dir.path().join("checkpoints/source.json").exists());
}

#[test]
fn unwritable_output_dir_fails_before_training() {
    let dir = tempfile::tempdir().unwrap();
    let blocker = dir.path().join("file");
    std::fs::write(&blocker, b"x").unwrap();
    // a path below a regular file can never be created
    let c = RunConfig {
        pretrain_epochs: 100_000,
        ..cfg(&blocker.join("out"))
    };
    let t = std::time::Instant::now();
    let err = experiments::cmd_pretrain(&c).unwrap_err();
    assert!(matches!(err, featadapt::Error::Io { .. }), "{err}");
    assert!(t.elapsed().as_secs_f64() < 1.0);
}

#[test]
fn forgetting_table_shows_the_expected_pattern_and_reruns_identically() {
    let dir = tempfile::tempdir().unwrap();
    let a = experiments::cmd_forgetting(&cfg(&dir.path().join("a"))).unwrap();
    let b = experiments::cmd_forgetting(&cfg(&dir.path().join("b"))).unwrap();
    assert!(a.passed(), "{:?}", a.manifest.failures);
    let m = |r: &str, k: &str| a.metric(r, k).unwrap();
    assert!(m("full-ft", "acc_seen") > m("frozen", "acc_seen"));
    assert!(m("input-shift", "acc_unseen").min(m("input-shift", "acc_seen")) > m("full-ft", "acc_unseen").min(m("full-ft", "acc_seen")));
    for f in ["metrics.csv", "report.txt", "table.csv", "checkpoints/input-shift.json"] {
        assert_eq!(
            std::fs::read(dir.path().join("a").join(f)).unwrap(),
            std::fs::read(dir.path().join("b").join(f)).unwrap(),
            "{f} differs between reruns"
        );
    }
    assert_eq!(a.manifest.metrics, b.manifest.metrics);
}

#[test]
fn compare_reports_budgets_residuals_and_identity_at_init() {
    let dir = tempfile::tempdir().unwrap();
    let out = experiments::cmd_compare(&cfg(dir.path())).unwrap();
    assert!(out.passed(), "{:?}", out.manifest.failures);
    let v = |r: &str, k: &str| out.metric(r, k).unwrap();
    assert!(v("budget", "vefa") < v("budget", "lorfa_r2") && v("budget", "lorfa_r2") < v("budget", "lora_r2"));
    for a in ["lora(r=2)", "lorfa(r=2)", "vefa", "input-shift", "full-ft", "linear-probe"] {
        assert!(v(a, "init_max_dev") <= 1e-12, "{a}");
    }
    assert!(v("lorfa(r=2)", "colspace_residual") <= 1e-8);
    assert!(v("vefa", "colspace_residual") <= 1e-8);
    assert!(v("probe", "lora(r=2)_residual") > 1e-6);

    // one worker gives the same table as four
    let dir1 = tempfile::tempdir().unwrap();
    let serial = experiments::cmd_compare(&RunConfig { workers: 1, ..cfg(dir1.path()) }).unwrap();
    assert_eq!(serial.rows, out.rows);
}

#[test]
fn oned_and_eem_commands_pass_their_checks() {
    let dir = tempfile::tempdir().unwrap();
    let o = experiments::run(Command::Oned, &cfg(&dir.path().join("o"))).unwrap();
    assert!(o.passed(), "{:?}", o.manifest.failures);
    let dat = std::fs::read_to_string(dir.path().join("o/traces/oned.dat")).unwrap();
    let mut lines = dat.lines();
    assert_eq!(lines.next(), Some("# step loss_weight loss_feature"));
    assert!(lines.all(|l| l.split_whitespace().count() == 3));

    let e = experiments::run(Command::Eem, &RunConfig { eem_noise: 0.05, ..cfg(&dir.path().join("e")) }).unwrap();
    assert!(e.passed(), "{:?}", e.manifest.failures);
    assert!(e.metric("noiseless", "alignment_max").unwrap() <= 1e-6);
}

#[test]
fn manifest_detects_tampering() {
    let dir = tempfile::tempdir().unwrap();
    experiments::cmd_oned(&cfg(dir.path())).unwrap();
    assert!(experiments::verify_dir(dir.path()).unwrap().is_empty());
    std::fs::write(dir.path().join("metrics.csv"), "run,metric,value\n").unwrap();
    let problems = experiments::verify_dir(dir.path()).unwrap();
    assert_eq!(problems, vec!["metrics.csv: content hash mismatch".to_string()]);
}

#[test]
fn config_for_other_experiment_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let c = RunConfig::parse(
        &format!("experiment = \"oned\"\noutput_dir = \"{}\"\n", dir.path().display()),
        "mem",
    )
    .unwrap();
    assert!(experiments::run(Command::Forgetting, &c).is_err());
    assert!(experiments::run(Command::Oned, &c).is_ok());
}

#[test]
fn cli_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let bin = env!("CARGO_BIN_EXE_featadapt");
    let conf = dir.path().join("c.toml");

    std::fs::write(&conf, "experiment = \"oned\"\n").unwrap();
    let ok = Proc::new(bin)
        .args(["oned", "--config"])
        .arg(&conf)
        .arg("--out")
        .arg(dir.path().join("run"))
        .output()
        .unwrap();
    assert_eq!(ok.status.code(), Some(0));
    assert!(dir.path().join("run/manifest.json").is_file());

    let verify = Proc::new(bin).arg("verify").arg(dir.path().join("run")).output().unwrap();
    assert_eq!(verify.status.code(), Some(0));

    // an unreachable learning budget makes the slope assertion fail
    std::fs::write(&conf, "experiment = \"oned\"\noned_steps = 3\noned_tol = 0.0\n").unwrap();
    let fail = Proc::new(bin)
        .args(["oned", "--config"])
        .arg(&conf)
        .arg("--out")
        .arg(dir.path().join("run2"))
        .output()
        .unwrap();
    assert_eq!(fail.status.code(), Some(1));
    let stderr = String::from_utf8_lossy(&fail.stderr);
    let last = stderr.lines().last().unwrap();
    let parsed: serde_json::Value = serde_json::from_str(last).unwrap();
    assert!(!parsed["failures"].as_array().unwrap().is_empty());

    std::fs::write(&conf, "bogus_key = 1\n").unwrap();
    let bad = Proc::new(bin).args(["oned", "--config"]).arg(&conf).output().unwrap();
    assert_eq!(bad.status.code(), Some(2));
}
