use std::path::Path;
use std::process::{Command, Output};

fn ntsformer(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ntsformer"))
        .args(args)
        .current_dir(cwd)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str], cwd: &Path) -> String {
    let out = ntsformer(args, cwd);
    assert_eq!(
        out.status.code(),
        Some(0),
        "{args:?}\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn synth(dir: &Path) {
    ok(&["synth", "--n", "200", "--classes", "4", "--seed", "1", "--out", "data"], dir);
}

#[test]
fn synth_train_eval_end_to_end() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    synth(dir);
    let summary = ok(
        &["train", "--k", "2", "--layers", "2", "--heads", "2", "--dim", "512", "--epochs", "2"],
        dir,
    );
    let summary: serde_json::Value = serde_json::from_str(&summary).unwrap();
    assert_eq!(summary["epochs_run"], 2);
    let history = std::fs::read_to_string(dir.join("run/history.csv")).unwrap();
    assert_eq!(history.lines().count(), 3);
    assert!(history.starts_with("epoch,loss,l_ce,l_st,l_moe,train_acc,val_acc\n"));

    let report = ok(&["eval", "--out", "eval"], dir);
    let report: serde_json::Value = serde_json::from_str(&report).unwrap();
    for key in ["text_miss", "visual_miss", "no_miss", "all"] {
        let v = report[key].as_f64().unwrap();
        assert!((0.0..=1.0).contains(&v), "{key} = {v}");
    }
    let saved: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.join("eval/report.json")).unwrap()).unwrap();
    assert_eq!(saved, report);
}

#[test]
fn train_reads_no_edges_once_hops_exist() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    synth(dir);
    ok(&["precompute", "--k", "1"], dir);
    std::fs::remove_file(dir.join("data/edges.tsv")).unwrap();
    ok(&["train", "--k", "1", "--dim", "16", "--epochs", "1"], dir);
    ok(&["eval"], dir);
}

#[test]
fn config_file_and_flag_precedence() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    synth(dir);
    std::fs::write(
        dir.join("cfg.json"),
        r#"{"dim": 16, "epochs": 3, "lr": 0.01, "out": "from_file", "deterministic": true}"#,
    )
    .unwrap();
    ok(&["train", "--config", "cfg.json", "--epochs", "2"], dir);
    let echoed: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.join("from_file/train_config.json")).unwrap()).unwrap();
    assert_eq!(echoed["dim"], 16);
    assert_eq!(echoed["epochs"], 2);
    assert_eq!(echoed["lr"], 0.01);
    assert_eq!(echoed["heads"], 2);

    // the same settings as flags give the same run
    ok(
        &["train", "--dim", "16", "--epochs", "2", "--lr", "0.01", "--out", "from_flags", "--deterministic"],
        dir,
    );
    let a = std::fs::read(dir.join("from_file/history.csv")).unwrap();
    let b = std::fs::read(dir.join("from_flags/history.csv")).unwrap();
    assert_eq!(a, b);
}

#[test]
fn deterministic_runs_repeat_byte_for_byte() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    synth(dir);
    for out in ["a", "b"] {
        ok(
            &["train", "--dim", "32", "--epochs", "3", "--seed", "7", "--deterministic", "--out", out],
            dir,
        );
    }
    for file in ["history.csv", "model.ckpt"] {
        assert_eq!(
            std::fs::read(dir.join("a").join(file)).unwrap(),
            std::fs::read(dir.join("b").join(file)).unwrap(),
            "{file}"
        );
    }
}

#[test]
fn input_errors_exit_one_and_name_the_field() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    assert_eq!(ntsformer(&["train", "--bogus"], dir).status.code(), Some(1));
    assert_eq!(ntsformer(&["frobnicate"], dir).status.code(), Some(1));
    assert_eq!(ntsformer(&["train", "--variant", "huge"], dir).status.code(), Some(1));

    synth(dir);
    std::fs::write(dir.join("data/labels.tsv"), "0\t1\n1\tcat\n").unwrap();
    let out = ntsformer(&["precompute"], dir);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("labels.tsv line 2"));

    std::fs::write(dir.join("bad.json"), r#"{"epochz": 1}"#).unwrap();
    let out = ntsformer(&["train", "--config", "bad.json"], dir);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("epochz"));

    let mut bytes = std::fs::read(dir.join("data/features_text.bin")).unwrap();
    bytes[0] = b'X';
    std::fs::write(dir.join("data/features_text.bin"), &bytes).unwrap();
    std::fs::write(dir.join("data/labels.tsv"), "0\t1\n").unwrap();
    let out = ntsformer(&["precompute"], dir);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("magic"));
}

#[test]
fn gradcheck_defaults_pass_and_failures_exit_two() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let out: serde_json::Value = serde_json::from_str(&ok(&["gradcheck", "--out", "gc"], dir)).unwrap();
    assert!(out["max_rel_err"].as_f64().unwrap() < 1e-4);
    assert_eq!(out["checked"], 200);
    assert!(dir.join("gc/gradcheck_config.json").exists());
    assert_eq!(ntsformer(&["gradcheck", "--threshold", "1e-15"], dir).status.code(), Some(2));
}
