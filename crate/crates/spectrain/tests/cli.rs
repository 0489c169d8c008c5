use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn spectrain(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_spectrain"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("spawn spectrain")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn ok(args: &[&str], dir: &Path) -> Output {
    let o = spectrain(args, dir);
    assert_eq!(o.status.code(), Some(0), "{args:?} failed: {}", stderr(&o));
    o
}

const SMALL_CONFIG: &str = r#"{
    "k": 3, "max_nodes": 12, "hidden_dim": 8, "gin_layers": 2, "update_layers": 2,
    "head_layers": 2, "head_hidden_dim": 32, "epochs": 4, "batch_size": 4,
    "finetune": {"epochs": 3, "batch_size": 4, "head_hidden_dim": 16},
    "generate": {"count": 16, "min_nodes": 6, "max_nodes": 10}
}"#;

/// Temp dir with `cfg.json` and a generated `data.jsonl`.
fn workspace() -> TempDir {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("cfg.json"), SMALL_CONFIG).unwrap();
    ok(
        &[
            "gen-data",
            "--config",
            "cfg.json",
            "--seed",
            "4",
            "--output",
            "data.jsonl",
        ],
        dir.path(),
    );
    dir
}

fn read(dir: &TempDir, name: &str) -> String {
    fs::read_to_string(dir.path().join(name)).unwrap()
}

#[test]
fn spectrum_of_p3() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(
        dir.path().join("p3.jsonl"),
        "{\"num_nodes\":3,\"edges\":[[0,1],[1,2]]}\n",
    )
    .unwrap();
    ok(&["spectrum", "--input", "p3.jsonl", "--output", "s.jsonl"], dir.path());
    let line: serde_json::Value = serde_json::from_str(read(&dir, "s.jsonl").trim()).unwrap();
    let ev: Vec<f64> = serde_json::from_value(line["eigenvalues"].clone()).unwrap();
    for (got, want) in ev.iter().zip([0.0, 1.0, 3.0]) {
        assert!((got - want).abs() < 1e-10, "{ev:?}");
    }
    assert_eq!(ev.len(), 3);
}

#[test]
fn unknown_subcommand_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = spectrain(&["frobnicate"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("Usage"), "{}", stderr(&o));
}

#[test]
fn missing_input_and_clobbering_are_usage_errors() {
    let dir = tempfile::tempdir().unwrap();
    let o = spectrain(
        &["spectrum", "--input", "absent.jsonl", "--output", "s.jsonl"],
        dir.path(),
    );
    assert_eq!(o.status.code(), Some(2));
    fs::write(dir.path().join("g.jsonl"), "{\"num_nodes\":2,\"edges\":[[0,1]]}\n").unwrap();
    let o = spectrain(&["spectrum", "--input", "g.jsonl", "--output", "g.jsonl"], dir.path());
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn malformed_line_reports_its_number() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(
        dir.path().join("bad.jsonl"),
        "{\"num_nodes\":2,\"edges\":[[0,1]]}\n\n{\"num_nodes\":3,\"edges\":[[0,1]],}\n",
    )
    .unwrap();
    let o = spectrain(&["features", "--input", "bad.jsonl", "--output", "f.jsonl"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("line 3"), "{}", stderr(&o));
    assert!(!dir.path().join("f.jsonl").exists());
}

#[test]
fn check_invariants_passes() {
    let dir = tempfile::tempdir().unwrap();
    let o = ok(&["check-invariants", "--output", "inv.jsonl"], dir.path());
    assert!(String::from_utf8_lossy(&o.stdout).contains("13/13 checks passed"));
    assert_eq!(read(&dir, "inv.jsonl").lines().count(), 13);
}

#[test]
fn features_widths_follow_the_config() {
    let dir = workspace();
    ok(
        &[
            "features",
            "--config",
            "cfg.json",
            "--input",
            "data.jsonl",
            "--output",
            "f.jsonl",
        ],
        dir.path(),
    );
    let text = read(&dir, "f.jsonl");
    assert_eq!(text.lines().count(), 16);
    for line in text.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        let rows = v["node_features"].as_array().unwrap();
        assert_eq!(rows.len() as u64, v["num_nodes"].as_u64().unwrap());
        // two scales: (J + 2) operators, wavelet positional takes twice that
        assert!(rows.iter().all(|r| r.as_array().unwrap().len() == 12));
    }
}

#[test]
fn outputs_are_byte_identical_and_input_is_untouched() {
    let dir = workspace();
    let before = fs::read(dir.path().join("data.jsonl")).unwrap();
    for out in ["a.json", "b.json"] {
        ok(
            &[
                "pretrain",
                "--config",
                "cfg.json",
                "--input",
                "data.jsonl",
                "--output",
                out,
            ],
            dir.path(),
        );
    }
    assert_eq!(read(&dir, "a.csv"), read(&dir, "b.csv"));
    let strip = |name: &str| {
        let mut v: serde_json::Value = serde_json::from_str(&read(&dir, name)).unwrap();
        v["train_state"]["record"]["checkpoint"] = serde_json::Value::Null;
        v
    };
    assert_eq!(strip("a.json"), strip("b.json"));
    assert_eq!(fs::read(dir.path().join("data.jsonl")).unwrap(), before);
    assert_eq!(read(&dir, "a.csv").lines().count(), 5);
}

#[test]
fn resume_matches_an_uninterrupted_run() {
    let dir = workspace();
    let base = ["--config", "cfg.json", "--input", "data.jsonl"];
    let run = |extra: &[&str]| {
        let mut args = vec!["pretrain"];
        args.extend_from_slice(&base);
        args.extend_from_slice(extra);
        ok(&args, dir.path());
    };
    run(&["--output", "full.json"]);
    run(&["--epochs", "2", "--output", "half.json"]);
    run(&["--resume", "half.json", "--output", "resumed.json"]);
    assert_eq!(read(&dir, "full.csv"), read(&dir, "resumed.csv"));
    let params = |name: &str| {
        let v: serde_json::Value = serde_json::from_str(&read(&dir, name)).unwrap();
        v["params"].clone()
    };
    assert_eq!(params("full.json"), params("resumed.json"));
}

#[test]
fn finetune_reports_held_out_error() {
    let dir = workspace();
    ok(
        &[
            "pretrain",
            "--config",
            "cfg.json",
            "--input",
            "data.jsonl",
            "--output",
            "pre.json",
        ],
        dir.path(),
    );
    let o = ok(
        &[
            "finetune",
            "--input",
            "data.jsonl",
            "--from",
            "pre.json",
            "--output",
            "ft.json",
        ],
        dir.path(),
    );
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert!(stdout.contains("held-out lambda2 MAE"), "{stdout}");
    let record = read(&dir, "ft.csv");
    assert_eq!(record.lines().count(), 4);
    // regression rows leave the eigenvector columns empty
    assert!(record.lines().nth(1).unwrap().contains(",,,"));
}

#[test]
fn finetune_refuses_a_missing_checkpoint() {
    let dir = workspace();
    let o = spectrain(
        &[
            "finetune",
            "--input",
            "data.jsonl",
            "--from",
            "nope.json",
            "--output",
            "ft.json",
        ],
        dir.path(),
    );
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn compare_losses_writes_one_block_per_arm() {
    let dir = workspace();
    let o = ok(
        &[
            "compare-losses",
            "--config",
            "cfg.json",
            "--input",
            "data.jsonl",
            "--output",
            "cmp.csv",
        ],
        dir.path(),
    );
    let text = read(&dir, "cmp.csv");
    for arm in ["eigvec_ours", "abs_cos_mae", "random_orthogonal"] {
        assert_eq!(
            text.lines().filter(|l| l.starts_with(&format!("{arm},"))).count(),
            4,
            "{arm}"
        );
        assert!(String::from_utf8_lossy(&o.stdout).contains(arm));
    }
}

#[test]
fn unknown_config_key_is_rejected() {
    let dir = workspace();
    let cfg: PathBuf = dir.path().join("typo.json");
    fs::write(&cfg, "{\"epochz\": 3}").unwrap();
    let o = spectrain(
        &[
            "pretrain",
            "--config",
            "typo.json",
            "--input",
            "data.jsonl",
            "--output",
            "p.json",
        ],
        dir.path(),
    );
    assert_ne!(o.status.code(), Some(0));
    assert!(stderr(&o).contains("epochz"), "{}", stderr(&o));
}
