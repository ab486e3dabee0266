//! End-to-end checks of the `gridflow` binary: help behavior, argument
//! validation, byte-identical reruns, and a miniature pipeline pass.

use std::path::Path;
use std::process::{Command, Output};

fn gridflow(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gridflow"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("spawning gridflow")
}

fn run_ok(dir: &Path, args: &[&str]) -> String {
    let out = gridflow(dir, args);
    assert!(
        out.status.success(),
        "gridflow {:?} failed:\n{}{}",
        args,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

#[test]
fn help_exits_zero_everywhere() {
    let dir = tempfile::tempdir().unwrap();
    let commands = [
        "generate",
        "train-source",
        "adapt",
        "eval",
        "fewshot",
        "pareto",
        "stats",
        "report",
    ];
    run_ok(dir.path(), &["--help"]);
    for cmd in commands {
        run_ok(dir.path(), &[cmd, "--help"]);
    }
}

#[test]
fn zero_sample_request_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = gridflow(dir.path(), &["generate", "--n", "0"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--n"));
}

#[test]
fn unknown_mode_fails() {
    let dir = tempfile::tempdir().unwrap();
    run_ok(dir.path(), &["generate", "--regime", "hv", "--n", "6", "--seed", "1", "--out", "d"]);
    std::fs::write(dir.path().join("m.json"), "{}").unwrap();
    let out = gridflow(
        dir.path(),
        &["adapt", "--source", "m.json", "--data", "d/hv.jsonl", "--mode", "sideways"],
    );
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn generate_reruns_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let args = ["generate", "--regime", "mv", "--n", "40", "--seed", "7", "--out", "a"];
    let stdout_a = run_ok(dir.path(), &args);
    let first = std::fs::read(dir.path().join("a/mv.jsonl")).unwrap();
    let manifest_a = std::fs::read(dir.path().join("a/manifest.json")).unwrap();
    let stdout_b = run_ok(dir.path(), &args);
    assert_eq!(first, std::fs::read(dir.path().join("a/mv.jsonl")).unwrap());
    assert_eq!(manifest_a, std::fs::read(dir.path().join("a/manifest.json")).unwrap());
    assert_eq!(stdout_a, stdout_b);
}

#[test]
fn pipeline_smoke() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();

    let gen_out = run_ok(d, &["generate", "--n", "24", "--seed", "3", "--out", "data"]);
    assert!(gen_out.contains("MV") && gen_out.contains("HV"));
    assert!(gen_out.contains("splits 8/8/8"));
    assert!(d.join("data/mv.jsonl").exists() && d.join("data/hv.jsonl").exists());

    run_ok(
        d,
        &["train-source", "--data", "data/mv.jsonl", "--seed", "1", "--epochs", "2", "--out", "src"],
    );
    for f in ["model.json", "history.csv", "metrics.csv", "loss_curves.svg", "manifest.json"] {
        assert!(d.join("src").join(f).exists(), "missing src/{f}");
    }

    let zs = run_ok(
        d,
        &["adapt", "--source", "src/model.json", "--data", "data/hv.jsonl", "--mode", "zero_shot", "--out", "zs"],
    );
    assert!(zs.contains("0 trainable params"));

    let lp = run_ok(
        d,
        &[
            "adapt", "--source", "src/model.json", "--data", "data/hv.jsonl",
            "--mode", "lora_phead", "--epochs", "1", "--seed", "5", "--out", "lp",
        ],
    );
    assert!(lp.contains("1122 trainable params"));

    let ev = run_ok(
        d,
        &["eval", "--model", "lp/model.json", "--data", "data/hv.jsonl", "--split", "test", "--label", "lora_phead", "--out", "ev"],
    );
    assert!(ev.contains("rmse_all"));
    assert!(d.join("ev/per_sample.json").exists());

    let st = run_ok(
        d,
        &["stats", "--a", "zs/per_sample.json", "--b", "lp/per_sample.json", "--out", "st"],
    );
    assert!(st.contains("W = ") && st.contains("Bonferroni"));
    assert!(d.join("st/stats.json").exists());

    let pa = run_ok(
        d,
        &["pareto", "--metrics", "zs/metrics.csv,lp/metrics.csv", "--out", "pa"],
    );
    assert!(pa.contains("front:"));
    let csv = std::fs::read_to_string(d.join("pa/pareto.csv")).unwrap();
    assert!(csv.starts_with("mode,seed,beta,p_reduced,rmse_all,on_front"));
    assert!(d.join("pa/pareto.svg").exists());

    run_ok(d, &["report", "--run", "src"]);
    assert!(d.join("src/pareto.svg").exists());

    for run in ["data", "src", "zs", "lp", "ev", "st", "pa"] {
        let manifest = std::fs::read_to_string(d.join(run).join("manifest.json")).unwrap();
        let parsed: serde_json::Value = serde_json::from_str(&manifest).unwrap();
        assert!(parsed["config_sha256"].as_str().unwrap().len() == 64, "{run} manifest");
        assert!(!parsed["artifacts"].as_array().unwrap().is_empty(), "{run} manifest");
    }
}

#[test]
fn config_file_supplies_defaults_and_flags_override() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let config = serde_json::json!({
        "synth": {
            "regime": "MV",
            "n_samples": 12,
            "n_buses": [4, 9],
            "pv_fraction": 0.2,
            "extra_edge_prob": 0.1,
            "seed": 9
        },
        "seeds": [9],
        "out": "from_config"
    });
    std::fs::write(d.join("exp.json"), serde_json::to_vec(&config).unwrap()).unwrap();
    run_ok(d, &["generate", "--config", "exp.json", "--regime", "mv"]);
    assert!(d.join("from_config/mv.jsonl").exists());

    // The flag wins over the file.
    run_ok(d, &["generate", "--config", "exp.json", "--regime", "mv", "--n", "6", "--out", "flagged"]);
    let text = std::fs::read_to_string(d.join("flagged/mv.jsonl")).unwrap();
    let header: serde_json::Value =
        serde_json::from_str(text.lines().next().unwrap()).unwrap();
    assert_eq!(header["config"]["n_samples"], 6);

    let bad = gridflow(d, &["generate", "--config", "missing.json"]);
    assert_eq!(bad.status.code(), Some(1));
}
