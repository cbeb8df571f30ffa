use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;
use tsp_interp::analysis::{ExplorerManifest, OverlayExport};
use tsp_interp::numerics::container::file_sha256;

const MINI: &str = r#"{
  "seed": 3,
  "generate": {"n": 10, "count": 5},
  "train": {"n": 10, "batch_size": 32, "steps": 200, "warmup_rollouts": 64, "eval_instances": 50,
            "eval_every": 100, "log_every": 50, "checkpoint_every": 0, "adam": {"lr": 0.001},
            "policy": {"d_model": 16, "layers": 1, "heads": 2, "ff_hidden": 32}},
  "eval": {"n": 10, "instances": 50},
  "capture": {"n": 10, "num_instances": 500},
  "sae": {"d": 16, "expansion": 2, "batch_size": 256, "steps": 200, "eval_every": 100},
  "grid": {"expansions": [1], "k_ratios": [0.1], "l1": [0.0001, 0.01]},
  "analysis": {"n": 20, "num_instances": 8},
  "export": {"top": 4}
}"#;

fn bin(workdir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tsp-interp"))
        .args(args)
        .env("TSP_INTERP_WORKDIR", workdir)
        .output()
        .expect("binary runs")
}

fn completion(out: &Output) -> Value {
    let text = String::from_utf8_lossy(&out.stdout);
    let last = text.lines().last().unwrap_or_else(|| panic!("no stdout; stderr: {}", String::from_utf8_lossy(&out.stderr)));
    serde_json::from_str(last).expect("completion record is JSON")
}

fn ok(workdir: &Path, args: &[&str]) -> Value {
    let out = bin(workdir, args);
    assert_eq!(out.status.code(), Some(0), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    let rec = completion(&out);
    assert_eq!(rec["status"], "ok");
    assert_eq!(rec["stage"], args[0]);
    rec
}

#[test]
fn miniature_pipeline_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let w = dir.path();
    let cfg = w.join("mini.json");
    std::fs::write(&cfg, MINI).unwrap();
    let c = cfg.to_str().unwrap();

    let gen = ok(w, &["generate", "--config", c]);
    assert_eq!(gen["count"], 5);
    assert!(w.join("instances/instance_00004.json").exists());

    let trained = ok(w, &["train-policy", "--config", c]);
    assert_eq!(trained["steps"], 200);
    let log = std::fs::read_to_string(w.join("logs/train.jsonl")).unwrap();
    assert!(log.lines().all(|l| serde_json::from_str::<Value>(l).is_ok()));

    let eval = ok(w, &["eval", "--config", c]);
    assert!(eval["mean_gap_vs_optimal"].as_f64().unwrap() >= 0.0);

    let cap = ok(w, &["capture", "--config", c]);
    assert_eq!(cap["record_count"], 5000);
    let first_hash = cap["sha256"].as_str().unwrap().to_string();
    let again = ok(w, &["capture", "--config", c, "--out", w.join("again.tact").to_str().unwrap()]);
    assert_eq!(again["sha256"].as_str().unwrap(), first_hash);

    let sae = ok(w, &["train-sae", "--config", c]);
    assert_eq!(sae["latent"], 32);
    assert!(sae["metrics"]["max_l0"].as_u64().unwrap() <= sae["k"].as_u64().unwrap());

    let grid = ok(w, &["grid-search", "--config", c]);
    assert_eq!(grid["runs"], 2);
    assert_eq!(std::fs::read_to_string(w.join("grid/grid.csv")).unwrap().lines().count(), 3);

    let an = ok(w, &["analyze", "--config", c]);
    assert_eq!(an["features"], 32);
    assert!(w.join("exports/analysis.json").exists());

    let ex = ok(w, &["export-explorer", "--config", c]);
    assert_eq!(ex["overlays"], 4);
    let manifest_path = w.join("exports/explorer/manifest.json");
    let manifest = ExplorerManifest::load(&manifest_path).unwrap();
    manifest.validate_overlays(manifest_path.parent().unwrap()).unwrap();
    let o = OverlayExport::load(&manifest_path.parent().unwrap().join(&manifest.features[0].overlay)).unwrap();
    assert_eq!(o.point_count(), 1000);
    assert_eq!(o.meta.policy_checkpoint_sha256, file_sha256(&w.join("checkpoints/policy.ckpt")).unwrap());
}

#[test]
fn untrained_eval_reports_positive_gap_at_eight_nodes() {
    let dir = tempfile::tempdir().unwrap();
    let w = dir.path();
    let cfg = w.join("mini.json");
    std::fs::write(&cfg, MINI).unwrap();
    let c = cfg.to_str().unwrap();
    ok(w, &["train-policy", "--config", c, "--set", "train.steps=0", "--set", "train.warmup_rollouts=0"]);
    let eval = ok(w, &["eval", "--config", c, "--set", "eval.n=8", "--set", "eval.instances=100"]);
    assert_eq!(eval["n"], 8);
    assert!(eval["mean_gap_vs_optimal"].as_f64().unwrap() > 0.0);
}

#[test]
fn failures_map_to_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let w = dir.path();

    let usage = bin(w, &["capture", "--no-such-flag"]);
    assert_eq!(usage.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&usage.stderr).contains("Usage"));

    assert_eq!(bin(w, &["eval", "--set", "train.bogus=1"]).status.code(), Some(2));
    assert_eq!(bin(w, &["eval", "--set", "sae.d=7"]).status.code(), Some(2));
    assert_eq!(bin(w, &["eval", "--config", w.join("missing.json").to_str().unwrap()]).status.code(), Some(2));

    let missing = bin(w, &["train-sae"]);
    assert_eq!(missing.status.code(), Some(3));
    assert_eq!(completion(&missing)["status"], "error");

    std::fs::create_dir_all(w.join("datasets")).unwrap();
    std::fs::write(w.join("datasets/activations.tact"), b"not a capture file").unwrap();
    assert_eq!(bin(w, &["train-sae"]).status.code(), Some(3));
}

#[test]
fn mismatched_checkpoint_is_rejected_before_capture() {
    let dir = tempfile::tempdir().unwrap();
    let w = dir.path();
    let cfg = w.join("mini.json");
    std::fs::write(&cfg, MINI).unwrap();
    let c = cfg.to_str().unwrap();
    ok(w, &["train-policy", "--config", c, "--set", "train.steps=0", "--set", "train.warmup_rollouts=0"]);
    // sae.d and policy width agree in the config, but the checkpoint on disk is 16 wide
    let out = bin(
        w,
        &["capture", "--config", c, "--set", "train.policy.d_model=32", "--set", "sae.d=32"],
    );
    assert_eq!(out.status.code(), Some(2));
    assert!(!w.join("datasets/activations.tact").exists());
}

#[test]
fn shipped_configs_are_valid() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut seen = 0;
    for entry in std::fs::read_dir(&dir).unwrap() {
        let path = entry.unwrap().path();
        let cfg = tsp_interp::cli::PipelineConfig::from_json(&std::fs::read_to_string(&path).unwrap())
            .unwrap_or_else(|e| panic!("{}: {e}", path.display()));
        cfg.validate().unwrap_or_else(|e| panic!("{}: {e}", path.display()));
        seen += 1;
    }
    assert!(seen >= 2);
}
