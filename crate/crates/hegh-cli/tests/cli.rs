//! Tests that drive the compiled `hegh` binary end to end: exit codes,
//! stdout JSON shapes, byte stability of reports, and the promise that
//! commands never write anywhere but their declared outputs.

use std::path::Path;
use std::process::{Command, Output};

use hegh::data::{load_manifest, save_manifest, LabeledDataset};
use hegh::hash::{CodeDatabase, HashCode};
use hegh::labels::LabelSet;
use hegh::network::{CbamConfig, LayerConfig, Network, NetworkConfig};
use hegh::tensor::Tensor;
use hegh::trainer::encode_dataset;

fn hegh_in(dir: &Path) -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_hegh"));
    cmd.current_dir(dir);
    cmd
}

fn run(cmd: &mut Command) -> Output {
    cmd.output().expect("binary spawns")
}

fn stdout_json(out: &Output) -> serde_json::Value {
    serde_json::from_slice(&out.stdout).unwrap_or_else(|e| {
        panic!("stdout is not JSON ({e}): {}", String::from_utf8_lossy(&out.stdout))
    })
}

fn assert_status(out: &Output, expected: i32) {
    assert_eq!(
        out.status.code(),
        Some(expected),
        "stdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn tiny_network_config() -> NetworkConfig {
    let mut config = NetworkConfig::default();
    config.layers = vec![
        LayerConfig::new(2, 1),
        LayerConfig::new(2, 2),
        LayerConfig::new(4, 2),
        LayerConfig::new(4, 1),
        LayerConfig::new(4, 1),
        LayerConfig::new(4, 1),
        LayerConfig::new(4, 1),
        LayerConfig::new(4, 1),
    ];
    config.cbam = CbamConfig { reduction_ratio: 2, spatial_kernel: 3, stack_count: 1 };
    config.input_size = [16, 16];
    config.hash_bits = 8;
    config.num_classes = 2;
    config
}

const SYNTH_SPEC: &str = r#"{
  "num_classes": 2, "per_class": 4, "image_size": 16, "patch_size": 3,
  "confusable_groups": [], "noise": 0.02, "seed": 5
}"#;

#[test]
fn synthetic_pipeline_trains_encodes_and_evaluates() {
    let dir = tempfile::tempdir().unwrap();
    let dir = dir.path();
    std::fs::write(dir.join("spec.json"), SYNTH_SPEC).unwrap();
    std::fs::write(dir.join("net.json"), tiny_network_config().to_json().unwrap()).unwrap();

    let out = run(hegh_in(dir).args(["synth", "--spec", "spec.json", "--out", "synth.json"]));
    assert_status(&out, 0);
    assert_eq!(stdout_json(&out)["images"], 8);

    let run_cfg = format!(
        r#"{{
          "dataset": {{"manifest": {{"path": "synth.json"}}}},
          "train": {{"epochs": 1, "batch_size": 4, "pairs_per_batch": 8, "seed": 1,
                     "network": {}}},
          "output_dir": "out"
        }}"#,
        tiny_network_config().to_json().unwrap()
    );
    std::fs::write(dir.join("run.json"), run_cfg).unwrap();
    let out = run(hegh_in(dir).args(["train", "--config", "run.json"]));
    assert_status(&out, 0);
    let summary = stdout_json(&out);
    assert_eq!(summary["epochs"], 1);
    assert!(dir.join("out/network.ckpt").is_file());
    assert!(dir.join("out/loss_log.csv").is_file());
    assert!(
        String::from_utf8_lossy(&out.stderr).contains("epoch 1/1"),
        "progress goes to stderr"
    );

    std::fs::write(dir.join("dataset.json"), r#"{"manifest": {"path": "synth.json"}}"#)
        .unwrap();
    for db_name in ["db.heghcode", "q.heghcode"] {
        let out = run(hegh_in(dir).args([
            "encode",
            "--checkpoint",
            "out/network.ckpt",
            "--network",
            "net.json",
            "--dataset",
            "dataset.json",
            "--out",
            db_name,
        ]));
        assert_status(&out, 0);
        let summary = stdout_json(&out);
        assert_eq!(summary["entries"], 8);
        assert_eq!(summary["bits"], 8);
    }

    let db_bytes = std::fs::read(dir.join("db.heghcode")).unwrap();
    let eval_args = [
        "evaluate",
        "--codes",
        "db.heghcode",
        "--queries",
        "q.heghcode",
        "--metrics",
        "map,p@k:4,p@h:2",
    ];
    let first = run(hegh_in(dir).args(eval_args));
    assert_status(&first, 0);
    let second = run(hegh_in(dir).args(eval_args));
    assert_eq!(first.stdout, second.stdout, "repeated evaluation must be byte-identical");

    let report = stdout_json(&first);
    // The query set is the database itself, so every query finds its own
    // entry at distance zero and average precision starts from a hit.
    assert!(report["map"].as_f64().unwrap() > 0.0);
    assert_eq!(report["queries"], 8);
    assert_eq!(report["database_size"], 8);
    assert_eq!(report["precision_at_k"][0][0], 4);

    let out = run(hegh_in(dir).args(eval_args).args(["--out", "report.json"]));
    assert_status(&out, 0);
    let written = std::fs::read(dir.join("report.json")).unwrap();
    assert_eq!(written, first.stdout, "--out writes exactly what stdout showed");

    assert_eq!(
        std::fs::read(dir.join("db.heghcode")).unwrap(),
        db_bytes,
        "evaluation must not touch its inputs"
    );
}

#[test]
fn train_with_missing_dataset_exits_2_without_partial_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let dir = dir.path();
    let run_cfg = format!(
        r#"{{
          "dataset": {{"manifest": {{"path": "nowhere.json"}}}},
          "train": {{"epochs": 1, "network": {}}},
          "output_dir": "out"
        }}"#,
        tiny_network_config().to_json().unwrap()
    );
    std::fs::write(dir.join("run.json"), run_cfg).unwrap();
    let out = run(hegh_in(dir).args(["train", "--config", "run.json"]));
    assert_status(&out, 2);
    assert!(
        String::from_utf8_lossy(&out.stderr).contains("nowhere.json"),
        "stderr names the missing file"
    );
    assert!(!dir.join("out").exists(), "a failed run must leave nothing behind");
}

#[test]
fn query_by_hex_code_returns_sorted_hits() {
    let dir = tempfile::tempdir().unwrap();
    let dir = dir.path();
    let mut db = CodeDatabase::new(4, 2).unwrap();
    for (id, hex, class) in [(0, "0x0", 0), (1, "0x3", 0), (2, "0x7", 1), (3, "0xF", 1)] {
        db.push(
            id,
            HashCode::from_hex(4, hex).unwrap(),
            LabelSet::from_indices(2, &[class]).unwrap(),
        )
        .unwrap();
    }
    db.save(&dir.join("db.heghcode")).unwrap();
    let before = std::fs::read(dir.join("db.heghcode")).unwrap();

    let out = run(hegh_in(dir).args([
        "query",
        "--codes",
        "db.heghcode",
        "--code",
        "0x3",
        "--radius",
        "1",
    ]));
    assert_status(&out, 0);
    let result = stdout_json(&out);
    assert_eq!(result["code"], "0x3");
    let hits = result["hits"].as_array().unwrap();
    assert_eq!(hits.len(), 2);
    assert_eq!((hits[0]["id"].as_u64(), hits[0]["distance"].as_u64()), (Some(1), Some(0)));
    assert_eq!((hits[1]["id"].as_u64(), hits[1]["distance"].as_u64()), (Some(2), Some(1)));

    let out = run(hegh_in(dir).args([
        "query",
        "--codes",
        "db.heghcode",
        "--code",
        "0x3",
        "--topk",
        "3",
    ]));
    assert_status(&out, 0);
    let hits = stdout_json(&out)["hits"].as_array().unwrap().len();
    assert_eq!(hits, 3);

    assert_eq!(std::fs::read(dir.join("db.heghcode")).unwrap(), before);
}

#[test]
fn query_by_image_finds_its_own_entry() {
    let dir = tempfile::tempdir().unwrap();
    let dir = dir.path();
    let config = tiny_network_config();
    let network = Network::<f32>::new(config.clone(), 3).unwrap();
    network.save_params(&dir.join("net.ckpt")).unwrap();
    std::fs::write(dir.join("net.json"), config.to_json().unwrap()).unwrap();

    // Round-trip the images through a manifest first so the database and
    // the query see identical byte-quantized pixels.
    let spec: hegh::data::SyntheticSpec = serde_json::from_str(SYNTH_SPEC).unwrap();
    save_manifest(&hegh::data::generate_synthetic(&spec).unwrap(), dir.join("full.json"))
        .unwrap();
    let dataset = load_manifest(dir.join("full.json")).unwrap();
    let db = encode_dataset(&network, &dataset).unwrap();
    db.save(&dir.join("db.heghcode")).unwrap();

    let mut single = LabeledDataset::new(1).unwrap();
    single
        .push(dataset.images()[0].clone(), LabelSet::from_indices(1, &[0]).unwrap())
        .unwrap();
    save_manifest(&single, dir.join("query.json")).unwrap();

    let out = run(hegh_in(dir).args([
        "query",
        "--codes",
        "db.heghcode",
        "--image",
        "query.json",
        "--checkpoint",
        "net.ckpt",
        "--network",
        "net.json",
        "--topk",
        "1",
    ]));
    assert_status(&out, 0);
    let hits = stdout_json(&out)["hits"].as_array().unwrap().clone();
    assert_eq!(hits[0]["id"], 0, "the query image is database entry 0");
    assert_eq!(hits[0]["distance"], 0);
}

#[test]
fn usage_errors_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    let dir = dir.path();

    let out = run(hegh_in(dir).arg("--bogus"));
    assert_status(&out, 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));

    // A real database so the failures below are argument problems alone.
    let mut db = CodeDatabase::new(4, 1).unwrap();
    db.push(0, HashCode::from_hex(4, "0x1").unwrap(), LabelSet::from_indices(1, &[0]).unwrap())
        .unwrap();
    db.save(&dir.join("db.heghcode")).unwrap();

    let out = run(hegh_in(dir).args(["query", "--codes", "db.heghcode", "--code", "0x1"]));
    assert_status(&out, 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("--topk or --radius"));

    let out = run(hegh_in(dir).args([
        "query",
        "--codes",
        "db.heghcode",
        "--code",
        "0x123456",
        "--topk",
        "1",
    ]));
    assert_status(&out, 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("does not fit in 4 bits"));

    db.save(&dir.join("q.heghcode")).unwrap();
    let out = run(hegh_in(dir).args([
        "evaluate",
        "--codes",
        "db.heghcode",
        "--queries",
        "q.heghcode",
        "--metrics",
        "map,bogus",
    ]));
    assert_status(&out, 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("unknown metric 'bogus'"));
}

#[test]
fn encode_with_mismatched_architecture_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let dir = dir.path();
    let narrow = tiny_network_config();
    Network::<f32>::new(narrow, 0).unwrap().save_params(&dir.join("net.ckpt")).unwrap();

    let mut wide = tiny_network_config();
    wide.layers[0].channels = 3;
    std::fs::write(dir.join("wide.json"), wide.to_json().unwrap()).unwrap();
    std::fs::write(dir.join("spec.json"), SYNTH_SPEC).unwrap();
    std::fs::write(dir.join("dataset.json"), r#"{"synthetic": {"num_classes": 2, "per_class": 1, "image_size": 16, "patch_size": 3, "confusable_groups": [], "noise": 0.0, "seed": 0}}"#).unwrap();

    let out = run(hegh_in(dir).args([
        "encode",
        "--checkpoint",
        "net.ckpt",
        "--network",
        "wide.json",
        "--dataset",
        "dataset.json",
        "--out",
        "db.heghcode",
    ]));
    assert_status(&out, 2);
    assert!(!dir.join("db.heghcode").exists());
}

#[test]
fn gradcheck_loss_scope_reports_pass() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(hegh_in(dir.path()).args(["gradcheck", "--scope", "loss"]));
    assert_status(&out, 0);
    let report = stdout_json(&out);
    assert_eq!(report["pass"], true);
    assert_eq!(report["scope"], "loss");
    let components = report["components"].as_array().unwrap();
    assert!(components.len() >= 3);
    for c in components {
        assert!(c["max_rel_err"].as_f64().unwrap() < 1e-4, "{c}");
    }
}
