use std::path::Path;
use std::process::{Command, Output};

use serde_json::json;

fn lcp(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lcp")).args(args).current_dir(dir).output().expect("run lcp")
}

fn cfg() -> serde_json::Value {
    json!({
        "n_tx": 8, "n_rx": 2, "n_users": 3, "streams": [1, 1, 1], "d_max": 1,
        "total_power": 1.0, "noise_var": 1.0, "weights": [1.0, 1.0, 1.0]
    })
}

fn write(dir: &Path, name: &str, v: &serde_json::Value) {
    std::fs::write(dir.join(name), v.to_string()).unwrap();
}

#[test]
fn bench_output_is_byte_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let spec = json!({
        "name": "snr", "scenario": "sweep_snr", "cfg": cfg(), "n_realizations": 3, "seed": 9,
        "methods": ["wmmse", "lcp_ideal", "ezf"], "snr_db": [-5.0, 5.0]
    });
    write(dir.path(), "spec.json", &spec);
    for out in ["a", "b"] {
        let o = lcp(&["bench", "--config", "spec.json", "--out", out], dir.path());
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    let a = std::fs::read(dir.path().join("a/snr.csv")).unwrap();
    assert_eq!(a, std::fs::read(dir.path().join("b/snr.csv")).unwrap());
    assert_eq!(String::from_utf8(a).unwrap().lines().count(), 7);
    let meta: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("a/snr.json")).unwrap()).unwrap();
    assert_eq!(meta["spec"]["seed"], 9);
    assert!(meta["environment"]["version"].is_string());
}

#[test]
fn seed_and_realization_overrides_apply() {
    let dir = tempfile::tempdir().unwrap();
    let spec = json!({
        "name": "one", "scenario": "timing", "cfg": cfg(), "n_realizations": 50, "seed": 1, "methods": ["wmmse"]
    });
    write(dir.path(), "spec.json", &spec);
    let o = lcp(&["bench", "--config", "spec.json", "--realizations", "1", "--seed", "4"], dir.path());
    assert!(o.status.success());
    let meta: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("out/one.json")).unwrap()).unwrap();
    assert_eq!(meta["spec"]["n_realizations"], 1);
    assert_eq!(meta["spec"]["seed"], 4);
    assert_eq!(meta["rows"][0]["ratio"], 1.0);
}

#[test]
fn invalid_configs_exit_with_2() {
    let dir = tempfile::tempdir().unwrap();
    write(dir.path(), "bad.json", &json!({ "name": "x" }));
    assert_eq!(lcp(&["bench", "--config", "bad.json"], dir.path()).status.code(), Some(2));
    assert_eq!(lcp(&["bench"], dir.path()).status.code(), Some(2));
    let mut c = cfg();
    c["streams"] = json!([3, 1, 1]);
    let spec = json!({ "name": "x", "scenario": "timing", "cfg": c, "n_realizations": 1, "seed": 0, "methods": ["ezf"] });
    write(dir.path(), "streams.json", &spec);
    assert_eq!(lcp(&["bench", "--config", "streams.json"], dir.path()).status.code(), Some(2));
    let spec = json!({ "name": "x", "scenario": "timing", "cfg": cfg(), "n_realizations": 1, "seed": 0, "methods": ["lcp_net"] });
    write(dir.path(), "net.json", &spec);
    assert_eq!(lcp(&["bench", "--config", "net.json"], dir.path()).status.code(), Some(2));
    let o = lcp(&["bench", "--config", "net.json", "--checkpoint", "missing.json"], dir.path());
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn generated_data_can_be_solved() {
    let dir = tempfile::tempdir().unwrap();
    write(dir.path(), "data.json", &json!({ "params": { "unit_gain": true }, "cfg": cfg(), "count": 4, "seed": 2 }));
    write(dir.path(), "solve.json", &json!({ "cfg": cfg() }));
    assert!(lcp(&["gen-data", "--config", "data.json"], dir.path()).status.success());
    let mut wsr = Vec::new();
    for method in ["wmmse", "ezf"] {
        let out = format!("s_{method}");
        let o = lcp(&["solve", "--method", method, "--input", "out/dataset.bin", "--config", "solve.json", "--out", &out], dir.path());
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        let v: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(dir.path().join(out).join("solve.json")).unwrap()).unwrap();
        let results = v["results"].as_array().unwrap();
        assert_eq!(results.len(), 4);
        assert_eq!(results[0]["precoders"].as_array().unwrap().len(), 3);
        wsr.push(results.iter().map(|r| r["wsr"].as_f64().unwrap()).sum::<f64>());
    }
    assert!(wsr[0] > wsr[1]);
    let mut other = cfg();
    other["n_tx"] = json!(4);
    write(dir.path(), "other.json", &json!({ "cfg": other }));
    let o = lcp(&["solve", "--method", "ezf", "--input", "out/dataset.bin", "--config", "other.json"], dir.path());
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn train_then_prune_and_evaluate() {
    let dir = tempfile::tempdir().unwrap();
    let job = json!({
        "cfg": cfg(),
        "train": { "n_train": 32, "n_val": 16, "n_test": 16, "batch_size": 16,
                   "epochs_supervised": 1, "epochs_unsupervised": 1 },
        "prune": { "rounds": [[4, 2], [8, 4]], "finetune_lr": 1e-4, "finetune_epochs": 1 }
    });
    write(dir.path(), "job.json", &job);
    let o = lcp(&["train", "--config", "job.json"], dir.path());
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let o = lcp(&["prune", "--config", "job.json", "--checkpoint", "out/model.json", "--out", "p"], dir.path());
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let table = std::fs::read_to_string(dir.path().join("p/prune.csv")).unwrap();
    let lines: Vec<&str> = table.lines().collect();
    assert_eq!(lines.len(), 4);
    assert!(lines[3].starts_with("2,8-4,8-4-4,"));
    let spec = json!({
        "name": "net", "scenario": "table3_snr", "cfg": cfg(), "n_realizations": 2, "seed": 0,
        "methods": ["wmmse", "lcp_net"], "snr_db": [0.0], "checkpoint": "p/pruned_2.json"
    });
    write(dir.path(), "net.json", &spec);
    let o = lcp(&["bench", "--config", "net.json"], dir.path());
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let o = lcp(&["prune", "--config", "job.json"], dir.path());
    assert_eq!(o.status.code(), Some(2));
}
