use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn hideseek(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hideseek"))
        .args(args)
        .current_dir(cwd)
        .env_remove("HIDESEEK_SEED")
        .output()
        .expect("binary runs")
}

fn ok(o: &Output) {
    assert!(
        o.status.success(),
        "exit {:?}\nstdout {}\nstderr {}",
        o.status.code(),
        String::from_utf8_lossy(&o.stdout),
        String::from_utf8_lossy(&o.stderr)
    );
}

const NETWORK: &str = r#"{"in_channels": 3, "head": "gap", "num_classes": 4,
    "layers": [{"kernel": 3, "out_channels": 4, "stride": 2}, {"kernel": 3, "out_channels": 8, "stride": 2}]}"#;

fn setup(dir: &Path) {
    ok(&hideseek(&["gen-data", "--n-train", "32", "--n-val", "12", "--seed", "5", "-o", "data"], dir));
    let cfg = format!(
        r#"{{"dataset": {{"source": "dir", "path": "data"}}, "network": {NETWORK},
            "hiding": {{"kind": "image", "patch_size": 16, "hide_prob": 0.5}},
            "epochs": 2, "batch_size": 8, "seeds": [1]}}"#
    );
    fs::write(dir.join("exp.json"), cfg).unwrap();
}

#[test]
fn generate_train_evaluate_visualize() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    setup(d);
    assert!(d.join("data/dataset.json").exists());
    assert!(d.join("data/manifest.jsonl").exists());

    ok(&hideseek(&["train", "-c", "exp.json", "-o", "run"], d));
    let ck = d.join("run/seed-1/checkpoint.bin");
    assert!(ck.exists());
    let log = fs::read_to_string(d.join("run/seed-1/train_log.csv")).unwrap();
    assert_eq!(log.lines().count(), 3);

    ok(&hideseek(&["eval", "-k", "run/seed-1/checkpoint.bin", "-o", "ev"], d));
    let metrics: serde_json::Value = serde_json::from_str(&fs::read_to_string(d.join("ev/metrics.json")).unwrap()).unwrap();
    assert_eq!(metrics["task"], "image");
    for key in ["gt_known_loc", "top1_loc", "top1_clas"] {
        let v = metrics["metrics"]["overall"][key].as_f64().unwrap();
        assert!((0.0..=1.0).contains(&v));
    }
    assert_eq!(fs::read_to_string(d.join("ev/records.jsonl")).unwrap().lines().count(), 12);

    ok(&hideseek(&["visualize", "-k", "run/seed-1/checkpoint.bin", "--ids", "0,1,40", "-o", "viz"], d));
    let pngs = fs::read_dir(d.join("viz")).unwrap().count();
    assert_eq!(pngs, 6);

    // Reruns are byte-identical.
    ok(&hideseek(&["train", "-c", "exp.json", "-o", "run2"], d));
    assert_eq!(fs::read(&ck).unwrap(), fs::read(d.join("run2/seed-1/checkpoint.bin")).unwrap());
    ok(&hideseek(&["eval", "-k", "run2/seed-1/checkpoint.bin", "-o", "ev2"], d));
    assert_eq!(fs::read(d.join("ev/metrics.json")).unwrap(), fs::read(d.join("ev2/metrics.json")).unwrap());
    ok(&hideseek(&["visualize", "-k", "run2/seed-1/checkpoint.bin", "--ids", "0,1,40", "-o", "viz2"], d));
    for e in fs::read_dir(d.join("viz")).unwrap() {
        let name = e.unwrap().file_name();
        assert_eq!(fs::read(d.join("viz").join(&name)).unwrap(), fs::read(d.join("viz2").join(&name)).unwrap());
    }

    // Ensemble of two checkpoints.
    ok(&hideseek(&["train", "-c", "exp.json", "--seed", "2", "-o", "run3"], d));
    ok(&hideseek(&["eval", "-k", "run/seed-1/checkpoint.bin", "-k", "run3/seed-2/checkpoint.bin", "-o", "ens"], d));
    let ens: serde_json::Value = serde_json::from_str(&fs::read_to_string(d.join("ens/metrics.json")).unwrap()).unwrap();
    assert_eq!(ens["seeds"], serde_json::json!([1, 2]));
}

#[test]
fn usage_errors_exit_2() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    setup(d);
    assert_eq!(hideseek(&["train", "-c", "missing.json", "-o", "x"], d).status.code(), Some(2));
    fs::write(d.join("bad.json"), r#"{"dataset": {"source": "dir", "path": "data"}, "network": 3}"#).unwrap();
    assert_eq!(hideseek(&["train", "-c", "bad.json", "-o", "x"], d).status.code(), Some(2));
    let neg = fs::read_to_string(d.join("exp.json")).unwrap().replace("\"epochs\": 2", "\"epochs\": 0");
    fs::write(d.join("neg.json"), neg).unwrap();
    let o = hideseek(&["train", "-c", "neg.json", "-o", "x"], d);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("epochs"));
    assert_eq!(hideseek(&["train", "--bogus"], d).status.code(), Some(2));
    assert_eq!(hideseek(&["eval", "-k", "nope.bin", "-o", "x"], d).status.code(), Some(2));
    // Refuses to write into a non-empty directory without --force.
    assert_eq!(hideseek(&["gen-data", "--n-train", "8", "--n-val", "4", "-o", "data"], d).status.code(), Some(2));
    ok(&hideseek(&["gen-data", "--n-train", "8", "--n-val", "4", "-o", "data", "--force"], d));
}

#[test]
fn visualize_without_known_ids_fails() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    setup(d);
    ok(&hideseek(&["train", "-c", "exp.json", "-o", "run"], d));
    let o = hideseek(&["visualize", "-k", "run/seed-1/checkpoint.bin", "--ids", "9999", "-o", "viz"], d);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn suite_and_analyze_write_reports() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    setup(d);
    let suite = format!(
        r#"{{"base": {{"dataset": {{"source": "dir", "path": "data"}}, "network": {NETWORK},
              "epochs": 20, "batch_size": 8, "seeds": [0, 1]}},
            "variants": [{{"name": "baseline"}},
                         {{"name": "has", "hiding": {{"kind": "image", "patch_size": 16, "hide_prob": 0.5}}}},
                         {{"name": "ensemble", "ensemble": ["baseline", "has"]}}]}}"#
    );
    fs::write(d.join("suite.json"), suite).unwrap();
    ok(&hideseek(&["suite", "-c", "suite.json", "--quick", "-j", "2", "-o", "s"], d));
    let table = fs::read_to_string(d.join("s/table.csv")).unwrap();
    assert!(table.lines().count() >= 4, "{table}");
    assert!(d.join("s/runs/has/seed-1/checkpoint.bin").exists());
    let m: serde_json::Value = serde_json::from_str(&fs::read_to_string(d.join("s/metrics.json")).unwrap()).unwrap();
    assert_eq!(m["runs"].as_array().unwrap().len(), 6);
    assert!(table.contains("ensemble"));

    ok(&hideseek(&["analyze", "-c", "exp.json", "--images", "16", "-o", "an"], d));
    let r: serde_json::Value = serde_json::from_str(&fs::read_to_string(d.join("an/report.json")).unwrap()).unwrap();
    assert!(r["hidden_case_residual"].as_f64().unwrap() < 1e-12);
}

#[test]
fn sequences_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    ok(&hideseek(&["gen-data", "--kind", "sequences", "--n-train", "16", "--n-val", "8", "-o", "seq"], d));
    let cfg = r#"{"dataset": {"source": "dir", "path": "seq"},
        "network": {"in_channels": 32, "head": "gmp", "num_classes": 4, "layers": [{"kernel": 3, "out_channels": 8}]},
        "hiding": {"kind": "temporal", "segment": 10, "hide_prob": 0.5}, "epochs": 1, "batch_size": 8}"#;
    fs::write(d.join("t.json"), cfg).unwrap();
    ok(&hideseek(&["train", "-c", "t.json", "-o", "run"], d));
    ok(&hideseek(&["eval", "-k", "run/seed-0/checkpoint.bin", "-o", "ev"], d));
    let m: serde_json::Value = serde_json::from_str(&fs::read_to_string(d.join("ev/metrics.json")).unwrap()).unwrap();
    assert_eq!(m["task"], "temporal");
    assert_eq!(m["metrics"]["map"].as_array().unwrap().len(), 5);
    ok(&hideseek(&["visualize", "-k", "run/seed-0/checkpoint.bin", "--ids", "16,17", "-o", "viz"], d));
    assert_eq!(fs::read_dir(d.join("viz")).unwrap().count(), 4);
}
