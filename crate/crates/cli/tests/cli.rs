use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn bin(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gram-sld"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn json_out(o: &Output) -> Value {
    assert!(o.status.success(), "stderr: {}", String::from_utf8_lossy(&o.stderr));
    serde_json::from_slice(&o.stdout).unwrap()
}

fn simulate(dir: &Path) -> String {
    let out = dir.join("scn");
    let o = bin(&["simulate", "--out", out.to_str().unwrap(), "--n-train", "40", "--n-test", "12"]);
    json_out(&o);
    out.join("config.json").to_str().unwrap().to_string()
}

#[test]
fn simulate_then_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = simulate(dir.path());

    let v = json_out(&bin(&["cluster", "--config", &cfg, "--force-k", "4"]));
    assert_eq!(v["k"], 4);

    let v = json_out(&bin(&["select-keys", "--config", &cfg, "--force-k", "4", "--ratio", "0.1"]));
    assert!(v["total"].as_u64().unwrap() >= 4);

    let v = json_out(&bin(&["run", "--config", &cfg, "--force-k", "4", "--ratio", "0.1"]));
    assert!(v["iterations"].as_u64().unwrap() >= 1);
    let journal = Path::new(v["journal"].as_str().unwrap());
    assert!(std::fs::read_to_string(journal).unwrap().contains("\"terminated\""));

    let preds = journal.parent().unwrap().join("iterations/001/predictions.jsonl");
    let v = json_out(&bin(&["score", "--config", &cfg, "--predictions", preds.to_str().unwrap()]));
    let rows = v["samples"].as_array().unwrap();
    assert!(!rows.is_empty());
    assert!(rows.iter().all(|r| r["accepted"].is_boolean()));
}

#[test]
fn eval_and_gram_diff() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = simulate(dir.path());
    let scn = Path::new(&cfg).parent().unwrap();

    // Perfect predictions from the hidden truth of the test set.
    let mut lines = String::new();
    for i in 0..12 {
        let id = format!("test_{i:04}");
        let gt: Value = serde_json::from_str(&std::fs::read_to_string(scn.join(format!("gt/{id}.json"))).unwrap()).unwrap();
        let boxes: Vec<Value> = gt["boxes"]
            .as_array()
            .unwrap()
            .iter()
            .map(|b| serde_json::json!({"class": b["class"], "bbox": b["bbox"], "confidence": 1.0}))
            .collect();
        lines.push_str(&serde_json::json!({"id": id, "d1": boxes, "d2": []}).to_string());
        lines.push('\n');
    }
    let preds = dir.path().join("p.jsonl");
    std::fs::write(&preds, lines).unwrap();
    let v = json_out(&bin(&["eval", "--config", &cfg, "--predictions", preds.to_str().unwrap()]));
    assert_eq!(v["d1"]["map"], 1.0);
    assert_eq!(v["best"], "d1");

    let a = dir.path().join("a.csv");
    let b = dir.path().join("b.csv");
    std::fs::write(&a, "1,2,2\n1,0\n0,1\n").unwrap();
    std::fs::write(&b, "1,2,2\n0,0\n0,1\n").unwrap();
    let out = dir.path().join("d.csv");
    let v = json_out(&bin(&[
        "gram-diff",
        "--d1",
        a.to_str().unwrap(),
        "--d2",
        b.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]));
    assert_eq!(v["channels"], 2);
    assert!(out.is_file());
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let o = bin(&["run", "--config", dir.path().join("missing.json").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));

    let cfg = simulate(dir.path());
    let o = bin(&["run", "--config", &cfg, "--ratio", "1.5"]);
    assert_eq!(o.status.code(), Some(2), "{}", String::from_utf8_lossy(&o.stderr));

    let mut c: Value = serde_json::from_str(&std::fs::read_to_string(&cfg).unwrap()).unwrap();
    c["detector"] = serde_json::json!({"command": {
        "train_template": "echo broken >&2; exit 7 # {train_manifest} {work_dir}",
        "predict_template": "exit 7 # {predict_manifest} {work_dir}",
        "timeout": 30
    }});
    let bad = Path::new(&cfg).with_file_name("plugin.json");
    std::fs::write(&bad, c.to_string()).unwrap();
    let o = bin(&["run", "--config", bad.to_str().unwrap(), "--force-k", "3"]);
    assert_eq!(o.status.code(), Some(3), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stderr).contains("broken"));
}
