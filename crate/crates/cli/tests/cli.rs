use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

const FAST: &str = r#"
arch = "densenet_tiny"
classes = 3
epochs = 3
batch = 8
k = 3
resize = 32
crop = 32
lr_find_steps = 30
"#;

fn minet(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_minet"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("spawn minet")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = minet(dir, args);
    assert!(
        out.status.success(),
        "minet {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

/// Temp dir holding a 60-image synthetic dataset in `data/` and `fast.toml`.
fn workspace() -> TempDir {
    let dir = TempDir::new().unwrap();
    ok(dir.path(), &["synth", "--count", "60", "--size", "32", "--seed", "5", "--data", "data"]);
    fs::write(dir.path().join("fast.toml"), FAST).unwrap();
    dir
}

fn read_json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn scan_writes_distribution_and_manifest() {
    let dir = workspace();
    let out = ok(dir.path(), &["scan", "--data", "data", "--out", "o"]);
    assert!(out.contains("total\t60"));
    let tsv = fs::read_to_string(dir.path().join("o/distribution.tsv")).unwrap();
    assert_eq!(tsv, "class\tcount\ndisk\t20\nsquare\t20\ntriangle\t20\n");
    let manifest = read_json(&dir.path().join("o/manifest.json"));
    assert_eq!(manifest["samples"].as_array().unwrap().len(), 60);
}

#[test]
fn scan_warns_about_empty_classes_and_bad_files() {
    let dir = workspace();
    fs::create_dir_all(dir.path().join("data/zebra")).unwrap();
    fs::write(dir.path().join("data/disk/broken.png"), b"not a png").unwrap();
    let out = minet(dir.path(), &["scan", "--data", "data", "--out", "o"]);
    assert!(out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("zebra"), "{err}");
    assert!(err.contains("broken.png"), "{err}");
}

#[test]
fn params_reports_known_totals() {
    let dir = TempDir::new().unwrap();
    let total = |args: &[&str]| {
        let out = ok(dir.path(), args);
        out.lines().last().unwrap().split_whitespace().nth(1).unwrap().parse::<usize>().unwrap()
    };
    assert_eq!(total(&["params", "--arch", "densenet121", "--classes", "7"]), 8_011_655);
    assert_eq!(total(&["params", "--arch", "densenet121", "--classes", "7", "--head", "stock_linear"]), 6_961_031);
    assert_eq!(total(&["params", "--arch", "resnet34", "--classes", "7"]), 21_816_135);
}

#[test]
fn rejects_unknown_config_keys() {
    let dir = TempDir::new().unwrap();
    fs::write(dir.path().join("bad.toml"), "learning_rate = 0.1\n").unwrap();
    let out = minet(dir.path(), &["params", "--config", "bad.toml"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("learning_rate"));
}

#[test]
fn train_eval_predict_round_trip() {
    let dir = workspace();
    let p = dir.path();
    ok(p, &["train", "--config", "fast.toml", "--mode", "single", "--data", "data", "--out", "run"]);
    for f in ["manifest.json", "folds.json", "fold0_log.jsonl", "fold0_ckpt.bin", "metrics.json", "metrics.txt", "confusion.tsv"] {
        assert!(p.join("run").join(f).exists(), "missing {f}");
    }

    let log = fs::read_to_string(p.join("run/fold0_log.jsonl")).unwrap();
    let lines: Vec<serde_json::Value> = log.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 1 + 1 + 3);
    assert_eq!(lines[0]["config"]["epochs"], 3);
    assert!(lines[0]["tool_version"].is_string());
    assert!(lines[1]["train_loss"].is_null());
    assert!(lines[4]["val_error_rate"].is_number());

    // Scoring the held-out fold through `eval` reproduces the training report.
    ok(p, &["eval", "--checkpoint", "run/fold0_ckpt.bin", "--subset", "val", "--out", "ev"]);
    let trained = read_json(&p.join("run/metrics.json"));
    let evaluated = read_json(&p.join("ev/metrics.json"));
    assert_eq!(trained["report"], evaluated["report"]);
    assert_eq!(
        fs::read_to_string(p.join("run/confusion.tsv")).unwrap(),
        fs::read_to_string(p.join("ev/confusion.tsv")).unwrap()
    );

    let out = ok(p, &["predict", "--checkpoint", "run/fold0_ckpt.bin", "data/square/00001.png"]);
    let probs: Vec<f64> = out.lines().map(|l| l.split('\t').nth(1).unwrap().parse().unwrap()).collect();
    assert_eq!(probs.len(), 3);
    assert!(probs.windows(2).all(|w| w[0] >= w[1]));
    assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-5);

    let out = minet(p, &["eval", "--checkpoint", "run/fold0_ckpt.bin", "--classes", "4"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("classes"));
}

#[test]
fn reruns_are_byte_identical() {
    let dir = workspace();
    let p = dir.path();
    for out in ["a", "b"] {
        ok(p, &["train", "--config", "fast.toml", "--mode", "single", "--epochs", "2", "--data", "data", "--out", out]);
    }
    let log = |d: &str| fs::read_to_string(p.join(d).join("fold0_log.jsonl")).unwrap();
    let log_b = log("b").replace("\"out\":\"b\"", "\"out\":\"a\"");
    assert_eq!(log("a"), log_b);
    assert_eq!(fs::read(p.join("a/folds.json")).unwrap(), fs::read(p.join("b/folds.json")).unwrap());
}

#[test]
fn cross_validation_writes_both_views() {
    let dir = workspace();
    let p = dir.path();
    let text = ok(p, &["train", "--config", "fast.toml", "--epochs", "1", "--data", "data", "--out", "cv"]);
    assert!(text.contains("mean over 3 folds"));
    assert!(text.contains("pooled"));
    let m = read_json(&p.join("cv/metrics.json"));
    assert_eq!(m["folds"].as_array().unwrap().len(), 3);
    let mean_err: f64 = m["folds"]
        .as_array()
        .unwrap()
        .iter()
        .map(|f| f["report"]["error_rate"].as_f64().unwrap())
        .sum::<f64>()
        / 3.0;
    assert!((m["mean"]["error_rate"].as_f64().unwrap() - mean_err).abs() < 1e-12);
    let pooled = m["pooled"]["confusion"]["counts"].as_array().unwrap();
    let total: u64 = pooled.iter().flat_map(|r| r.as_array().unwrap()).map(|v| v.as_u64().unwrap()).sum();
    assert_eq!(total, 60);
}

#[test]
fn diverged_fold_fails_the_run() {
    let dir = workspace();
    let p = dir.path();
    let out = minet(
        p,
        &["train", "--config", "fast.toml", "--mode", "single", "--lr-max", "1e6", "--data", "data", "--out", "d"],
    );
    let header = fs::read_to_string(p.join("d/fold0_log.jsonl")).unwrap();
    let header: serde_json::Value = serde_json::from_str(header.lines().next().unwrap()).unwrap();
    assert_eq!(header["status"]["status"], "diverged");
    assert!(!out.status.success());
    assert!(!p.join("d/metrics.json").exists());
    assert!(!p.join("d/fold0_ckpt.bin").exists());
}

#[test]
fn lr_find_writes_commented_table() {
    let dir = workspace();
    let p = dir.path();
    ok(p, &["lr-find", "--config", "fast.toml", "--data", "data", "--out", "lr"]);
    let text = fs::read_to_string(p.join("lr/lrfind.tsv")).unwrap();
    assert!(text.lines().any(|l| l == "# classes = 3"));
    let rows: Vec<(f64, f64)> = text
        .lines()
        .filter(|l| !l.starts_with('#') && !l.starts_with("lr"))
        .map(|l| {
            let mut it = l.split('\t').map(|v| v.parse::<f64>().unwrap());
            (it.next().unwrap(), it.next().unwrap())
        })
        .collect();
    assert!(rows.len() >= 10);
    assert!(rows.windows(2).all(|w| w[1].0 > w[0].0));
    if let Some(s) = text.lines().find_map(|l| l.strip_prefix("# suggestion ")) {
        let s: f64 = s.parse().unwrap();
        assert!(s > rows[0].0 && s < rows.last().unwrap().0, "suggestion {s}");
    }

    ok(p, &["lr-find", "--config", "fast.toml", "--data", "data", "--out", "lr2"]);
    let again = fs::read_to_string(p.join("lr2/lrfind.tsv")).unwrap();
    let body = |t: &str| t.lines().filter(|l| !l.starts_with("# out =")).collect::<Vec<_>>().join("\n");
    assert_eq!(body(&text), body(&again));
}
