use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const SMALL: &str = r#"{"data": {"images": 40}, "train": {"epochs": 2, "batch_images": 8}}"#;

fn divemb(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_divemb")).args(args).output().unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn ok(args: &[&str]) -> Output {
    let out = divemb(args);
    assert_eq!(code(&out), 0, "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn small_config(dir: &Path) -> String {
    let p = dir.join("small.json");
    fs::write(&p, SMALL).unwrap();
    p.to_str().unwrap().to_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn usage_and_validation_errors_exit_one() {
    assert_eq!(code(&divemb(&["train"])), 1);
    assert_eq!(code(&divemb(&["no-such-command"])), 1);
    let tmp = tempfile::tempdir().unwrap();
    let bad = tmp.path().join("bad.json");
    fs::write(&bad, r#"{"predictor": {"kk": 3}}"#).unwrap();
    let out = divemb(&["train", "--config", s(&bad), "--out", s(&tmp.path().join("o"))]);
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("kk"));
    assert_eq!(code(&divemb(&["--workers", "0", "bench"])), 1);
    assert_eq!(code(&divemb(&["gradcheck", "--only", "nonsense"])), 1);
}

#[test]
fn io_errors_exit_three_and_corrupt_files_exit_one() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("missing.divp");
    assert_eq!(code(&divemb(&["eval", "--checkpoint", s(&missing)])), 3);
    let junk = tmp.path().join("junk.divp");
    fs::write(&junk, b"not a checkpoint").unwrap();
    assert_eq!(code(&divemb(&["eval", "--checkpoint", s(&junk)])), 1);
}

#[test]
fn diverging_training_exits_two() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("hot.json");
    fs::write(
        &cfg,
        r#"{"data": {"images": 20}, "train": {"epochs": 1, "batch_images": 4, "lr": 1e300, "grad_clip": 0}}"#,
    )
    .unwrap();
    let out = tmp.path().join("run");
    assert_eq!(code(&divemb(&["train", "--config", s(&cfg), "--out", s(&out)])), 2);
}

#[test]
fn datagen_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path());
    let (a, b) = (tmp.path().join("a.divc"), tmp.path().join("b.divc"));
    ok(&["datagen", "--config", &cfg, "--out", s(&a)]);
    ok(&["datagen", "--config", &cfg, "--out", s(&b)]);
    let bytes = fs::read(&a).unwrap();
    assert_eq!(&bytes[..4], b"DIVC");
    assert_eq!(bytes, fs::read(&b).unwrap());
}

#[test]
fn train_then_eval_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path());
    let corpus = tmp.path().join("c.divc");
    ok(&["datagen", "--config", &cfg, "--out", s(&corpus)]);
    let run = tmp.path().join("run");
    ok(&["train", "--config", &cfg, "--corpus", s(&corpus), "--out", s(&run)]);
    for f in ["config.json", "metrics.csv", "steps.csv", "last.divp", "best.divp", "report.json"] {
        assert!(run.join(f).is_file(), "{f}");
    }
    let metrics = fs::read_to_string(run.join("metrics.csv")).unwrap();
    let mut lines = metrics.lines();
    assert!(lines.next().unwrap().starts_with("# config_hash="));
    assert_eq!(lines.next().unwrap(), divemb::trainer::EPOCH_CSV_HEADER);
    assert_eq!(lines.count(), 2);

    let report: serde_json::Value = serde_json::from_slice(&fs::read(run.join("report.json")).unwrap()).unwrap();
    let hash = report["config_hash"].as_str().unwrap().to_owned();
    assert!(metrics.contains(&hash));

    let best = run.join("best.divp");
    let ev = tmp.path().join("eval");
    let out = ok(&["eval", "--checkpoint", s(&best), "--corpus", s(&corpus), "--out", s(&ev)]);
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["config_hash"], hash.as_str());
    let rsum = v["report"]["rsum"].as_f64().unwrap();
    assert!((0.0..=600.0).contains(&rsum));
    assert_eq!(v["report"]["slot_ablation"].as_array().unwrap().len(), 8);
    let csv = fs::read_to_string(ev.join("report.csv")).unwrap();
    assert!(csv.starts_with(&format!("# config_hash={hash}\nmetric,value\n")));

    let masked = ok(&["eval", "--checkpoint", s(&best), "--corpus", s(&corpus), "--slot-mask", "1,0,1,1"]);
    let m: serde_json::Value = serde_json::from_slice(&masked.stdout).unwrap();
    assert!(m["report"].get("slot_ablation").is_none());
    assert_eq!(code(&divemb(&["eval", "--checkpoint", s(&best), "--slot-mask", "1,0"])), 1);

    let val = ok(&["eval", "--checkpoint", s(&best), "--corpus", s(&corpus), "--split", "val"]);
    let val: serde_json::Value = serde_json::from_slice(&val.stdout).unwrap();
    assert_eq!(val["split"], "val");
}

#[test]
fn ensemble_of_one_model_twice_matches_the_model() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path());
    let run = tmp.path().join("run");
    ok(&["train", "--config", &cfg, "--out", s(&run)]);
    let best = run.join("best.divp");
    let single: serde_json::Value =
        serde_json::from_slice(&ok(&["eval", "--checkpoint", s(&best)]).stdout).unwrap();
    let pair: serde_json::Value =
        serde_json::from_slice(&ok(&["eval", "--ensemble", s(&best), s(&best)]).stdout).unwrap();
    assert_eq!(single["report"]["rsum"], pair["report"]["rsum"]);
    assert_eq!(pair["checkpoints"].as_array().unwrap().len(), 2);
}

#[test]
fn gradcheck_suites() {
    let out = ok(&["gradcheck"]);
    let text = String::from_utf8(out.stdout).unwrap();
    for prefix in ["primitive/", "smooth-chamfer/", "similarity/", "predictor", "end-to-end/"] {
        assert!(text.lines().any(|l| l.starts_with(prefix)), "{prefix}");
    }
    assert!(!text.contains("FAIL"));
    let only = String::from_utf8(ok(&["gradcheck", "--only", "smooth-chamfer"]).stdout).unwrap();
    assert_eq!(only.lines().count(), 3);
}

#[test]
fn bench_reports_every_kind() {
    let out = ok(&["bench", "--k", "2", "--d", "16", "--queries", "3", "--index", "5"]);
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    let rows = v["rows"].as_array().unwrap();
    assert_eq!(rows.len(), 4);
    for r in rows {
        assert_eq!(r["pairs"], 15);
        assert!(r["pairs_per_second"].as_f64().unwrap() > 0.0);
    }
    assert!((v["sc_ratio_to_reference"].as_f64().unwrap() - 16547.0 / 16400.0).abs() < 1e-12);
}

#[test]
fn ablate_writes_one_row_per_value() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path());
    let out = tmp.path().join("abl");
    ok(&["ablate", "--config", &cfg, "--grid", "k", "--values", "1,2", "--epochs", "1", "--out", s(&out)]);
    let csv = fs::read_to_string(out.join("ablate.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().filter(|l| l.starts_with("k,")).collect();
    assert_eq!(rows.len(), 2);
    assert!(out.join("k-1").join("metrics.csv").is_file());
    assert_eq!(code(&divemb(&["ablate", "--config", &cfg, "--grid", "k", "--values", "x", "--out", s(&out)])), 1);
}
