use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_ctcloud");

fn ctcloud(args: &[&str]) -> Output {
    Command::new(BIN).args(args).env_remove("CTCLOUD_SEED").output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Every file under `dir` with its bytes, keyed by relative path.
fn snapshot(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap());
            }
        }
    }
    out
}

const SMALL: [&str; 8] =
    ["--set", "data.n_per_class=4", "--set", "data.n_points=64", "--set", "data.n_train=8", "--set", "data.n_test=4"];

fn synth(dir: &Path, extra: &[&str]) -> PathBuf {
    let mut args = vec!["synth", "--out", s(dir)];
    args.extend(SMALL);
    args.extend(extra);
    let o = ctcloud(&args);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    dir.join("manifest.json")
}

fn train(manifest: &Path, out: &Path, extra: &[&str]) -> Output {
    let m = format!("data.manifest={}", s(manifest));
    let mut args = vec!["train", "--out", s(out), "--set", &m, "--set", "train.batch_size=4", "--set", "train.lr0=0.01"];
    args.extend(extra);
    ctcloud(&args)
}

fn param_lines(ckpt: &Path) -> Vec<String> {
    fs::read_to_string(ckpt).unwrap().lines().filter(|l| l.starts_with("param ")).map(String::from).collect()
}

#[test]
fn synth_writes_manifest_and_is_reproducible() {
    let t = tempfile::tempdir().unwrap();
    let (a, b) = (t.path().join("a"), t.path().join("b"));
    let m = synth(&a, &["--set", "seed=5"]);
    synth(&b, &["--set", "seed=5"]);
    let json: serde_json::Value = serde_json::from_str(&fs::read_to_string(&m).unwrap()).unwrap();
    assert_eq!(json["items"].as_array().unwrap().len(), 12);
    assert!(a.join("config.toml").exists());
    assert_eq!(snapshot(&a), snapshot(&b));

    let c = t.path().join("c");
    synth(&c, &["--set", "seed=6"]);
    assert_ne!(snapshot(&a), snapshot(&c));
}

#[test]
fn seed_falls_back_to_environment() {
    let t = tempfile::tempdir().unwrap();
    let o = Command::new(BIN)
        .args(["synth", "--out", s(t.path())])
        .args(SMALL)
        .env("CTCLOUD_SEED", "42")
        .output()
        .unwrap();
    assert_eq!(code(&o), 0);
    let cfg = fs::read_to_string(t.path().join("config.toml")).unwrap();
    assert!(cfg.lines().any(|l| l.trim() == "seed = 42"), "{}", cfg);
}

#[test]
fn usage_errors_exit_2() {
    let t = tempfile::tempdir().unwrap();
    let out = s(t.path());
    assert_eq!(code(&ctcloud(&["synth", "--bogus", "--out", out])), 2);
    assert_eq!(code(&ctcloud(&["synth"])), 2);
    assert_eq!(code(&ctcloud(&["frobnicate", "--out", out])), 2);
    assert_eq!(code(&ctcloud(&["synth", "--out", out, "--set", "novalue"])), 2);
    assert_eq!(code(&ctcloud(&["synth", "--out", out, "--set", "train.nonsense=1"])), 2);
    assert_eq!(code(&ctcloud(&["--help"])), 0);
}

#[test]
fn runtime_errors_exit_1() {
    let t = tempfile::tempdir().unwrap();
    let o = ctcloud(&["train", "--out", s(&t.path().join("r"))]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("manifest"));
    let missing = t.path().join("nope.json");
    let o = train(&missing, &t.path().join("r2"), &[]);
    assert_eq!(code(&o), 1);
    let cfg = t.path().join("missing.toml");
    assert_eq!(code(&ctcloud(&["synth", "--config", s(&cfg), "--out", s(t.path())])), 1);
}

#[test]
fn zero_learning_rate_keeps_initial_parameters() {
    let t = tempfile::tempdir().unwrap();
    let m = synth(&t.path().join("d"), &[]);
    let r = t.path().join("r");
    let o = train(&m, &r, &["--set", "train.epochs=2", "--set", "train.lr0=0"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(param_lines(&r.join("init.ckpt")), param_lines(&r.join("final.ckpt")));
    let csv = fs::read_to_string(r.join("metrics.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);
}

#[test]
fn resumed_run_equals_uninterrupted_run() {
    let t = tempfile::tempdir().unwrap();
    let m = synth(&t.path().join("d"), &[]);
    let (full, part, rest) = (t.path().join("full"), t.path().join("part"), t.path().join("rest"));
    assert_eq!(code(&train(&m, &full, &["--set", "train.epochs=3"])), 0);
    assert_eq!(code(&train(&m, &part, &["--set", "train.epochs=3", "--set", "stop_after=1"])), 0);
    let ck = format!("resume={}", s(&part.join("last.ckpt")));
    assert_eq!(code(&train(&m, &rest, &["--set", "train.epochs=3", "--set", &ck])), 0);

    assert_eq!(fs::read(full.join("final.ckpt")).unwrap(), fs::read(rest.join("final.ckpt")).unwrap());
    let rows = |p: &Path| fs::read_to_string(p.join("metrics.csv")).unwrap().lines().skip(1).map(String::from).collect::<Vec<_>>();
    let mut joined = rows(&part);
    joined.extend(rows(&rest));
    assert_eq!(joined, rows(&full));
}

#[test]
fn effective_config_reproduces_the_run() {
    let t = tempfile::tempdir().unwrap();
    let m = synth(&t.path().join("d"), &[]);
    let a = t.path().join("a");
    assert_eq!(code(&train(&m, &a, &["--set", "train.epochs=1", "--set", "seed=9"])), 0);
    let b = t.path().join("b");
    let o = ctcloud(&["train", "--config", s(&a.join("config.toml")), "--out", s(&b)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(fs::read(a.join("metrics.csv")).unwrap(), fs::read(b.join("metrics.csv")).unwrap());
    assert_eq!(fs::read(a.join("final.ckpt")).unwrap(), fs::read(b.join("final.ckpt")).unwrap());
}

#[test]
fn eval_writes_metrics_and_rejects_mismatched_checkpoints() {
    let t = tempfile::tempdir().unwrap();
    let m = synth(&t.path().join("d"), &[]);
    let r = t.path().join("r");
    assert_eq!(code(&train(&m, &r, &["--set", "train.epochs=1"])), 0);
    let man = format!("data.manifest={}", s(&m));
    let ck = format!("eval.checkpoint={}", s(&r.join("final.ckpt")));
    let e = t.path().join("e");
    let o = ctcloud(&["eval", "--out", s(&e), "--set", &man, "--set", &ck, "--set", "eval.multi_scale=true"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let json: serde_json::Value = serde_json::from_str(&fs::read_to_string(e.join("metrics.json")).unwrap()).unwrap();
    for key in ["overall_accuracy", "mean_class_accuracy", "count"] {
        assert!(json.get(key).is_some(), "{}", key);
    }
    assert_eq!(json["count"], 4);

    // Same data, different model width: the checkpoint no longer fits.
    let o = ctcloud(&["eval", "--out", s(&e), "--set", &man, "--set", &ck, "--set", "model.head_hidden=7"]);
    assert_eq!(code(&o), 1);

    let seg = synth(&t.path().join("seg"), &["--set", "data.task=part_segmentation", "--set", "data.n_per_class=6"]);
    let sm = format!("data.manifest={}", s(&seg));
    let sr = t.path().join("sr");
    let o = ctcloud(&["train", "--out", s(&sr), "--set", &sm, "--set", "train.epochs=1", "--set", "train.batch_size=4"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let sck = format!("eval.checkpoint={}", s(&sr.join("final.ckpt")));
    let se = t.path().join("se");
    assert_eq!(code(&ctcloud(&["eval", "--out", s(&se), "--set", &sm, "--set", &sck])), 0);
    let json: serde_json::Value = serde_json::from_str(&fs::read_to_string(se.join("metrics.json")).unwrap()).unwrap();
    assert!(json["piou"].as_f64().is_some());
    assert!(json["category_iou"]["cylinder"].as_f64().is_some());
    // A classification checkpoint does not fit the segmentation model.
    assert_eq!(code(&ctcloud(&["eval", "--out", s(&se), "--set", &sm, "--set", &ck])), 1);
}

#[test]
fn gradcheck_reports_every_op() {
    let t = tempfile::tempdir().unwrap();
    let o = ctcloud(&["gradcheck", "--out", s(t.path()), "--set", "gradcheck.seeds=1", "--set", "gradcheck.segmentation=false"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stdout));
    let csv = fs::read_to_string(t.path().join("gradcheck.csv")).unwrap();
    for op in ctcloud::autodiff::OpKind::ALL {
        assert!(csv.lines().any(|l| l.starts_with(&format!("{},false,", op.name()))), "{}", op.name());
    }
    for name in ["offset_attention", "ct_block", "classification_model"] {
        assert!(csv.contains(name));
    }
    // An impossible tolerance makes the command fail.
    let o = ctcloud(&["gradcheck", "--out", s(t.path()), "--set", "gradcheck.seeds=1", "--set", "gradcheck.segmentation=false", "--set", "gradcheck.op_tol=0.0"]);
    assert_eq!(code(&o), 1);
}
