//! Acceptance gate: one PASS/FAIL line per criterion. Exits non-zero if any
//! criterion fails.

mod common;

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use common::{attention_invariants, classification_permutation_error, decoupling_error, fps_oracle, knn_oracle, rng, uniform};
use ctcloud::autodiff::{Mode, OpKind};
use ctcloud::ct_block::Variant;
use ctcloud::data::{gen_part_shapes, gen_shapes};
use ctcloud::geometry::{farthest_point_sample, interpolation_weights, knn_group, InterpSpec, PointCloud};
use ctcloud::gradcheck::{run_suite, GradcheckConfig};
use ctcloud::metrics::{evaluate_classification, evaluate_segmentation};
use ctcloud::networks::{ClassificationModel, ModelConfig, SegmentationModel};
use ctcloud::training::{train, AugmentPreset, TrainConfig, TrainState};

struct Gate {
    failed: usize,
}

impl Gate {
    fn report(&mut self, id: u32, name: &str, pass: bool, detail: String, started: Instant) {
        if !pass {
            self.failed += 1;
        }
        println!(
            "[{}] criterion {}: {:<28} {}  ({:.1}s)",
            if pass { "PASS" } else { "FAIL" },
            id,
            name,
            detail,
            started.elapsed().as_secs_f64()
        );
    }
}

const GRAD_BUDGET_S: f64 = 120.0;
const INVARIANT_TOL: f64 = 1e-9;
const PERMUTATION_TOL: f64 = 1e-6;

fn gradient_suite(g: &mut Gate) {
    let t = Instant::now();
    let cfg = GradcheckConfig::default();
    let report = run_suite(&cfg).expect("suite runs");
    let secs = t.elapsed().as_secs_f64();
    let covered = OpKind::ALL.iter().all(|k| report.get(k.name()).is_some());
    let worst = |composite: bool| {
        report.results.iter().filter(|r| r.composite == composite).map(|r| r.max_rel_err).fold(0.0, f64::max)
    };
    let pass = report.passed()
        && covered
        && cfg.seeds >= 5
        && cfg.op_tol <= 1e-5
        && cfg.composite_tol <= 1e-4
        && report.get("ct_block").is_some()
        && report.get("classification_model").is_some()
        && secs < GRAD_BUDGET_S;
    let detail = format!(
        "{} ops, {} seeds, worst op {:.1e} (< 1e-5), worst composite {:.1e} (< 1e-4), {:.0}s (< {:.0}s)",
        OpKind::ALL.len(),
        cfg.seeds,
        worst(false),
        worst(true),
        secs,
        GRAD_BUDGET_S
    );
    g.report(1, "gradient suite", pass, detail, t);
}

fn attention(g: &mut Gate) {
    let t = Instant::now();
    let (mut row, mut min, mut eq) = (0.0f64, f64::INFINITY, 0.0f64);
    for seed in 0..5 {
        let (r, m, e) = attention_invariants(seed, 64, 32, 10);
        row = row.max(r);
        min = min.min(m);
        eq = eq.max(e);
    }
    let pass = row < INVARIANT_TOL && min >= 0.0 && eq < INVARIANT_TOL;
    let detail = format!("5 clouds x 10 perms: |row sum - 1| {:.1e}, min entry {:.1e}, equivariance {:.1e}", row, min, eq);
    g.report(2, "attention invariants", pass, detail, t);
}

fn geometry(g: &mut Gate) {
    let t = Instant::now();
    let mut fps_cases = 0;
    let mut fps_ok = true;
    for seed in 0..3 {
        let cloud = uniform(&[10, 3], &mut rng(100 + seed));
        for mask in 1u32..(1 << 10) {
            let idx: Vec<usize> = (0..10).filter(|i| mask & (1 << i) != 0).collect();
            let sub = cloud.select_rows(&idx).unwrap();
            for m in 1..=idx.len() {
                fps_cases += 1;
                fps_ok &= farthest_point_sample(&sub, m).unwrap() == fps_oracle(&sub, m);
            }
        }
    }
    let mut r = rng(200);
    let mut knn_ok = true;
    let mut w_err: f64 = 0.0;
    for i in 0..100 {
        let n = 4 + i % 60;
        let src = uniform(&[n, 3], &mut r);
        let q = uniform(&[9, 3], &mut r);
        let k = 1 + i % n;
        knn_ok &= knn_group(&src, &q, k).unwrap() == knn_oracle(&src, &q, k);
        let (_, w, kk) = interpolation_weights(&src, &q, InterpSpec::default()).unwrap();
        for row in w.chunks(kk) {
            w_err = w_err.max((row.iter().sum::<f64>() - 1.0).abs());
        }
    }
    let pass = fps_ok && knn_ok && w_err < INVARIANT_TOL;
    let detail = format!(
        "fps {} subset cases {}, knn 100 instances {}, weight sums within {:.1e}",
        fps_cases,
        if fps_ok { "match" } else { "MISMATCH" },
        if knn_ok { "match" } else { "MISMATCH" },
        w_err
    );
    g.report(3, "geometry oracles", pass, detail, t);
}

fn decoupling(g: &mut Gate) {
    let t = Instant::now();
    let mut worst: f64 = 0.0;
    for seed in 0..5 {
        for batch in [1, 2] {
            for mode in [Mode::Eval, Mode::Train] {
                worst = worst.max(decoupling_error(seed, batch, mode));
            }
        }
    }
    g.report(4, "decoupling", worst < INVARIANT_TOL, format!("max branch deviation {:.1e} (< 1e-9)", worst), t);
}

fn permutation_invariance(g: &mut Gate) {
    let t = Instant::now();
    let ds = gen_shapes(2, 256, 11).unwrap();
    let model = ClassificationModel::new(&ModelConfig::toy(), 256, 3, 11).unwrap();
    let clouds: Vec<PointCloud> = ds.items.iter().take(5).cloned().collect();
    let e = classification_permutation_error(&model, &clouds, 4, 12);
    g.report(5, "permutation invariance", e < PERMUTATION_TOL, format!("5 clouds x 4 perms, max fused-logit change {:.1e}", e), t);
}

fn toy_classification(g: &mut Gate) {
    let t = Instant::now();
    let mut ds = gen_shapes(87, 256, 0).unwrap();
    ds.assign_split(200, 60).unwrap();
    let (train_set, test_set) = (ds.train(), ds.test());
    let mut model = ClassificationModel::new(&ModelConfig::toy(), 256, 3, 0).unwrap();
    let cfg = TrainConfig { lr0: 0.01, epochs: 15, ..TrainConfig::default() };
    let mut st = TrainState::new(&cfg);
    train(&mut model, &train_set, &cfg, AugmentPreset::Classification, &mut st, |_| Ok(None), |_, _, _| Ok(true)).unwrap();
    let tr = evaluate_classification(&model, &train_set, 3, 16, None).unwrap().overall_accuracy;
    let te = evaluate_classification(&model, &test_set, 3, 16, None).unwrap().overall_accuracy;
    let mins = t.elapsed().as_secs_f64() / 60.0;
    let pass = tr >= 0.98 && te >= 0.90 && mins < 30.0;
    let detail = format!("{} epochs: train {:.3} (>= 0.98), test {:.3} (>= 0.90), {:.1} min (< 30)", cfg.epochs, tr, te, mins);
    g.report(6, "toy classification", pass, detail, t);
}

fn toy_segmentation(g: &mut Gate) {
    let t = Instant::now();
    let mut ds = gen_part_shapes(65, 512, 0).unwrap();
    ds.assign_split(100, 30).unwrap();
    let layout = ds.layout.clone().unwrap();
    let (train_set, test_set) = (ds.train(), ds.test());
    let mut model = SegmentationModel::new(&ModelConfig::toy(), 512, layout.clone(), 0).unwrap();
    let cfg = TrainConfig { lr0: 0.01, epochs: 30, batch_size: 8, ..TrainConfig::default() };
    let mut st = TrainState::new(&cfg);
    train(&mut model, &train_set, &cfg, AugmentPreset::Segmentation, &mut st, |_| Ok(None), |_, _, _| Ok(true)).unwrap();
    let m = evaluate_segmentation(&model, &test_set, &layout, &ds.class_names, 16, None).unwrap();
    let mins = t.elapsed().as_secs_f64() / 60.0;
    let pass = m.point_accuracy >= 0.90 && m.piou >= 0.80 && mins < 60.0;
    let detail = format!(
        "{} epochs: point acc {:.3} (>= 0.90), pIoU {:.3} (>= 0.80), {:.1} min (< 60)",
        cfg.epochs, m.point_accuracy, m.piou, mins
    );
    g.report(7, "toy segmentation", pass, detail, t);
}

fn ablation(g: &mut Gate) {
    let t = Instant::now();
    let variants = [Variant::Full, Variant::ConvOnly, Variant::TransformerOnly, Variant::NoTransmission];
    let mut means = Vec::new();
    for v in variants {
        let mut sum = 0.0;
        for seed in 0..3 {
            let mut ds = gen_shapes(87, 256, seed).unwrap();
            ds.assign_split(200, 60).unwrap();
            let (train_set, test_set) = (ds.train(), ds.test());
            let mut mc = ModelConfig::toy();
            mc.variant = v;
            let mut model = ClassificationModel::new(&mc, 256, 3, seed).unwrap();
            let cfg = TrainConfig { lr0: 0.01, epochs: 10, seed, ..TrainConfig::default() };
            let mut st = TrainState::new(&cfg);
            train(&mut model, &train_set, &cfg, AugmentPreset::Classification, &mut st, |_| Ok(None), |_, _, _| Ok(true))
                .unwrap();
            sum += evaluate_classification(&model, &test_set, 3, 16, None).unwrap().overall_accuracy;
        }
        means.push(sum / 3.0);
    }
    let pass = means[1..].iter().all(|&m| means[0] >= m);
    let detail = format!(
        "mean test OA over 3 seeds: full {:.3}, conv-only {:.3}, transformer-only {:.3}, no-transmission {:.3}",
        means[0], means[1], means[2], means[3]
    );
    g.report(8, "ablation ordering", pass, detail, t);
}

fn file_hash(p: &Path) -> u64 {
    let mut h = DefaultHasher::new();
    std::fs::read(p).expect("metrics.csv").hash(&mut h);
    h.finish()
}

fn determinism(g: &mut Gate) {
    let t = Instant::now();
    let bin = env!("CARGO_BIN_EXE_ctcloud");
    let dir = tempfile::tempdir().unwrap();
    let run = |args: &[&str]| {
        let ok = Command::new(bin).args(args).env_remove("CTCLOUD_SEED").status().expect("binary runs").success();
        assert!(ok, "ctcloud {:?} failed", args);
    };
    let data = dir.path().join("data");
    run(&["synth", "--out", data.to_str().unwrap(), "--set", "seed=3"]);
    let manifest = format!("data.manifest={}", data.join("manifest.json").display());
    let mut hashes = Vec::new();
    for name in ["a", "b"] {
        let out = dir.path().join(name);
        run(&["train", "--out", out.to_str().unwrap(), "--set", &manifest, "--set", "seed=3", "--set", "train.epochs=3", "--set", "train.lr0=0.01"]);
        hashes.push(file_hash(&out.join("metrics.csv")));
    }
    let detail = format!("metrics.csv hashes {:016x} / {:016x}", hashes[0], hashes[1]);
    g.report(9, "determinism", hashes[0] == hashes[1], detail, t);
}

fn main() {
    let mut g = Gate { failed: 0 };
    gradient_suite(&mut g);
    attention(&mut g);
    geometry(&mut g);
    decoupling(&mut g);
    permutation_invariance(&mut g);
    toy_classification(&mut g);
    toy_segmentation(&mut g);
    ablation(&mut g);
    determinism(&mut g);
    if g.failed > 0 {
        println!("acceptance: {} criterion(s) failed", g.failed);
        std::process::exit(1);
    }
    println!("acceptance: all criteria passed");
}
