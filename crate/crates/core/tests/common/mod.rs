//! Oracles and fixtures shared by the integration tests and the
//! acceptance gate.
#![allow(dead_code)]

use ctcloud::attention::{OaConfig, OffsetAttention};
use ctcloud::autodiff::Mode;
use ctcloud::ct_block::{BranchState, CtBlock, CtBlockConfig, Variant};
use ctcloud::geometry::PointCloud;
use ctcloud::networks::{ClassificationModel, ModelConfig};
use ctcloud::nn::{Forward, Init};
use ctcloud::params::ParamStore;
use ctcloud::Tensor;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

pub fn permutation(n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut p: Vec<usize> = (0..n).collect();
    p.shuffle(rng);
    p
}

fn d2(a: &[f64], b: &[f64]) -> f64 {
    (0..3).map(|i| (a[i] - b[i]).powi(2)).sum()
}

/// Whether `a` precedes `b` in canonical order (lexicographic coordinates,
/// then index).
fn canon_less(c: &Tensor, a: usize, b: usize) -> bool {
    let (ra, rb) = (c.row(a), c.row(b));
    for k in 0..3 {
        if ra[k] != rb[k] {
            return ra[k] < rb[k];
        }
    }
    a < b
}

/// Brute-force max-min selection: the first pick is farthest from the
/// centroid, every later pick maximizes the minimum distance to all picks
/// so far, recomputed from scratch. Ties go to the canonically smaller
/// point.
pub fn fps_oracle(c: &Tensor, n_out: usize) -> Vec<usize> {
    let n = c.rows();
    let mut centroid = [0.0; 3];
    for i in 0..n {
        for k in 0..3 {
            centroid[k] += c.row(i)[k] / n as f64;
        }
    }
    let better = |score: f64, i: usize, best: Option<(f64, usize)>| match best {
        None => true,
        Some((s, j)) => score > s || (score == s && canon_less(c, i, j)),
    };
    let mut best = None;
    for i in 0..n {
        let s = d2(c.row(i), &centroid);
        if better(s, i, best) {
            best = Some((s, i));
        }
    }
    let mut chosen = vec![best.unwrap().1];
    while chosen.len() < n_out {
        let mut best = None;
        for i in (0..n).filter(|i| !chosen.contains(i)) {
            let s = chosen.iter().map(|&j| d2(c.row(i), c.row(j))).fold(f64::INFINITY, f64::min);
            if better(s, i, best) {
                best = Some((s, i));
            }
        }
        chosen.push(best.unwrap().1);
    }
    chosen
}

/// Exhaustive sort of every source point by (distance, index).
pub fn knn_oracle(src: &Tensor, query: &Tensor, k: usize) -> Vec<usize> {
    let mut out = Vec::new();
    for q in 0..query.rows() {
        let mut all: Vec<(f64, usize)> = (0..src.rows()).map(|j| (d2(src.row(j), query.row(q)), j)).collect();
        all.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
        out.extend(all[..k].iter().map(|p| p.1));
    }
    out
}

/// Offset attention on random features: `(max |row sum − 1|, min entry,
/// max equivariance error over perms)`.
pub fn attention_invariants(seed: u64, n: usize, d_e: usize, perms: usize) -> (f64, f64, f64) {
    let mut r = rng(seed);
    let mut store = ParamStore::new();
    let oa = OffsetAttention::new(&mut Init::new(&mut store, seed), "oa", OaConfig::new(d_e)).unwrap();
    let x = uniform(&[n, d_e], &mut r);
    let mut fw = Forward::new(&store, Mode::Eval);
    let xv = fw.g.constant(x.clone());
    let tr = oa.trace(&mut fw, xv, 1).unwrap();
    let a = fw.g.value(tr.attention).clone().reshape(&[n, n]).unwrap();
    let row_err = (0..n).map(|i| (a.row(i).iter().sum::<f64>() - 1.0).abs()).fold(0.0, f64::max);
    let min_entry = a.data().iter().copied().fold(f64::INFINITY, f64::min);
    let y = fw.g.value(tr.output).clone();
    let mut eq_err: f64 = 0.0;
    for _ in 0..perms {
        let p = permutation(n, &mut r);
        let mut fw = Forward::new(&store, Mode::Eval);
        let xp = fw.g.constant(x.select_rows(&p).unwrap());
        let yp = oa.forward(&mut fw, xp).unwrap();
        eq_err = eq_err.max(fw.g.value(yp).max_abs_diff(&y.select_rows(&p).unwrap()));
    }
    (row_err, min_entry, eq_err)
}

/// Runs one block on random inputs; returns (local out, global out).
pub fn run_block(block: &CtBlock, store: &ParamStore, inputs: &BlockInputs, mode: Mode) -> (Option<Tensor>, Option<Tensor>) {
    let mut fw = Forward::new(store, mode);
    let b = inputs.coords.len();
    let n = inputs.coords[0].rows();
    let state = BranchState {
        local: block.conv.as_ref().map(|_| fw.g.constant(inputs.local.clone())),
        local_coords: inputs.coords.clone(),
        local_global_idx: vec![(0..n).collect(); b],
        global: block.trans.as_ref().map(|_| fw.g.constant(inputs.global.clone())),
        global_coords: inputs.coords.clone(),
    };
    let out = block.forward(&mut fw, &state).unwrap();
    (out.local.map(|v| fw.g.value(v).clone()), out.global.map(|v| fw.g.value(v).clone()))
}

pub struct BlockInputs {
    pub coords: Vec<Tensor>,
    pub local: Tensor,
    pub global: Tensor,
}

impl BlockInputs {
    pub fn random(seed: u64, batch: usize, n: usize, c: usize, d_e: usize) -> Self {
        let mut r = rng(seed);
        Self {
            coords: (0..batch).map(|_| uniform(&[n, 3], &mut r)).collect(),
            local: uniform(&[batch * n, c], &mut r),
            global: uniform(&[batch * n, d_e], &mut r),
        }
    }
}

/// Copies every parameter and buffer of `dst` from the same-named entry
/// of `src`.
pub fn copy_shared(src: &ParamStore, dst: &mut ParamStore) {
    let names: Vec<String> = dst.names().map(String::from).collect();
    for n in names {
        dst.set(&n, src.get(&n).expect("shared parameter").value.clone()).unwrap();
    }
    let bufs: Vec<String> = dst.buffers().map(|(n, _)| n.clone()).collect();
    for n in bufs {
        dst.set_buffer(&n, src.buffer(&n).expect("shared buffer").clone()).unwrap();
    }
}

/// Zeroes the transmission elements of a full block and compares its branch
/// outputs with standalone convolution-only and transformer-only blocks
/// that share its weights. Returns the larger of the two max abs errors.
pub fn decoupling_error(seed: u64, batch: usize, mode: Mode) -> f64 {
    let (n, c, d_e) = (32, 6, 16);
    let cfg = CtBlockConfig::new(n, c, 12, 16, 4, d_e);
    let mut store = ParamStore::new();
    let full = CtBlock::new(&mut Init::new(&mut store, seed), "b", cfg.clone()).unwrap();
    for ft in [&full.ft1, &full.ft2].into_iter().flatten() {
        ft.zero(&mut store).unwrap();
    }
    let inputs = BlockInputs::random(seed ^ 0xabc, batch, n, c, d_e);
    let (l, g) = run_block(&full, &store, &inputs, mode);

    let standalone = |v: Variant| {
        let mut cfg = cfg.clone();
        cfg.variant = v;
        let mut s = ParamStore::new();
        let blk = CtBlock::new(&mut Init::new(&mut s, seed.wrapping_add(1)), "b", cfg).unwrap();
        copy_shared(&store, &mut s);
        run_block(&blk, &s, &inputs, mode)
    };
    let (lc, _) = standalone(Variant::ConvOnly);
    let (_, gt) = standalone(Variant::TransformerOnly);
    let el = l.unwrap().max_abs_diff(&lc.unwrap());
    let eg = g.unwrap().max_abs_diff(&gt.unwrap());
    el.max(eg)
}

/// A cloud of `n` distinct points on a unit-ish blob.
pub fn distinct_cloud(n: usize, r: &mut ChaCha8Rng) -> PointCloud {
    PointCloud::new(uniform(&[n, 3], r)).unwrap()
}

/// Max change of the fused classification logits under random input
/// permutations (eval mode).
pub fn classification_permutation_error(model: &ClassificationModel, clouds: &[PointCloud], perms: usize, seed: u64) -> f64 {
    let mut r = rng(seed);
    let mut worst: f64 = 0.0;
    for c in clouds {
        let base = model.classify(c, Mode::Eval).unwrap().fused;
        for _ in 0..perms {
            let p = permutation(c.len(), &mut r);
            let out = model.classify(&c.permuted(&p).unwrap(), Mode::Eval).unwrap().fused;
            worst = worst.max(out.max_abs_diff(&base));
        }
    }
    worst
}

pub fn toy_classifier(n: usize, seed: u64) -> ClassificationModel {
    ClassificationModel::new(&ModelConfig::toy(), n, 3, seed).unwrap()
}
