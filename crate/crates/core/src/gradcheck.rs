//! Central finite-difference checks of the tape's backward rules and of
//! whole layers / networks.
//!
//! The error of one tensor is `‖a − n‖₂ / max(‖a‖₂, ‖n‖₂, f)` where `a` is
//! the analytic and `n` the numeric gradient, and the floor `f` is
//! [`REL_FLOOR`] times the norm of the whole analytic gradient (all tensors
//! of the check together). The floor only matters for tensors whose true
//! gradient is zero or nearly so, such as a bias feeding a training-mode
//! BatchNorm, where the ratio would otherwise just measure rounding noise.
//! A check reports the maximum over all tensors and seeds.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::attention::{OaConfig, OffsetAttention};
use crate::autodiff::{Graph, Mode, OpKind, RunningStats, Var};
use crate::ct_block::{BranchState, CtBlock, CtBlockConfig};
use crate::error::{Error, Result};
use crate::geometry::PointCloud;
use crate::networks::{ClassificationModel, ModelConfig, PartLayout, PointModel, SegmentationModel};
use crate::nn::{mix, Forward, Init};
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// Floor of the per-tensor denominator, relative to the whole gradient.
pub const REL_FLOOR: f64 = 1e-3;
/// Absolute floor, for checks whose whole gradient vanishes.
pub const ABS_FLOOR: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradcheckConfig {
    pub seeds: usize,
    /// Finite-difference step for single ops.
    pub op_step: f64,
    /// Finite-difference step for layers and networks.
    pub composite_step: f64,
    pub op_tol: f64,
    pub composite_tol: f64,
    /// Also run the (slower) segmentation network check.
    pub segmentation: bool,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self { seeds: 5, op_step: 1e-6, composite_step: 1e-4, op_tol: 1e-5, composite_tol: 1e-4, segmentation: true }
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// `‖a − n‖₂ / max(‖a‖₂, ‖n‖₂, floor)`.
pub fn relative_error(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    let diff: f64 = analytic.iter().zip(numeric).map(|(a, n)| (a - n) * (a - n)).sum::<f64>().sqrt();
    diff / norm(analytic).max(norm(numeric)).max(floor)
}

/// Floor for a check whose analytic gradients are `tensors`.
fn floor_of<'a>(tensors: impl Iterator<Item = &'a [f64]>) -> f64 {
    let total: f64 = tensors.map(|t| t.iter().map(|x| x * x).sum::<f64>()).sum();
    (REL_FLOOR * total.sqrt()).max(ABS_FLOOR)
}

/// Compares tape gradients of `build(inputs)` (a scalar) against central
/// differences over every entry of every input. Returns one error per
/// input.
pub fn check_graph<F>(inputs: &[Tensor], step: f64, build: F) -> Result<Vec<f64>>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let eval = |xs: &[Tensor]| -> Result<(f64, u64)> {
        let mut g = Graph::new();
        let vars: Vec<Var> = xs.iter().map(|x| g.constant(x.clone())).collect();
        let out = build(&mut g, &vars)?;
        Ok((g.value(out).data()[0], g.branch_signature()))
    };
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|x| g.input(x.clone())).collect();
    let out = build(&mut g, &vars)?;
    g.backward(out)?;
    let base = (g.value(out).data()[0], g.branch_signature());
    let floor = floor_of(vars.iter().map(|&v| g.grad(v).expect("input leaf").data()));
    let mut errs = Vec::with_capacity(inputs.len());
    let mut xs = inputs.to_vec();
    for (t, &v) in vars.iter().enumerate() {
        let analytic = g.grad(v).expect("input leaf").data().to_vec();
        let mut numeric = vec![0.0; analytic.len()];
        for (i, n) in numeric.iter_mut().enumerate() {
            *n = probe(step, base, |x| {
                let orig = xs[t].data()[i];
                xs[t].data_mut()[i] = orig + x;
                let r = eval(&xs);
                xs[t].data_mut()[i] = orig;
                r
            })?;
        }
        errs.push(relative_error(&analytic, &numeric, floor));
    }
    Ok(errs)
}

/// Numeric derivative at 0 of `f(shift)`, which returns the loss and the
/// branch signature. Central differences whose probes stay on the base
/// point's smooth piece are preferred; otherwise the step shrinks (down
/// to `step / 100`), and finally a one-sided difference on the side that
/// stays on the piece is used.
fn probe(step: f64, base: (f64, u64), mut f: impl FnMut(f64) -> Result<(f64, u64)>) -> Result<f64> {
    let mut last = None;
    for h in [step, step / 10.0, step / 100.0] {
        let (up, su) = f(h)?;
        let (down, sd) = f(-h)?;
        if su == base.1 && sd == base.1 {
            return Ok((up - down) / (2.0 * h));
        }
        last = Some((h, up, su, down, sd));
    }
    let (h, up, su, down, sd) = last.expect("three attempts");
    Ok(if su == base.1 {
        (up - base.0) / h
    } else if sd == base.1 {
        (base.0 - down) / h
    } else {
        (up - down) / (2.0 * h)
    })
}

/// Like [`check_graph`] for a pass that also reads parameters from
/// `store`: checks every parameter tensor and every input. Runs in
/// training mode; BatchNorm statistic updates are discarded.
pub fn check_with_params<F>(store: &ParamStore, inputs: &[Tensor], step: f64, build: F) -> Result<BTreeMap<String, f64>>
where
    F: Fn(&mut Forward, &[Var]) -> Result<Var>,
{
    let eval = |st: &ParamStore, xs: &[Tensor]| -> Result<(f64, u64)> {
        let mut fw = Forward::new(st, Mode::Train);
        let vars: Vec<Var> = xs.iter().map(|x| fw.g.constant(x.clone())).collect();
        let out = build(&mut fw, &vars)?;
        Ok((fw.g.value(out).data()[0], fw.g.branch_signature()))
    };
    let mut fw = Forward::new(store, Mode::Train);
    let vars: Vec<Var> = inputs.iter().map(|x| fw.g.input(x.clone())).collect();
    let out = build(&mut fw, &vars)?;
    fw.backward(out)?;
    let base = (fw.g.value(out).data()[0], fw.g.branch_signature());
    let input_grads: Vec<Vec<f64>> = vars.iter().map(|&v| fw.g.grad(v).expect("input leaf").data().to_vec()).collect();
    let updates = fw.into_updates();
    let floor = floor_of(updates.grads.values().map(Tensor::data).chain(input_grads.iter().map(Vec::as_slice)));

    let mut errs = BTreeMap::new();
    let mut st = store.clone();
    let names: Vec<String> = store.names().map(str::to_string).collect();
    for name in names {
        let len = store.get(&name).expect("listed").value.len();
        let analytic = updates.grads.get(&name).map_or_else(|| vec![0.0; len], |g| g.data().to_vec());
        let mut numeric = vec![0.0; len];
        for (i, n) in numeric.iter_mut().enumerate() {
            *n = probe(step, base, |x| {
                let orig = st.get(&name).expect("listed").value.data()[i];
                st.get_mut(&name).expect("listed").value.data_mut()[i] = orig + x;
                let r = eval(&st, inputs);
                st.get_mut(&name).expect("listed").value.data_mut()[i] = orig;
                r
            })?;
        }
        errs.insert(name, relative_error(&analytic, &numeric, floor));
    }
    let mut xs = inputs.to_vec();
    for (t, analytic) in input_grads.iter().enumerate() {
        let mut numeric = vec![0.0; analytic.len()];
        for (i, n) in numeric.iter_mut().enumerate() {
            *n = probe(step, base, |x| {
                let orig = xs[t].data()[i];
                xs[t].data_mut()[i] = orig + x;
                let r = eval(store, &xs);
                xs[t].data_mut()[i] = orig;
                r
            })?;
        }
        errs.insert(format!("input.{}", t), relative_error(analytic, &numeric, floor));
    }
    Ok(errs)
}

fn normal(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.sample(StandardNormal))
}

/// Entries with magnitude in `[0.1, 1)` and random sign, away from the
/// ReLU kink.
fn off_kink(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| {
        let m = rng.gen_range(0.1..1.0);
        if rng.gen_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

/// Distinct values at least 0.05 apart, so no max changes under a small
/// step.
fn separated(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let mut v: Vec<f64> = (0..n).map(|i| i as f64 * 0.1 + rng.gen_range(-0.025..0.025)).collect();
    rand::seq::SliceRandom::shuffle(v.as_mut_slice(), rng);
    Tensor::new(shape.to_vec(), v).expect("non-empty")
}

/// `sum(x ⊙ R)` for a fixed random `R`, making every output entry matter.
fn project(g: &mut Graph, x: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(mix(seed, 0x5EED));
    let r = g.constant(normal(g.shape(x), &mut rng));
    let p = g.mul(x, r)?;
    Ok(g.sum(p))
}

/// Worst error of one differentiable op over all seeds.
pub fn check_op(kind: OpKind, seeds: usize, step: f64) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for seed in 0..seeds as u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(mix(seed, kind as u64));
        let r = &mut rng;
        let errs = match kind {
            OpKind::MatMul => {
                let mut e = check_graph(&[normal(&[4, 5], r), normal(&[5, 3], r)], step, |g, v| {
                    let y = g.matmul(v[0], v[1])?;
                    project(g, y, seed)
                })?;
                e.extend(check_graph(&[normal(&[2, 3, 4], r), normal(&[2, 4, 3], r)], step, |g, v| {
                    let y = g.matmul(v[0], v[1])?;
                    project(g, y, seed)
                })?);
                e
            }
            OpKind::Add | OpKind::Sub | OpKind::Mul => {
                check_graph(&[normal(&[3, 4], r), normal(&[3, 4], r)], step, |g, v| {
                    let y = match kind {
                        OpKind::Add => g.add(v[0], v[1])?,
                        OpKind::Sub => g.sub(v[0], v[1])?,
                        _ => g.mul(v[0], v[1])?,
                    };
                    project(g, y, seed)
                })?
            }
            OpKind::AddBias => check_graph(&[normal(&[2, 3, 4], r), normal(&[4], r)], step, |g, v| {
                let y = g.add_bias(v[0], v[1])?;
                project(g, y, seed)
            })?,
            OpKind::Scale => check_graph(&[normal(&[3, 4], r)], step, |g, v| {
                let y = g.scale(v[0], -1.7);
                project(g, y, seed)
            })?,
            OpKind::Relu => check_graph(&[off_kink(&[5, 5], r)], step, |g, v| {
                let y = g.relu(v[0]);
                project(g, y, seed)
            })?,
            OpKind::Concat => {
                let mut e = check_graph(&[normal(&[2, 3], r), normal(&[4, 3], r)], step, |g, v| {
                    let y = g.concat(&[v[0], v[1]], 0)?;
                    project(g, y, seed)
                })?;
                e.extend(check_graph(&[normal(&[2, 3, 2], r), normal(&[2, 3, 1], r)], step, |g, v| {
                    let y = g.concat(&[v[0], v[1], v[0]], 2)?;
                    project(g, y, seed)
                })?);
                e
            }
            OpKind::Reshape => check_graph(&[normal(&[3, 4], r)], step, |g, v| {
                let y = g.reshape(v[0], &[2, 2, 3])?;
                project(g, y, seed)
            })?,
            OpKind::Transpose => check_graph(&[normal(&[2, 3, 4], r)], step, |g, v| {
                let y = g.transpose(v[0])?;
                project(g, y, seed)
            })?,
            OpKind::Sum => check_graph(&[normal(&[3, 4], r)], step, |g, v| {
                let y = g.sum(v[0]);
                project(g, y, seed)
            })?,
            OpKind::SoftmaxCols => check_graph(&[normal(&[2, 4, 5], r)], step, |g, v| {
                let y = g.softmax_cols(v[0])?;
                project(g, y, seed)
            })?,
            OpKind::L1NormalizeRows => {
                let x = Tensor::from_fn(&[4, 5], |_| r.gen_range(0.1..1.0));
                check_graph(&[x], step, |g, v| {
                    let y = g.l1_normalize_rows(v[0], 1e-12);
                    project(g, y, seed)
                })?
            }
            OpKind::MaxPool => {
                let mut e = check_graph(&[separated(&[3, 4, 6], r)], step, |g, v| {
                    let y = g.max_pool_axis(v[0], 1)?;
                    project(g, y, seed)
                })?;
                e.extend(check_graph(&[separated(&[5, 3], r)], step, |g, v| {
                    let y = g.max_pool_axis(v[0], 0)?;
                    project(g, y, seed)
                })?);
                e
            }
            OpKind::BatchNorm => {
                let inputs = [normal(&[8, 4], r), normal(&[4], r), normal(&[4], r)];
                let mut e = Vec::new();
                for mode in [Mode::Train, Mode::Eval] {
                    let mut stats = RunningStats::new(4);
                    stats.var.iter_mut().for_each(|v| *v = 0.5 + r.gen_range(0.0..1.0));
                    e.extend(check_graph(&inputs, step, |g, v| {
                        let y = g.batchnorm(v[0], v[1], v[2], &mut stats.clone(), mode)?;
                        project(g, y, seed)
                    })?);
                }
                e
            }
            OpKind::CrossEntropy => {
                let labels: Vec<usize> = (0..4).map(|_| r.gen_range(0..3)).collect();
                check_graph(&[normal(&[4, 3], r)], step, |g, v| g.cross_entropy(v[0], &labels))?
            }
            OpKind::GatherRows => {
                let idx: Vec<usize> = (0..7).map(|_| r.gen_range(0..4)).collect();
                check_graph(&[normal(&[4, 3], r)], step, |g, v| {
                    let y = g.gather_rows(v[0], &idx)?;
                    project(g, y, seed)
                })?
            }
            OpKind::WeightedGather => {
                let k = 3;
                let idx: Vec<usize> = (0..6 * k).map(|_| r.gen_range(0..5)).collect();
                let w: Vec<f64> = (0..6 * k).map(|_| r.gen_range(0.0..1.0)).collect();
                check_graph(&[normal(&[5, 3], r)], step, |g, v| {
                    let y = g.weighted_gather(v[0], &idx, &w, k)?;
                    project(g, y, seed)
                })?
            }
        };
        worst = errs.into_iter().fold(worst, f64::max);
    }
    Ok(worst)
}

/// A cloud of `n` distinct random points.
pub fn random_cloud(n: usize, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(&[n, 3], |_| rng.gen_range(-1.0..1.0))
}

fn max_err(errs: &BTreeMap<String, f64>) -> f64 {
    errs.values().copied().fold(0.0, f64::max)
}

/// Offset-attention layer on `n` points of width `d_e`, one seed.
pub fn check_offset_attention(seed: u64, n: usize, d_e: usize, step: f64) -> Result<f64> {
    let mut store = ParamStore::new();
    let oa = OffsetAttention::new(&mut Init::new(&mut store, seed), "oa", OaConfig::new(d_e))?;
    let mut rng = ChaCha8Rng::seed_from_u64(mix(seed, 1));
    let x = normal(&[n, d_e], &mut rng);
    let errs = check_with_params(&store, &[x], step, |fw, v| {
        let y = oa.forward(fw, v[0])?;
        project(&mut fw.g, y, seed)
    })?;
    Ok(max_err(&errs))
}

/// One full CT-block on a cloud of `n` points with `s` neighbors.
pub fn check_ct_block(seed: u64, n: usize, s: usize, step: f64) -> Result<f64> {
    let cfg = CtBlockConfig::new(n, 3, 4, 4, s, 4);
    let mut store = ParamStore::new();
    let block = CtBlock::new(&mut Init::new(&mut store, seed), "block", cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(mix(seed, 2));
    let coords = random_cloud(n, &mut rng);
    let local = normal(&[n, 3], &mut rng);
    let global = normal(&[n, 4], &mut rng);
    let errs = check_with_params(&store, &[local, global], step, |fw, v| {
        let state = BranchState {
            local: Some(v[0]),
            local_coords: vec![coords.clone()],
            local_global_idx: vec![(0..n).collect()],
            global: Some(v[1]),
            global_coords: vec![coords.clone()],
        };
        let out = block.forward(fw, &state)?;
        let a = project(&mut fw.g, out.local.expect("full block"), seed)?;
        let b = project(&mut fw.g, out.global.expect("full block"), seed + 1)?;
        fw.g.add(a, b)
    })?;
    Ok(max_err(&errs))
}

fn micro_clouds(n: usize, batch: usize, rng: &mut ChaCha8Rng) -> Result<Vec<PointCloud>> {
    (0..batch).map(|_| PointCloud::new(random_cloud(n, rng))).collect()
}

/// Whole two-class classification network (both heads, summed losses) on
/// a batch of two `n`-point clouds.
pub fn check_classification_model(seed: u64, n: usize, step: f64) -> Result<f64> {
    let model = ClassificationModel::new(&ModelConfig::micro(), n, 2, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(mix(seed, 3));
    let clouds: Vec<PointCloud> =
        micro_clouds(n, 2, &mut rng)?.into_iter().enumerate().map(|(i, c)| c.with_category(i % 2)).collect();
    let refs: Vec<&PointCloud> = clouds.iter().collect();
    let errs = check_with_params(model.store(), &[], step, |fw, _| {
        let (out, labels) = model.forward_batch(fw, &refs)?;
        out.loss(fw, &labels)
    })?;
    Ok(max_err(&errs))
}

/// Whole segmentation network on two `n`-point clouds, one per category.
pub fn check_segmentation_model(seed: u64, n: usize, step: f64) -> Result<f64> {
    let layout = PartLayout { parts_per_category: vec![2, 2] };
    let model = SegmentationModel::new(&ModelConfig::micro(), n, layout, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(mix(seed, 4));
    let mut clouds = Vec::new();
    for (cat, c) in micro_clouds(n, 2, &mut rng)?.into_iter().enumerate() {
        let labels = (0..n).map(|_| 2 * cat + rng.gen_range(0..2)).collect();
        clouds.push(c.with_labels(labels)?.with_category(cat));
    }
    let refs: Vec<&PointCloud> = clouds.iter().collect();
    let errs = check_with_params(model.store(), &[], step, |fw, _| {
        let (out, labels) = model.forward_batch(fw, &refs)?;
        out.loss(fw, &labels)
    })?;
    Ok(max_err(&errs))
}

/// One line of the report.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub composite: bool,
    pub seeds: usize,
    pub max_rel_err: f64,
    pub tol: f64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tol
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct Report {
    pub results: Vec<CheckResult>,
}

impl Report {
    pub fn passed(&self) -> bool {
        !self.results.is_empty() && self.results.iter().all(CheckResult::passed)
    }

    pub fn get(&self, name: &str) -> Option<&CheckResult> {
        self.results.iter().find(|r| r.name == name)
    }

    pub fn to_table(&self) -> String {
        let mut s = format!("{:<24} {:>6} {:>12} {:>10}  status\n", "check", "seeds", "max_rel_err", "tol");
        for r in &self.results {
            let _ = writeln!(
                s,
                "{:<24} {:>6} {:>12.3e} {:>10.0e}  {}",
                r.name,
                r.seeds,
                r.max_rel_err,
                r.tol,
                if r.passed() { "ok" } else { "FAIL" }
            );
        }
        s
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("check,composite,seeds,max_rel_err,tol,passed\n");
        for r in &self.results {
            let _ = writeln!(s, "{},{},{},{:?},{:?},{}", r.name, r.composite, r.seeds, r.max_rel_err, r.tol, r.passed());
        }
        s
    }
}

/// Every registered op, offset attention (`N = 8, d_e = 16`), one CT-block
/// (`N = 16, S = 4`) and the micro networks (`N = 32`).
pub fn run_suite(cfg: &GradcheckConfig) -> Result<Report> {
    if cfg.seeds == 0 || !(cfg.op_step > 0.0 && cfg.composite_step > 0.0) {
        return Err(Error::Config("gradcheck needs seeds >= 1 and positive steps".into()));
    }
    let mut report = Report::default();
    for kind in OpKind::ALL {
        report.results.push(CheckResult {
            name: kind.name().to_string(),
            composite: false,
            seeds: cfg.seeds,
            max_rel_err: check_op(kind, cfg.seeds, cfg.op_step)?,
            tol: cfg.op_tol,
        });
    }
    let composite = |name: &str, f: &dyn Fn(u64) -> Result<f64>| -> Result<CheckResult> {
        let mut worst: f64 = 0.0;
        for seed in 0..cfg.seeds as u64 {
            worst = worst.max(f(seed)?);
        }
        Ok(CheckResult { name: name.into(), composite: true, seeds: cfg.seeds, max_rel_err: worst, tol: cfg.composite_tol })
    };
    let h = cfg.composite_step;
    report.results.push(composite("offset_attention", &|s| check_offset_attention(s, 8, 16, h))?);
    report.results.push(composite("ct_block", &|s| check_ct_block(s, 16, 4, h))?);
    report.results.push(composite("classification_model", &|s| check_classification_model(s, 32, h))?);
    if cfg.segmentation {
        report.results.push(composite("segmentation_model", &|s| check_segmentation_model(s, 32, h))?);
    }
    Ok(report)
}
