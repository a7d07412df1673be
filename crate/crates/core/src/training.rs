//! Optimizer, schedule, augmentation and the training loop.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::Mode;
use crate::error::{dim_err, Error, Result};
use crate::geometry::PointCloud;
use crate::networks::{count_correct, PointModel};
use crate::nn::{mix, Forward};
use crate::params::{Checkpoint, ParamStore, Parameter};
use crate::tensor::Tensor;

/// `v ← momentum·v + g; p ← p − lr·v` (heavy-ball, not Nesterov).
pub fn sgd_momentum_update(p: &mut [f64], g: &[f64], v: &mut [f64], lr: f64, momentum: f64) {
    assert!(p.len() == g.len() && g.len() == v.len(), "sgd_momentum_update: length mismatch");
    for ((p, g), v) in p.iter_mut().zip(g).zip(v.iter_mut()) {
        *v = momentum * *v + g;
        *p -= lr * *v;
    }
}

/// Momentum SGD over a whole [`ParamStore`].
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Sgd {
    pub momentum: f64,
    pub velocity: BTreeMap<String, Tensor>,
}

impl Sgd {
    pub fn new(momentum: f64) -> Self {
        Self { momentum, velocity: BTreeMap::new() }
    }

    pub fn step(&mut self, store: &mut ParamStore, lr: f64) -> Result<()> {
        for p in store.params_mut() {
            let v = self.velocity.entry(p.name.clone()).or_insert_with(|| Tensor::zeros(p.value.shape()));
            if v.shape() != p.value.shape() {
                return Err(dim_err!("velocity for {} has shape {:?}", p.name, v.shape()));
            }
            let Parameter { value, grad, .. } = p;
            sgd_momentum_update(value.data_mut(), grad.data(), v.data_mut(), lr, self.momentum);
        }
        Ok(())
    }
}

/// Cosine annealing from `lr0` to zero over `total_epochs`, updated per
/// epoch.
pub fn cosine_lr(epoch: usize, total_epochs: usize, lr0: f64) -> f64 {
    lr0 * (1.0 + (PI * epoch as f64 / total_epochs.max(1) as f64).cos()) / 2.0
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AugmentPreset {
    /// Classification preset for classification data, segmentation preset
    /// for part data.
    #[default]
    Auto,
    /// Random z-rotation plus clipped Gaussian jitter.
    Classification,
    /// Random anisotropic scaling only.
    Segmentation,
    None,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    pub preset: AugmentPreset,
    pub jitter_sigma: f64,
    pub jitter_clip: f64,
    pub aniso_scale_range: [f64; 2],
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self { preset: AugmentPreset::Auto, jitter_sigma: 0.02, jitter_clip: 0.05, aniso_scale_range: [0.8, 1.25] }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.aniso_scale_range[0] >= self.aniso_scale_range[1] || self.aniso_scale_range[0] <= 0.0 {
            return Err(Error::Config(format!("aniso_scale_range {:?} must satisfy 0 < low < high", self.aniso_scale_range)));
        }
        if self.jitter_sigma < 0.0 || self.jitter_clip < 0.0 {
            return Err(Error::Config("jitter parameters must be non-negative".into()));
        }
        Ok(())
    }
}

/// Rotates every point by `theta` about the z axis.
pub fn rotate_z(cloud: &PointCloud, theta: f64) -> PointCloud {
    let (s, c) = theta.sin_cos();
    let mut out = cloud.clone();
    for row in out.coords.data_mut().chunks_mut(3) {
        let (x, y) = (row[0], row[1]);
        row[0] = c * x - s * y;
        row[1] = s * x + c * y;
    }
    out
}

/// Adds `N(0, sigma²)` noise to every coordinate, clipped to `±clip`.
pub fn jitter(cloud: &PointCloud, sigma: f64, clip: f64, rng: &mut impl Rng) -> PointCloud {
    let mut out = cloud.clone();
    if sigma > 0.0 {
        let normal = Normal::new(0.0, sigma).expect("sigma > 0");
        for v in out.coords.data_mut() {
            *v += normal.sample(rng).clamp(-clip, clip);
        }
    }
    out
}

/// Applies a training-time augmentation. `preset` must already be
/// resolved (not `Auto`).
pub fn augment(cloud: &PointCloud, cfg: &AugmentConfig, preset: AugmentPreset, rng: &mut impl Rng) -> PointCloud {
    match preset {
        AugmentPreset::Classification => {
            let theta = rng.gen_range(0.0..2.0 * PI);
            let r = rotate_z(cloud, theta);
            jitter(&r, cfg.jitter_sigma, cfg.jitter_clip, rng)
        }
        AugmentPreset::Segmentation => {
            let [lo, hi] = cfg.aniso_scale_range;
            let s = [rng.gen_range(lo..hi), rng.gen_range(lo..hi), rng.gen_range(lo..hi)];
            cloud.scaled(s)
        }
        AugmentPreset::None | AugmentPreset::Auto => cloud.clone(),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr0: f64,
    pub momentum: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Evaluate on the test split every this many epochs (0 = never).
    pub eval_every: usize,
    pub augment: AugmentConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr0: 0.001,
            momentum: 0.9,
            epochs: 100,
            batch_size: 16,
            seed: 0,
            eval_every: 1,
            augment: AugmentConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr0 >= 0.0) {
            return Err(Error::Config(format!("lr0 {} must be >= 0", self.lr0)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum {} outside [0, 1)", self.momentum)));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be >= 1".into()));
        }
        self.augment.validate()
    }
}

/// One metrics row.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochMetrics {
    /// 1-based.
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub train_acc: f64,
    /// Test accuracy (classification) or pIoU (segmentation).
    pub eval: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct History {
    pub rows: Vec<EpochMetrics>,
}

impl History {
    pub const CSV_HEADER: &'static str = "epoch,lr,train_loss,train_acc,eval";

    pub fn to_csv(&self) -> String {
        let mut s = String::from(Self::CSV_HEADER);
        s.push('\n');
        for r in &self.rows {
            let eval = r.eval.map(|e| format!("{:?}", e)).unwrap_or_default();
            let _ = writeln!(s, "{},{:?},{:?},{:?},{}", r.epoch, r.lr, r.train_loss, r.train_acc, eval);
        }
        s
    }

    pub fn last(&self) -> Option<&EpochMetrics> {
        self.rows.last()
    }
}

/// Optimizer state plus the number of finished epochs.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub epochs_done: usize,
    pub sgd: Sgd,
}

impl TrainState {
    pub fn new(cfg: &TrainConfig) -> Self {
        Self { epochs_done: 0, sgd: Sgd::new(cfg.momentum) }
    }

    pub fn checkpoint(&self, store: &ParamStore) -> Checkpoint {
        let mut ck = Checkpoint::from_store(store);
        ck.velocity = self.sgd.velocity.clone();
        ck.meta.insert("epochs_done".into(), self.epochs_done as f64);
        ck
    }

    /// Restores model values and optimizer state from a checkpoint.
    pub fn resume(ck: &Checkpoint, store: &mut ParamStore, cfg: &TrainConfig) -> Result<Self> {
        ck.restore_into(store)?;
        let epochs_done = ck.meta.get("epochs_done").copied().unwrap_or(0.0) as usize;
        Ok(Self { epochs_done, sgd: Sgd { momentum: cfg.momentum, velocity: ck.velocity.clone() } })
    }
}

/// Seeded RNG for one `(epoch, slot)` pair; the stream is independent of
/// how many draws earlier batches made.
pub fn stream_rng(seed: u64, epoch: usize, slot: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix(mix(seed, epoch as u64), slot))
}

/// Trains until `cfg.epochs` epochs are done, starting after
/// `state.epochs_done`. `evaluate` produces the per-epoch eval metric.
/// `on_epoch` sees the model after each epoch (checkpointing hooks) and
/// returns whether to continue.
pub fn train<M, E, C>(
    model: &mut M,
    train_set: &[&PointCloud],
    cfg: &TrainConfig,
    preset: AugmentPreset,
    state: &mut TrainState,
    mut evaluate: E,
    mut on_epoch: C,
) -> Result<History>
where
    M: PointModel,
    E: FnMut(&M) -> Result<Option<f64>>,
    C: FnMut(&M, &TrainState, &EpochMetrics) -> Result<bool>,
{
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    let mut history = History::default();
    while state.epochs_done < cfg.epochs {
        let epoch = state.epochs_done;
        let lr = cosine_lr(epoch, cfg.epochs, cfg.lr0);
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        order.shuffle(&mut stream_rng(cfg.seed, epoch, u64::MAX));

        let (mut loss_sum, mut correct, mut rows) = (0.0, 0usize, 0usize);
        for (bi, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<PointCloud> = chunk
                .iter()
                .map(|&i| augment(train_set[i], &cfg.augment, preset, &mut stream_rng(cfg.seed, epoch, i as u64)))
                .collect();
            let refs: Vec<&PointCloud> = batch.iter().collect();
            let updates = {
                let mut fw = Forward::new(model.store(), Mode::Train)
                    .with_dropout_seed(mix(mix(cfg.seed, epoch as u64), bi as u64));
                let (out, labels) = model.forward_batch(&mut fw, &refs)?;
                let loss = out.loss(&mut fw, &labels)?;
                let lv = fw.g.value(loss).data()[0];
                if !lv.is_finite() {
                    return Err(Error::Numeric(format!("non-finite loss at epoch {} batch {}", epoch + 1, bi)));
                }
                loss_sum += lv * chunk.len() as f64;
                correct += count_correct(&fw, &out, &labels);
                rows += labels.len();
                fw.backward(loss)?;
                fw.into_updates()
            };
            let store = model.store_mut();
            store.zero_grad();
            updates.apply(store)?;
            state.sgd.step(store, lr)?;
        }
        state.epochs_done += 1;
        let eval = if cfg.eval_every > 0 && state.epochs_done % cfg.eval_every == 0 { evaluate(model)? } else { None };
        let row = EpochMetrics {
            epoch: state.epochs_done,
            lr,
            train_loss: loss_sum / train_set.len() as f64,
            train_acc: correct as f64 / rows as f64,
            eval,
        };
        let go_on = on_epoch(model, state, &row)?;
        history.rows.push(row);
        if !go_on {
            break;
        }
    }
    Ok(history)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sgd_without_momentum_is_vanilla() {
        let mut p = [1.0, -2.0];
        let mut v = [0.0, 0.0];
        sgd_momentum_update(&mut p, &[0.5, 1.0], &mut v, 0.1, 0.0);
        assert_eq!(p, [1.0 - 0.05, -2.0 - 0.1]);
    }

    #[test]
    fn sgd_two_steps_constant_gradient() {
        let (lr, mom, g) = (0.1, 0.9, 2.0);
        let mut p = [3.0];
        let mut v = [0.0];
        sgd_momentum_update(&mut p, &[g], &mut v, lr, mom);
        sgd_momentum_update(&mut p, &[g], &mut v, lr, mom);
        assert!((p[0] - (3.0 - lr * g * (2.0 + mom))).abs() < 1e-15);
    }

    #[test]
    fn sgd_zero_gradient_decays_velocity() {
        let mut p = [1.0];
        let mut v = [0.5];
        sgd_momentum_update(&mut p, &[0.0], &mut v, 0.0, 0.9);
        assert_eq!(p, [1.0]);
        assert_eq!(v, [0.45]);
    }

    #[test]
    fn cosine_schedule_points() {
        assert_eq!(cosine_lr(0, 10, 0.1), 0.1);
        assert!((cosine_lr(5, 10, 0.1) - 0.05).abs() < 1e-15);
        let lrs: Vec<f64> = (0..50).map(|e| cosine_lr(e, 50, 1e-3)).collect();
        assert!(lrs.windows(2).all(|w| w[1] <= w[0]));
        assert!(lrs.iter().all(|&l| (0.0..=1e-3).contains(&l)));
    }

    #[test]
    fn train_config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = TrainConfig { momentum: 1.0, ..Default::default() };
        assert!(bad.validate().is_err());
        let mut bad = TrainConfig::default();
        bad.augment.aniso_scale_range = [1.25, 0.8];
        assert!(bad.validate().is_err());
    }
}
