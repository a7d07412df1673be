//! Classification and part-segmentation networks.
//!
//! Both share one encoder: a local embedding (shared MLP, then FPS to half
//! the points) and a global embedding (shared MLP on every point) feed a
//! stack of CT-blocks. Classification max-pools the last local feature and
//! the channel-concatenated global features into two heads. Segmentation
//! adds a transition-up decoder on the local branch and classifies every
//! point with both heads. Head logits are fused by summation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::OaConfig;
use crate::autodiff::{Mode, Var};
use crate::ct_block::{BranchState, CtBlockConfig, CtStack, Variant};
use crate::error::{dim_err, Error, Result};
use crate::geometry::{self, InterpSpec, PointCloud};
use crate::nn::{Classifier, Forward, Init, Linear, MlpBlock};
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// How the two heads' outputs become one prediction.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fusion {
    /// Sum raw logits.
    #[default]
    LogitSum,
    /// Average the heads' softmax probabilities.
    ProbabilitySum,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Points per cloud; `None` takes the dataset's count.
    pub num_points: Option<usize>,
    /// 3 for xyz only, more when clouds carry extra channels.
    pub in_channels: usize,
    pub local_embed: Vec<usize>,
    /// Must end at `d_e`.
    pub global_embed: Vec<usize>,
    pub d_e: usize,
    /// Defaults to `d_e / 4`.
    pub d_a: Option<usize>,
    /// Neighbors per center; clamped to each block's input point count.
    pub neighbors: usize,
    /// Output width of each CT-block (both MLP blocks use it).
    pub block_channels: Vec<usize>,
    pub variant: Variant,
    pub head_hidden: usize,
    pub dropout: f64,
    pub fusion: Fusion,
    /// Transition-up widths, coarsest first; one more than the block count.
    pub decoder_channels: Vec<usize>,
    /// Width of the learned category embedding fed to the segmentation
    /// global head.
    pub category_dim: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            num_points: None,
            in_channels: 3,
            local_embed: vec![64],
            global_embed: vec![128, 256],
            d_e: 256,
            d_a: None,
            neighbors: 32,
            block_channels: vec![128, 256, 512],
            variant: Variant::Full,
            head_hidden: 256,
            dropout: 0.5,
            fusion: Fusion::LogitSum,
            decoder_channels: vec![256, 128, 128, 128],
            category_dim: 16,
        }
    }
}

impl ModelConfig {
    /// Desk-scale widths for the synthetic tasks.
    pub fn toy() -> Self {
        Self {
            local_embed: vec![16],
            global_embed: vec![16],
            d_e: 16,
            neighbors: 8,
            block_channels: vec![24, 32, 48],
            head_hidden: 32,
            decoder_channels: vec![32, 24, 24, 24],
            category_dim: 4,
            ..Self::default()
        }
    }

    /// Tiny network for finite-difference checks.
    pub fn micro() -> Self {
        Self {
            local_embed: vec![4],
            global_embed: vec![4],
            d_e: 4,
            neighbors: 4,
            block_channels: vec![4, 6, 8],
            head_hidden: 6,
            dropout: 0.0,
            decoder_channels: vec![6, 4, 4, 4],
            category_dim: 2,
            ..Self::default()
        }
    }

    pub fn attention(&self) -> OaConfig {
        OaConfig { d_e: self.d_e, d_a: self.d_a.unwrap_or((self.d_e / 4).max(1)) }
    }

    /// CT-block configs for clouds of `n` points.
    pub fn block_configs(&self, n: usize) -> Result<Vec<CtBlockConfig>> {
        let mut n_in = n / 2;
        let mut c_in = *self.local_embed.last().ok_or_else(|| Error::Config("local_embed is empty".into()))?;
        let mut out = Vec::new();
        for &w in &self.block_channels {
            let mut c = CtBlockConfig::new(n_in, c_in, w, w, self.neighbors.min(n_in), self.d_e);
            c.attention = self.attention();
            c.variant = self.variant;
            c.validate()?;
            out.push(c);
            n_in /= 2;
            c_in = w;
        }
        Ok(out)
    }

    pub fn validate(&self, n: usize) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.in_channels < 3 {
            return bad(format!("in_channels {} < 3", self.in_channels));
        }
        if self.global_embed.last() != Some(&self.d_e) {
            return bad(format!("global_embed must end at d_e = {}", self.d_e));
        }
        if self.block_channels.is_empty() {
            return bad("need at least one CT-block".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        let min_n = 2usize << self.block_channels.len();
        if n < min_n || n % min_n != 0 {
            return bad(format!("{} points cannot be halved {} times", n, self.block_channels.len() + 1));
        }
        self.block_configs(n).map(|_| ())
    }
}

/// Embeddings plus CT-block stack.
#[derive(Clone, Debug)]
pub struct Encoder {
    pub num_points: usize,
    pub in_channels: usize,
    pub variant: Variant,
    pub local_embed: Option<MlpBlock>,
    pub global_embed: Option<MlpBlock>,
    pub stack: CtStack,
}

/// Encoder activations for one batch.
#[derive(Clone, Debug)]
pub struct Encoded {
    /// Stacked input features `[B·N × C]`.
    pub input: Var,
    /// State after the embeddings.
    pub initial: BranchState,
    /// State after each CT-block.
    pub states: Vec<BranchState>,
}

impl Encoded {
    /// Channel-concatenated global features of every block, `[B·N × K·d_e]`.
    pub fn global_concat(&self, fw: &mut Forward) -> Result<Option<Var>> {
        let gs: Vec<Var> = self.states.iter().filter_map(|s| s.global).collect();
        if gs.is_empty() {
            return Ok(None);
        }
        Ok(Some(fw.g.concat(&gs, 1)?))
    }
}

impl Encoder {
    pub fn new(init: &mut Init, cfg: &ModelConfig, num_points: usize) -> Result<Self> {
        cfg.validate(num_points)?;
        let v = cfg.variant;
        let local_embed = if v.has_local() {
            Some(MlpBlock::new(init, "embed.local", cfg.in_channels, &cfg.local_embed)?)
        } else {
            None
        };
        let global_embed = if v.has_global() {
            Some(MlpBlock::new(init, "embed.global", cfg.in_channels, &cfg.global_embed)?)
        } else {
            None
        };
        let stack = CtStack::new(init, "block", &cfg.block_configs(num_points)?)?;
        Ok(Self { num_points, in_channels: cfg.in_channels, variant: v, local_embed, global_embed, stack })
    }

    pub fn input_features(&self, cloud: &PointCloud) -> Result<Tensor> {
        if cloud.len() != self.num_points {
            return Err(Error::Config(format!("model expects {} points, cloud has {}", self.num_points, cloud.len())));
        }
        let extra = cloud.features.as_ref().map_or(0, Tensor::cols);
        if 3 + extra != self.in_channels {
            return Err(Error::Config(format!("model expects {} channels, cloud has {}", self.in_channels, 3 + extra)));
        }
        match &cloud.features {
            None => Ok(cloud.coords.clone()),
            Some(f) => {
                let n = cloud.len();
                let mut data = Vec::with_capacity(n * self.in_channels);
                for i in 0..n {
                    data.extend_from_slice(cloud.coords.row(i));
                    data.extend_from_slice(f.row(i));
                }
                Tensor::new(vec![n, self.in_channels], data)
            }
        }
    }

    pub fn forward(&self, fw: &mut Forward, clouds: &[&PointCloud]) -> Result<Encoded> {
        if clouds.is_empty() {
            return Err(Error::Data("empty batch".into()));
        }
        let feats = clouds.iter().map(|c| self.input_features(c)).collect::<Result<Vec<_>>>()?;
        let input = fw.g.constant(Tensor::vstack(&feats.iter().collect::<Vec<_>>())?);
        let coords: Vec<Tensor> = clouds.iter().map(|c| c.coords.clone()).collect();
        let n = self.num_points;

        let (local, local_coords, local_global_idx) = match &self.local_embed {
            Some(mlp) => {
                let e = mlp.forward(fw, input)?;
                let mut rows = Vec::with_capacity(clouds.len() * n / 2);
                let mut lc = Vec::new();
                let mut li = Vec::new();
                for (b, c) in coords.iter().enumerate() {
                    let fps = geometry::farthest_point_sample(c, n / 2)?;
                    rows.extend(fps.iter().map(|&i| b * n + i));
                    lc.push(c.select_rows(&fps)?);
                    li.push(fps);
                }
                (Some(fw.g.gather_rows(e, &rows)?), lc, li)
            }
            None => (None, coords.clone(), vec![(0..n).collect(); clouds.len()]),
        };
        let global = match &self.global_embed {
            Some(mlp) => Some(mlp.forward(fw, input)?),
            None => None,
        };
        let initial = BranchState { local, local_coords, local_global_idx, global, global_coords: coords };
        let states = self.stack.forward(fw, &initial)?;
        Ok(Encoded { input, initial, states })
    }
}

/// Raw head outputs of one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct HeadOutputs {
    pub local: Option<Var>,
    pub global: Option<Var>,
    /// Sum of the available head logits.
    pub fused: Var,
}

impl HeadOutputs {
    fn new(fw: &mut Forward, local: Option<Var>, global: Option<Var>) -> Result<Self> {
        let fused = match (local, global) {
            (Some(l), Some(g)) => fw.g.add(l, g)?,
            (Some(x), None) | (None, Some(x)) => x,
            (None, None) => return Err(Error::Config("model has no heads".into())),
        };
        Ok(Self { local, global, fused })
    }

    /// Sum of cross-entropies of every head against `labels`.
    pub fn loss(&self, fw: &mut Forward, labels: &[usize]) -> Result<Var> {
        match (self.local, self.global) {
            (Some(l), Some(g)) => two_head_loss(fw, l, g, labels),
            (Some(x), None) | (None, Some(x)) => fw.g.cross_entropy(x, labels),
            (None, None) => unreachable!("constructed with at least one head"),
        }
    }

    /// Row-wise fused probabilities.
    pub fn probabilities(&self, fw: &Forward, fusion: Fusion) -> Tensor {
        match (fusion, self.local, self.global) {
            (Fusion::ProbabilitySum, Some(l), Some(g)) => {
                let mut p = softmax_rows(fw.g.value(l));
                let q = softmax_rows(fw.g.value(g));
                for (a, b) in p.data_mut().iter_mut().zip(q.data()) {
                    *a = 0.5 * (*a + b);
                }
                p
            }
            _ => softmax_rows(fw.g.value(self.fused)),
        }
    }
}

/// `CE(local) + CE(global)` with unit weights.
pub fn two_head_loss(fw: &mut Forward, local: Var, global: Var, labels: &[usize]) -> Result<Var> {
    let a = fw.g.cross_entropy(local, labels)?;
    let b = fw.g.cross_entropy(global, labels)?;
    fw.g.add(a, b)
}

/// Numerically stable softmax of every row.
pub fn softmax_rows(x: &Tensor) -> Tensor {
    let mut out = x.clone();
    let c = out.cols();
    for row in out.data_mut().chunks_mut(c) {
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for v in row.iter_mut() {
            *v = (*v - mx).exp();
            s += *v;
        }
        row.iter_mut().for_each(|v| *v /= s);
    }
    out
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Anything that can be trained and evaluated on point clouds.
pub trait PointModel {
    fn store(&self) -> &ParamStore;
    fn store_mut(&mut self) -> &mut ParamStore;
    fn fusion(&self) -> Fusion;

    /// Forward pass over a batch; returns head outputs and the target label
    /// of every output row.
    fn forward_batch(&self, fw: &mut Forward, clouds: &[&PointCloud]) -> Result<(HeadOutputs, Vec<usize>)>;

    /// Fused probabilities for one cloud: one row for classification, one
    /// row per point for segmentation.
    fn predict_proba(&self, cloud: &PointCloud) -> Result<Tensor> {
        let mut fw = Forward::new(self.store(), Mode::Eval);
        let out = self.forward_heads(&mut fw, &[cloud])?;
        Ok(out.probabilities(&fw, self.fusion()))
    }

    /// Like [`PointModel::forward_batch`] without needing labels.
    fn forward_heads(&self, fw: &mut Forward, clouds: &[&PointCloud]) -> Result<HeadOutputs>;
}

/// Fraction of rows whose fused argmax equals the label.
pub fn count_correct(fw: &Forward, out: &HeadOutputs, labels: &[usize]) -> usize {
    let v = fw.g.value(out.fused);
    (0..v.rows()).filter(|&i| argmax(v.row(i)) == labels[i]).count()
}

#[derive(Clone, Debug)]
pub struct ClassificationModel {
    pub cfg: ModelConfig,
    pub num_classes: usize,
    pub store: ParamStore,
    pub encoder: Encoder,
    pub local_head: Option<Classifier>,
    pub global_head: Option<Classifier>,
}

/// Logits of one cloud.
#[derive(Clone, Debug, PartialEq)]
pub struct Classification {
    pub local: Option<Tensor>,
    pub global: Option<Tensor>,
    pub fused: Tensor,
}

impl ClassificationModel {
    pub fn new(cfg: &ModelConfig, num_points: usize, num_classes: usize, seed: u64) -> Result<Self> {
        if num_classes == 0 {
            return Err(Error::Config("num_classes must be >= 1".into()));
        }
        let mut store = ParamStore::new();
        let mut init = Init::new(&mut store, seed);
        let encoder = Encoder::new(&mut init, cfg, num_points)?;
        let local_head = match (cfg.variant.has_local(), cfg.block_channels.last()) {
            (true, Some(&c)) => Some(Classifier::new(&mut init, "head.local", c, cfg.head_hidden, num_classes, cfg.dropout)?),
            _ => None,
        };
        let global_head = if cfg.variant.has_global() {
            let w = cfg.d_e * cfg.block_channels.len();
            Some(Classifier::new(&mut init, "head.global", w, cfg.head_hidden, num_classes, cfg.dropout)?)
        } else {
            None
        };
        Ok(Self { cfg: cfg.clone(), num_classes, store, encoder, local_head, global_head })
    }

    /// Per-cloud max pool of a stacked `[B·N × C]` feature.
    fn pool(fw: &mut Forward, x: Var, batch: usize) -> Result<Var> {
        let (rows, c) = (fw.g.shape(x)[0], fw.g.shape(x)[1]);
        let x3 = fw.g.reshape(x, &[batch, rows / batch, c])?;
        fw.g.max_pool_axis(x3, 1)
    }

    /// Logits of both heads and their sum for a single cloud.
    pub fn classify(&self, cloud: &PointCloud, mode: Mode) -> Result<Classification> {
        let mut fw = Forward::new(&self.store, mode);
        let out = self.forward_heads(&mut fw, &[cloud])?;
        let flat = |v: Var| fw.g.value(v).clone().reshape(&[self.num_classes]);
        Ok(Classification {
            local: out.local.map(flat).transpose()?,
            global: out.global.map(flat).transpose()?,
            fused: flat(out.fused)?,
        })
    }
}

impl PointModel for ClassificationModel {
    fn store(&self) -> &ParamStore {
        &self.store
    }

    fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    fn fusion(&self) -> Fusion {
        self.cfg.fusion
    }

    fn forward_heads(&self, fw: &mut Forward, clouds: &[&PointCloud]) -> Result<HeadOutputs> {
        let b = clouds.len();
        let enc = self.encoder.forward(fw, clouds)?;
        let last = enc.states.last().expect("at least one block");
        let local = match (&self.local_head, last.local) {
            (Some(h), Some(f)) => {
                let p = Self::pool(fw, f, b)?;
                Some(h.forward(fw, p)?)
            }
            _ => None,
        };
        let global = match (&self.global_head, enc.global_concat(fw)?) {
            (Some(h), Some(cat)) => {
                let p = Self::pool(fw, cat, b)?;
                Some(h.forward(fw, p)?)
            }
            _ => None,
        };
        HeadOutputs::new(fw, local, global)
    }

    fn forward_batch(&self, fw: &mut Forward, clouds: &[&PointCloud]) -> Result<(HeadOutputs, Vec<usize>)> {
        let labels = clouds
            .iter()
            .map(|c| match c.category {
                Some(l) if l < self.num_classes => Ok(l),
                Some(l) => Err(Error::Data(format!("class label {} outside [0, {})", l, self.num_classes))),
                None => Err(Error::Data("cloud has no class label".into())),
            })
            .collect::<Result<Vec<_>>>()?;
        Ok((self.forward_heads(fw, clouds)?, labels))
    }
}

/// Part labels are numbered globally; category `c` owns the contiguous
/// range starting after all parts of earlier categories.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PartLayout {
    pub parts_per_category: Vec<usize>,
}

impl PartLayout {
    pub fn num_parts(&self) -> usize {
        self.parts_per_category.iter().sum()
    }

    pub fn num_categories(&self) -> usize {
        self.parts_per_category.len()
    }

    pub fn parts_of(&self, category: usize) -> std::ops::Range<usize> {
        let start: usize = self.parts_per_category[..category].iter().sum();
        start..start + self.parts_per_category[category]
    }
}

#[derive(Clone, Debug)]
pub struct SegmentationModel {
    pub cfg: ModelConfig,
    pub layout: PartLayout,
    pub store: ParamStore,
    pub encoder: Encoder,
    pub decoder: Vec<MlpBlock>,
    pub category_embed: Option<Linear>,
    pub local_head: Option<Classifier>,
    pub global_head: Option<Classifier>,
}

impl SegmentationModel {
    pub fn new(cfg: &ModelConfig, num_points: usize, layout: PartLayout, seed: u64) -> Result<Self> {
        if layout.num_parts() == 0 || layout.parts_per_category.contains(&0) {
            return Err(Error::Config("every category needs at least one part".into()));
        }
        let blocks = cfg.block_channels.len();
        if cfg.variant.has_local() && cfg.decoder_channels.len() != blocks + 1 {
            return Err(Error::Config(format!(
                "decoder needs {} stages for {} blocks, got {}",
                blocks + 1,
                blocks,
                cfg.decoder_channels.len()
            )));
        }
        let mut store = ParamStore::new();
        let mut init = Init::new(&mut store, seed);
        let encoder = Encoder::new(&mut init, cfg, num_points)?;
        let n_s = layout.num_parts();

        let mut decoder = Vec::new();
        let mut local_head = None;
        if cfg.variant.has_local() {
            // Skip widths, coarsest first: block outputs below the last, the
            // local embedding, then the raw input.
            let mut skips: Vec<usize> = cfg.block_channels[..blocks - 1].iter().rev().copied().collect();
            skips.push(*cfg.local_embed.last().expect("validated"));
            skips.push(cfg.in_channels);
            let mut c = *cfg.block_channels.last().expect("validated");
            for (i, (&w, &skip)) in cfg.decoder_channels.iter().zip(&skips).enumerate() {
                decoder.push(MlpBlock::new(&mut init, &format!("decoder.{}", i), c + skip, &[w])?);
                c = w;
            }
            local_head = Some(Classifier::new(&mut init, "head.local", c, cfg.head_hidden, n_s, cfg.dropout)?);
        }
        let (category_embed, global_head) = if cfg.variant.has_global() {
            let emb = Linear::new(&mut init, "head.category", layout.num_categories(), cfg.category_dim, true)?;
            let w = cfg.d_e * blocks + cfg.category_dim;
            (Some(emb), Some(Classifier::new(&mut init, "head.global", w, cfg.head_hidden, n_s, cfg.dropout)?))
        } else {
            (None, None)
        };
        Ok(Self { cfg: cfg.clone(), layout, store, encoder, decoder, category_embed, local_head, global_head })
    }

    /// Fused per-point logits `[N×N_s]` for one cloud of a known category.
    pub fn segment(&self, cloud: &PointCloud, category: usize, mode: Mode) -> Result<Tensor> {
        let mut c = cloud.clone();
        c.category = Some(category);
        let mut fw = Forward::new(&self.store, mode);
        let out = self.forward_heads(&mut fw, &[&c])?;
        Ok(fw.g.value(out.fused).clone())
    }

    fn decode(&self, fw: &mut Forward, enc: &Encoded) -> Result<Option<Var>> {
        let Some(last) = enc.states.last() else { return Ok(None) };
        let Some(mut x) = last.local else { return Ok(None) };
        // (features, coords) per level, finest last.
        let mut levels: Vec<(Var, Vec<Tensor>)> = Vec::new();
        levels.push((enc.input, enc.initial.global_coords.clone()));
        levels.push((enc.initial.local.expect("local branch"), enc.initial.local_coords.clone()));
        for s in &enc.states[..enc.states.len() - 1] {
            levels.push((s.local.expect("local branch"), s.local_coords.clone()));
        }
        let mut coords = last.local_coords.clone();
        for (stage, (skip, skip_coords)) in self.decoder.iter().zip(levels.into_iter().rev()) {
            let src: Vec<&Tensor> = coords.iter().collect();
            let dst: Vec<&Tensor> = skip_coords.iter().collect();
            let up = geometry::interpolate_up_batched(&mut fw.g, x, &src, &dst, InterpSpec::default())?;
            let cat = fw.g.concat(&[up, skip], 1)?;
            x = stage.forward(fw, cat)?;
            coords = skip_coords;
        }
        Ok(Some(x))
    }
}

impl PointModel for SegmentationModel {
    fn store(&self) -> &ParamStore {
        &self.store
    }

    fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    fn fusion(&self) -> Fusion {
        self.cfg.fusion
    }

    fn forward_heads(&self, fw: &mut Forward, clouds: &[&PointCloud]) -> Result<HeadOutputs> {
        let b = clouds.len();
        let n = self.encoder.num_points;
        let n_cat = self.layout.num_categories();
        let mut onehot = Tensor::zeros(&[b, n_cat]);
        for (i, c) in clouds.iter().enumerate() {
            match c.category {
                Some(k) if k < n_cat => onehot.data_mut()[i * n_cat + k] = 1.0,
                Some(k) => return Err(Error::Data(format!("category {} outside [0, {})", k, n_cat))),
                None => return Err(Error::Data("segmentation needs a known category".into())),
            }
        }
        let enc = self.encoder.forward(fw, clouds)?;
        let local = match (&self.local_head, self.decode(fw, &enc)?) {
            (Some(h), Some(x)) => Some(h.forward(fw, x)?),
            _ => None,
        };
        let global = match (&self.global_head, &self.category_embed, enc.global_concat(fw)?) {
            (Some(h), Some(emb), Some(cat)) => {
                let oh = fw.g.constant(onehot);
                let e = emb.forward(fw, oh)?;
                let rows: Vec<usize> = (0..b).flat_map(|i| std::iter::repeat(i).take(n)).collect();
                let e = fw.g.gather_rows(e, &rows)?;
                let x = fw.g.concat(&[cat, e], 1)?;
                Some(h.forward(fw, x)?)
            }
            _ => None,
        };
        HeadOutputs::new(fw, local, global)
    }

    fn forward_batch(&self, fw: &mut Forward, clouds: &[&PointCloud]) -> Result<(HeadOutputs, Vec<usize>)> {
        let n_s = self.layout.num_parts();
        let mut labels = Vec::with_capacity(clouds.len() * self.encoder.num_points);
        for c in clouds {
            let l = c.point_labels.as_ref().ok_or_else(|| Error::Data("cloud has no point labels".into()))?;
            if let Some(&bad) = l.iter().find(|&&p| p >= n_s) {
                return Err(Error::Data(format!("part label {} outside [0, {})", bad, n_s)));
            }
            labels.extend_from_slice(l);
        }
        Ok((self.forward_heads(fw, clouds)?, labels))
    }
}

/// How the test-time scale copies are produced.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScaleMode {
    /// One factor per pass applied to all three axes.
    Uniform,
    /// Independent per-axis factors drawn from `[min, max]` of the scale
    /// list, one draw per pass.
    Anisotropic { seed: u64 },
}

/// `0.8, 0.9, …, 1.2`: every step of 0.1 inside `[0.8, 1.25]`.
pub fn default_scales() -> Vec<f64> {
    (8..13).map(|i| i as f64 / 10.0).collect()
}

/// Averages fused probabilities over scaled copies of `cloud`.
pub fn multi_scale_predict<M: PointModel + ?Sized>(
    model: &M,
    cloud: &PointCloud,
    scales: &[f64],
    mode: ScaleMode,
) -> Result<Tensor> {
    if scales.is_empty() {
        return Err(dim_err!("multi_scale_predict needs at least one scale"));
    }
    let (lo, hi) = scales.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &s| (a.min(s), b.max(s)));
    let mut rng = match mode {
        ScaleMode::Anisotropic { seed } => Some(ChaCha8Rng::seed_from_u64(seed)),
        ScaleMode::Uniform => None,
    };
    let mut acc: Option<Tensor> = None;
    for &s in scales {
        let factors = match rng.as_mut() {
            Some(r) if hi > lo => [r.gen_range(lo..=hi), r.gen_range(lo..=hi), r.gen_range(lo..=hi)],
            _ => [s; 3],
        };
        let p = model.predict_proba(&cloud.scaled(factors))?;
        match &mut acc {
            None => acc = Some(p),
            Some(a) => a.add_assign(&p),
        }
    }
    let k = scales.len() as f64;
    Ok(acc.expect("non-empty").map(|v| v / k))
}
