//! The two-branch block and its stacking.
//!
//! The local (convolution) branch halves the point count with
//! sample-and-group and runs two shared-MLP blocks over each neighborhood.
//! The global (transformer) branch runs offset-attention over every point
//! of the original cloud. Two transmission elements couple them:
//!
//! ```text
//! F_g' = trans( ft1( conv1(F_l) ) + F_g )
//! F_l' = conv2( conv1(F_l) + ft2(F_g') )
//! ```
//!
//! `ft1` interpolates the S-pooled first-MLP output up to the global points;
//! `ft2` picks the global rows at the local centers and broadcasts them over
//! the neighbor axis. Both end in Linear → BatchNorm to align widths.

use serde::{Deserialize, Serialize};

use crate::attention::{OaConfig, OffsetAttention};
use crate::autodiff::Var;
use crate::error::{dim_err, Error, Result};
use crate::geometry::{self, InterpSpec, NeighborIndex};
use crate::nn::{BatchNorm, Forward, Init, Linear, MlpBlock};
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// Which parts of the block are active. Everything except `Full` exists for
/// ablation runs.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    #[default]
    Full,
    NoTransmission,
    ConvOnly,
    TransformerOnly,
}

impl Variant {
    pub fn has_local(self) -> bool {
        self != Variant::TransformerOnly
    }

    pub fn has_global(self) -> bool {
        self != Variant::ConvOnly
    }

    pub fn has_transmission(self) -> bool {
        self == Variant::Full
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CtBlockConfig {
    pub n_in: usize,
    pub n_out: usize,
    pub c_in: usize,
    /// Width of the first MLP block's output (`C_2`).
    pub c_mid: usize,
    pub c_out: usize,
    /// Neighbors per center (`S`).
    pub neighbors: usize,
    pub attention: OaConfig,
    pub mlp1: Vec<usize>,
    pub mlp2: Vec<usize>,
    pub variant: Variant,
}

impl CtBlockConfig {
    /// Two-layer MLP blocks `[c_mid, c_mid]` and `[c_out, c_out]`, `d_a = d_e/4`.
    pub fn new(n_in: usize, c_in: usize, c_mid: usize, c_out: usize, neighbors: usize, d_e: usize) -> Self {
        Self {
            n_in,
            n_out: n_in / 2,
            c_in,
            c_mid,
            c_out,
            neighbors,
            attention: OaConfig::new(d_e),
            mlp1: vec![c_mid, c_mid],
            mlp2: vec![c_out, c_out],
            variant: Variant::Full,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.n_out == 0 || self.n_out != self.n_in / 2 {
            return bad(format!("block n_out {} must be n_in/2 with n_in {}", self.n_out, self.n_in));
        }
        if self.neighbors == 0 || self.neighbors > self.n_in {
            return bad(format!("neighbors {} must be in [1, n_in = {}]", self.neighbors, self.n_in));
        }
        if self.mlp1.last() != Some(&self.c_mid) || self.mlp2.last() != Some(&self.c_out) {
            return bad("mlp widths must end at c_mid / c_out".into());
        }
        if [self.c_in, self.c_mid, self.c_out, self.attention.d_e, self.attention.d_a]
            .iter()
            .chain(&self.mlp1)
            .chain(&self.mlp2)
            .any(|&w| w == 0)
        {
            return bad("layer widths must be >= 1".into());
        }
        Ok(())
    }
}

/// Features flowing between blocks, for a batch of clouds stacked
/// row-wise.
#[derive(Clone, Debug)]
pub struct BranchState {
    /// `[B·N_l × C_l]`, absent for transformer-only stacks.
    pub local: Option<Var>,
    pub local_coords: Vec<Tensor>,
    /// Per cloud, the index of each local point in the original cloud.
    pub local_global_idx: Vec<Vec<usize>>,
    /// `[B·N_g × d_e]`, absent for convolution-only stacks.
    pub global: Option<Var>,
    /// Per cloud original coordinates; never changes along a stack.
    pub global_coords: Vec<Tensor>,
}

impl BranchState {
    pub fn batch(&self) -> usize {
        self.global_coords.len()
    }

    pub fn n_local(&self) -> usize {
        self.local_coords.first().map_or(0, Tensor::rows)
    }

    pub fn n_global(&self) -> usize {
        self.global_coords.first().map_or(0, Tensor::rows)
    }
}

/// Linear → BatchNorm bridge between the branches.
#[derive(Clone, Debug)]
pub struct FeatureTransmission {
    pub linear: Linear,
    pub bn: BatchNorm,
}

impl FeatureTransmission {
    pub fn new(init: &mut Init, prefix: &str, from: usize, to: usize) -> Result<Self> {
        Ok(Self {
            linear: Linear::new(init, &format!("{}.linear", prefix), from, to, true)?,
            bn: BatchNorm::new(init, &format!("{}.bn", prefix), to)?,
        })
    }

    pub fn forward(&self, fw: &mut Forward, x: Var) -> Result<Var> {
        let y = self.linear.forward(fw, x)?;
        self.bn.forward(fw, y)
    }

    /// Sets weight, bias and BN shift to zero, so the element outputs zeros.
    pub fn zero(&self, store: &mut ParamStore) -> Result<()> {
        let mut names = vec![self.linear.weight.clone(), format!("{}.beta", self.bn.prefix)];
        names.extend(self.linear.bias.clone());
        for n in names {
            let shape = store.get(&n).map(|p| p.value.shape().to_vec()).ok_or_else(|| Error::Config(n.clone()))?;
            store.set(&n, Tensor::zeros(&shape))?;
        }
        Ok(())
    }
}

/// Shared MLP blocks of the local branch.
#[derive(Clone, Debug)]
pub struct ConvBranch {
    pub conv1: MlpBlock,
    pub conv2: MlpBlock,
}

/// Result of the sampling-and-grouping step for a batch.
#[derive(Clone, Debug)]
pub struct Grouping {
    pub index: Vec<NeighborIndex>,
    pub center_coords: Vec<Tensor>,
    pub global_idx: Vec<Vec<usize>>,
}

/// FPS to `n_out` centers plus `S`-NN grouping on every cloud, composing
/// the local→original index maps.
pub fn sample_and_group_batch(coords: &[Tensor], global_idx: &[Vec<usize>], n_out: usize, s: usize) -> Result<Grouping> {
    let mut g = Grouping { index: vec![], center_coords: vec![], global_idx: vec![] };
    for (c, gi) in coords.iter().zip(global_idx) {
        let idx = geometry::sample_and_group(c, n_out, s)?;
        g.center_coords.push(c.select_rows(&idx.centers)?);
        g.global_idx.push(idx.centers.iter().map(|&i| gi[i]).collect());
        g.index.push(idx);
    }
    Ok(g)
}

/// Gather each center's features into all `s` neighbor slots:
/// `[B·N × C] → [B·N × s × C]`.
pub fn broadcast_neighbors(fw: &mut Forward, x: Var, s: usize) -> Result<Var> {
    let (rows, c) = (fw.g.shape(x)[0], fw.g.shape(x)[1]);
    let idx: Vec<usize> = (0..rows).flat_map(|i| std::iter::repeat(i).take(s)).collect();
    let rep = fw.g.gather_rows(x, &idx)?;
    fw.g.reshape(rep, &[rows, s, c])
}

#[derive(Clone, Debug)]
pub struct CtBlock {
    pub cfg: CtBlockConfig,
    pub conv: Option<ConvBranch>,
    pub trans: Option<OffsetAttention>,
    pub ft1: Option<FeatureTransmission>,
    pub ft2: Option<FeatureTransmission>,
}

impl CtBlock {
    pub fn new(init: &mut Init, prefix: &str, cfg: CtBlockConfig) -> Result<Self> {
        cfg.validate()?;
        let v = cfg.variant;
        let conv = if v.has_local() {
            Some(ConvBranch {
                conv1: MlpBlock::new(init, &format!("{}.conv1", prefix), cfg.c_in + 3, &cfg.mlp1)?,
                conv2: MlpBlock::new(init, &format!("{}.conv2", prefix), cfg.c_mid, &cfg.mlp2)?,
            })
        } else {
            None
        };
        let trans = if v.has_global() {
            Some(OffsetAttention::new(init, &format!("{}.trans", prefix), cfg.attention)?)
        } else {
            None
        };
        let (ft1, ft2) = if v.has_transmission() {
            let d_e = cfg.attention.d_e;
            (
                Some(FeatureTransmission::new(init, &format!("{}.ft1", prefix), cfg.c_mid, d_e)?),
                Some(FeatureTransmission::new(init, &format!("{}.ft2", prefix), d_e, cfg.c_mid)?),
            )
        } else {
            (None, None)
        };
        Ok(Self { cfg, conv, trans, ft1, ft2 })
    }

    /// Runs the block on a batch, returning the next state.
    pub fn forward(&self, fw: &mut Forward, state: &BranchState) -> Result<BranchState> {
        let b = state.batch();
        let cfg = &self.cfg;
        let stage = |s: &str, e: Error| match e {
            Error::Dimension(m) => Error::Dimension(format!("ct-block {}: {}", s, m)),
            other => other,
        };

        // Sampling + grouping + first MLP block.
        let mut conv1_out = None;
        let mut grouping = None;
        if let Some(conv) = &self.conv {
            let local = state.local.ok_or_else(|| dim_err!("ct-block: local features missing"))?;
            if state.n_local() != cfg.n_in || fw.g.shape(local) != [b * cfg.n_in, cfg.c_in] {
                return Err(dim_err!(
                    "ct-block sg: expected {} clouds × {} points × {} channels, got {:?}",
                    b,
                    cfg.n_in,
                    cfg.c_in,
                    fw.g.shape(local)
                ));
            }
            let grp = sample_and_group_batch(&state.local_coords, &state.local_global_idx, cfg.n_out, cfg.neighbors)
                .map_err(|e| stage("sg", e))?;
            let coords: Vec<&Tensor> = state.local_coords.iter().collect();
            let idx: Vec<&NeighborIndex> = grp.index.iter().collect();
            let ctr: Vec<&Tensor> = grp.center_coords.iter().collect();
            let grouped = geometry::group_features_batched(&mut fw.g, local, &coords, &idx, &ctr)
                .map_err(|e| stage("sg", e))?;
            conv1_out = Some(conv.conv1.forward(fw, grouped).map_err(|e| stage("conv1", e))?);
            grouping = Some(grp);
        }

        // Global branch, fed by ft1.
        let mut global_out = None;
        if let Some(trans) = &self.trans {
            let fg = state.global.ok_or_else(|| dim_err!("ct-block: global features missing"))?;
            let mut input = fg;
            if let (Some(ft1), Some(f2), Some(grp)) = (&self.ft1, conv1_out, &grouping) {
                let pooled = fw.g.max_pool_axis(f2, 1)?;
                let src: Vec<&Tensor> = grp.center_coords.iter().collect();
                let dst: Vec<&Tensor> = state.global_coords.iter().collect();
                let up = geometry::interpolate_up_batched(&mut fw.g, pooled, &src, &dst, InterpSpec::default())
                    .map_err(|e| stage("ft1", e))?;
                let t = ft1.forward(fw, up).map_err(|e| stage("ft1", e))?;
                input = fw.g.add(t, fg).map_err(|e| stage("ft1", e))?;
            }
            global_out = Some(trans.forward_batched(fw, input, b).map_err(|e| stage("trans", e))?);
        }

        // Second MLP block, fed by ft2.
        let mut local_out = None;
        if let (Some(conv), Some(mut f2)) = (&self.conv, conv1_out) {
            let grp = grouping.as_ref().expect("grouping exists with conv branch");
            if let (Some(ft2), Some(fg)) = (&self.ft2, global_out) {
                let n_g = state.n_global();
                let rows: Vec<usize> = grp
                    .global_idx
                    .iter()
                    .enumerate()
                    .flat_map(|(c, gi)| gi.iter().map(move |&i| c * n_g + i))
                    .collect();
                let sel = geometry::downsample_select(&mut fw.g, fg, &rows).map_err(|e| stage("ft2", e))?;
                let t = ft2.forward(fw, sel).map_err(|e| stage("ft2", e))?;
                let t = broadcast_neighbors(fw, t, cfg.neighbors)?;
                f2 = fw.g.add(f2, t).map_err(|e| stage("ft2", e))?;
            }
            let f3 = conv.conv2.forward(fw, f2).map_err(|e| stage("conv2", e))?;
            local_out = Some(fw.g.max_pool_axis(f3, 1)?);
        }

        let (local_coords, local_global_idx) = match grouping {
            Some(g) => (g.center_coords, g.global_idx),
            None => (state.local_coords.clone(), state.local_global_idx.clone()),
        };
        Ok(BranchState {
            local: local_out,
            local_coords,
            local_global_idx,
            global: global_out,
            global_coords: state.global_coords.clone(),
        })
    }
}

/// Blocks applied in sequence; chaining is checked at construction.
#[derive(Clone, Debug)]
pub struct CtStack {
    pub blocks: Vec<CtBlock>,
}

impl CtStack {
    pub fn new(init: &mut Init, prefix: &str, cfgs: &[CtBlockConfig]) -> Result<Self> {
        for w in cfgs.windows(2) {
            let (a, b) = (&w[0], &w[1]);
            if a.c_out != b.c_in || a.n_out != b.n_in || a.attention != b.attention || a.variant != b.variant {
                return Err(Error::Config(format!(
                    "blocks do not chain: ({} pts, {} ch) -> ({} pts, {} ch)",
                    a.n_out, a.c_out, b.n_in, b.c_in
                )));
            }
        }
        let blocks = cfgs
            .iter()
            .enumerate()
            .map(|(i, c)| CtBlock::new(init, &format!("{}.{}", prefix, i), c.clone()))
            .collect::<Result<_>>()?;
        Ok(Self { blocks })
    }

    /// Returns the state after every block, in order.
    pub fn forward(&self, fw: &mut Forward, init: &BranchState) -> Result<Vec<BranchState>> {
        let mut states: Vec<BranchState> = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let next = block.forward(fw, states.last().unwrap_or(init))?;
            states.push(next);
        }
        Ok(states)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_validation() {
        let c = CtBlockConfig::new(16, 4, 8, 8, 4, 8);
        assert!(c.validate().is_ok());
        let mut bad = c.clone();
        bad.n_out = 6;
        assert!(bad.validate().is_err());
        let mut bad = c.clone();
        bad.neighbors = 17;
        assert!(bad.validate().is_err());
        let mut bad = c;
        bad.mlp1 = vec![8, 4];
        assert!(bad.validate().is_err());
    }

    #[test]
    fn chain_mismatch_rejected_at_build() {
        let mut store = ParamStore::new();
        let a = CtBlockConfig::new(32, 4, 8, 8, 4, 8);
        let b = CtBlockConfig::new(16, 16, 16, 16, 4, 8);
        let r = CtStack::new(&mut Init::new(&mut store, 0), "s", &[a, b]);
        assert!(matches!(r, Err(Error::Config(_))));
    }

    #[test]
    fn variants_register_only_their_parts() {
        let mut cfg = CtBlockConfig::new(16, 4, 8, 8, 4, 8);
        for (v, has_ft, has_conv, has_trans) in [
            (Variant::Full, true, true, true),
            (Variant::NoTransmission, false, true, true),
            (Variant::ConvOnly, false, true, false),
            (Variant::TransformerOnly, false, false, true),
        ] {
            cfg.variant = v;
            let mut store = ParamStore::new();
            let b = CtBlock::new(&mut Init::new(&mut store, 0), "b", cfg.clone()).unwrap();
            assert_eq!(b.ft1.is_some(), has_ft);
            assert_eq!(b.conv.is_some(), has_conv);
            assert_eq!(b.trans.is_some(), has_trans);
            assert_eq!(store.names().any(|n| n.contains(".ft")), has_ft);
        }
    }
}
