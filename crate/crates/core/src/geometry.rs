//! Point sampling, neighborhood search, grouping and interpolation.
//!
//! Index-producing routines ([`farthest_point_sample`], [`knn_group`]) work on
//! plain coordinate tensors and are never differentiated. The feature
//! routines record gather operations on a [`Graph`] so gradients flow back
//! to the source features.

use std::cmp::Ordering;

use crate::autodiff::{Graph, Var};
use crate::error::{dim_err, Error, Result};
use crate::tensor::Tensor;

/// A cloud of `N` points with optional per-point features and labels.
#[derive(Clone, Debug, PartialEq)]
pub struct PointCloud {
    /// `[N×3]` coordinates.
    pub coords: Tensor,
    /// `[N×C]` extra channels.
    pub features: Option<Tensor>,
    pub point_labels: Option<Vec<usize>>,
    pub category: Option<usize>,
}

impl PointCloud {
    pub fn new(coords: Tensor) -> Result<Self> {
        check_coords(&coords)?;
        if !coords.all_finite() {
            return Err(Error::Data("point coordinates must be finite".into()));
        }
        Ok(Self { coords, features: None, point_labels: None, category: None })
    }

    pub fn with_labels(mut self, labels: Vec<usize>) -> Result<Self> {
        if labels.len() != self.len() {
            return Err(Error::Data(format!("{} labels for {} points", labels.len(), self.len())));
        }
        self.point_labels = Some(labels);
        Ok(self)
    }

    pub fn with_category(mut self, category: usize) -> Self {
        self.category = Some(category);
        self
    }

    pub fn len(&self) -> usize {
        self.coords.rows()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn point(&self, i: usize) -> [f64; 3] {
        let r = self.coords.row(i);
        [r[0], r[1], r[2]]
    }

    /// Reorders points (and labels/features) so that new point `i` is old
    /// point `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        Ok(Self {
            coords: self.coords.select_rows(perm)?,
            features: self.features.as_ref().map(|f| f.select_rows(perm)).transpose()?,
            point_labels: self.point_labels.as_ref().map(|l| perm.iter().map(|&i| l[i]).collect()),
            category: self.category,
        })
    }

    /// Copy with coordinates scaled per axis.
    pub fn scaled(&self, s: [f64; 3]) -> Self {
        let mut out = self.clone();
        for row in out.coords.data_mut().chunks_mut(3) {
            for a in 0..3 {
                row[a] *= s[a];
            }
        }
        out
    }
}

fn check_coords(coords: &Tensor) -> Result<usize> {
    match coords.shape() {
        [n, 3] => Ok(*n),
        s => Err(dim_err!("coordinates must be [N×3], got {:?}", s)),
    }
}

#[inline]
fn dist2(a: &[f64], b: &[f64]) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

fn lex_cmp(a: &[f64], b: &[f64]) -> Ordering {
    a[0].total_cmp(&b[0]).then(a[1].total_cmp(&b[1])).then(a[2].total_cmp(&b[2]))
}

/// Greedy farthest-point sampling.
///
/// Points are first put in canonical (lexicographic `x, y, z`, then index)
/// order; the seed is the point farthest from the centroid, and each later
/// pick maximizes its distance to the already chosen set. All ties go to
/// the canonically smallest point, so for clouds without duplicate points
/// the chosen coordinates (and their order) do not depend on the input
/// order. Returns original indices in selection order.
pub fn farthest_point_sample(coords: &Tensor, n_out: usize) -> Result<Vec<usize>> {
    let n = check_coords(coords)?;
    if n_out == 0 || n_out > n {
        return Err(dim_err!("farthest_point_sample: n_out {} not in [1, {}]", n_out, n));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| lex_cmp(coords.row(a), coords.row(b)).then(a.cmp(&b)));
    let pts: Vec<&[f64]> = order.iter().map(|&i| coords.row(i)).collect();

    let mut centroid = [0.0; 3];
    for p in &pts {
        for a in 0..3 {
            centroid[a] += p[a];
        }
    }
    centroid.iter_mut().for_each(|c| *c /= n as f64);

    let mut best = 0;
    let mut best_d = f64::NEG_INFINITY;
    for (i, p) in pts.iter().enumerate() {
        let d = dist2(p, &centroid);
        if d > best_d {
            best_d = d;
            best = i;
        }
    }

    let mut min_d = vec![f64::INFINITY; n];
    let mut chosen = Vec::with_capacity(n_out);
    loop {
        chosen.push(order[best]);
        min_d[best] = -1.0;
        if chosen.len() == n_out {
            break;
        }
        let c = pts[best];
        let mut next = usize::MAX;
        let mut next_d = f64::NEG_INFINITY;
        for (i, p) in pts.iter().enumerate() {
            if min_d[i] < 0.0 {
                continue;
            }
            let d = dist2(p, c);
            if d < min_d[i] {
                min_d[i] = d;
            }
            if min_d[i] > next_d {
                next_d = min_d[i];
                next = i;
            }
        }
        best = next;
    }
    Ok(chosen)
}

/// Indices of the `k` nearest source points for every query point,
/// row-major `[M×k]`, nearest first. Distance ties go to the smaller index.
pub fn knn_group(src: &Tensor, query: &Tensor, k: usize) -> Result<Vec<usize>> {
    let n = check_coords(src)?;
    let m = check_coords(query)?;
    if k == 0 || k > n {
        return Err(dim_err!("knn_group: k {} not in [1, {}]", k, n));
    }
    let mut out = Vec::with_capacity(m * k);
    let mut cand: Vec<(f64, usize)> = Vec::with_capacity(n);
    for qi in 0..m {
        let q = query.row(qi);
        cand.clear();
        cand.extend((0..n).map(|j| (dist2(src.row(j), q), j)));
        let cmp = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
        if k < n {
            cand.select_nth_unstable_by(k - 1, cmp);
        }
        let head = &mut cand[..k];
        head.sort_unstable_by(cmp);
        out.extend(head.iter().map(|&(_, j)| j));
    }
    Ok(out)
}

/// Sampled centers and their neighborhoods in one source cloud.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NeighborIndex {
    /// Indices of the sampled centers in the source cloud.
    pub centers: Vec<usize>,
    /// Row-major `[centers.len() × k]` neighbor indices.
    pub neighbors: Vec<usize>,
    pub k: usize,
}

impl NeighborIndex {
    pub fn len(&self) -> usize {
        self.centers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.centers.is_empty()
    }

    pub fn neighbors_of(&self, i: usize) -> &[usize] {
        &self.neighbors[i * self.k..(i + 1) * self.k]
    }
}

/// Farthest-point sampling followed by k-NN grouping around each center.
pub fn sample_and_group(coords: &Tensor, n_out: usize, k: usize) -> Result<NeighborIndex> {
    let centers = farthest_point_sample(coords, n_out)?;
    let center_coords = coords.select_rows(&centers)?;
    let neighbors = knn_group(coords, &center_coords, k)?;
    Ok(NeighborIndex { centers, neighbors, k })
}

/// Gathers neighbor features and appends neighbor coordinates relative to
/// their center: `[N_out × S × (C + 3)]`.
pub fn group_features(
    g: &mut Graph,
    features: Var,
    coords: &Tensor,
    idx: &NeighborIndex,
    center_coords: &Tensor,
) -> Result<Var> {
    group_features_batched(g, features, &[coords], &[idx], &[center_coords])
}

/// [`group_features`] over a batch whose per-cloud features are stacked
/// row-wise in `features` (`[B·N × C]`, equal `N` per cloud).
pub fn group_features_batched(
    g: &mut Graph,
    features: Var,
    coords: &[&Tensor],
    idx: &[&NeighborIndex],
    center_coords: &[&Tensor],
) -> Result<Var> {
    let b = coords.len();
    if idx.len() != b || center_coords.len() != b || b == 0 {
        return Err(dim_err!("group_features: batch sizes disagree"));
    }
    let fshape = g.shape(features).to_vec();
    let n = check_coords(coords[0])?;
    if fshape.len() != 2 || fshape[0] != b * n {
        return Err(dim_err!("group_features: features {:?} vs {} clouds of {} points", fshape, b, n));
    }
    let (n_out, k) = (idx[0].len(), idx[0].k);
    let mut gather = Vec::with_capacity(b * n_out * k);
    let mut rel = Vec::with_capacity(b * n_out * k * 3);
    for c in 0..b {
        if check_coords(coords[c])? != n || idx[c].len() != n_out || idx[c].k != k {
            return Err(dim_err!("group_features: cloud {} has inconsistent sizes", c));
        }
        if center_coords[c].rows() != n_out {
            return Err(dim_err!("group_features: {} center coords for {} centers", center_coords[c].rows(), n_out));
        }
        for i in 0..n_out {
            let ctr = center_coords[c].row(i);
            for &j in idx[c].neighbors_of(i) {
                if j >= n {
                    return Err(dim_err!("group_features: neighbor {} out of range", j));
                }
                gather.push(c * n + j);
                let p = coords[c].row(j);
                rel.extend_from_slice(&[p[0] - ctr[0], p[1] - ctr[1], p[2] - ctr[2]]);
            }
        }
    }
    let f = g.gather_rows(features, &gather)?;
    let r = g.constant(Tensor::new(vec![b * n_out * k, 3], rel)?);
    let cat = g.concat(&[f, r], 1)?;
    g.reshape(cat, &[b * n_out, k, fshape[1] + 3])
}

/// Inverse-distance interpolation settings: weights `1 / (d^power + eps)`
/// over the `k` nearest sources, renormalized to sum to one.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct InterpSpec {
    pub k: usize,
    pub power: f64,
    pub eps: f64,
}

impl Default for InterpSpec {
    fn default() -> Self {
        Self { k: 3, power: 2.0, eps: 1e-8 }
    }
}

/// Neighbor indices and normalized weights for interpolating from `src`
/// onto `dst`. Uses `min(k, N_src)` neighbors; returns `(idx, w, k_eff)`.
pub fn interpolation_weights(src: &Tensor, dst: &Tensor, spec: InterpSpec) -> Result<(Vec<usize>, Vec<f64>, usize)> {
    let n = check_coords(src)?;
    let k = spec.k.min(n).max(1);
    let idx = knn_group(src, dst, k)?;
    let mut w = Vec::with_capacity(idx.len());
    for (qi, nb) in idx.chunks(k).enumerate() {
        let q = dst.row(qi);
        let start = w.len();
        for &j in nb {
            let d2 = dist2(src.row(j), q);
            let dp = if spec.power == 2.0 { d2 } else { d2.sqrt().powf(spec.power) };
            w.push(1.0 / (dp + spec.eps));
        }
        let s: f64 = w[start..].iter().sum();
        w[start..].iter_mut().for_each(|v| *v /= s);
    }
    Ok((idx, w, k))
}

/// Interpolates `[N_l×C]` source features onto `N_g` destination points.
pub fn interpolate_up(g: &mut Graph, feat_src: Var, coords_src: &Tensor, coords_dst: &Tensor, spec: InterpSpec) -> Result<Var> {
    interpolate_up_batched(g, feat_src, &[coords_src], &[coords_dst], spec)
}

/// Batched [`interpolate_up`]: features stacked `[B·N_l × C]`, output
/// `[B·N_g × C]`.
pub fn interpolate_up_batched(
    g: &mut Graph,
    feat_src: Var,
    coords_src: &[&Tensor],
    coords_dst: &[&Tensor],
    spec: InterpSpec,
) -> Result<Var> {
    let b = coords_src.len();
    if coords_dst.len() != b || b == 0 {
        return Err(dim_err!("interpolate_up: batch sizes disagree"));
    }
    let nl = check_coords(coords_src[0])?;
    if g.shape(feat_src).len() != 2 || g.shape(feat_src)[0] != b * nl {
        return Err(dim_err!("interpolate_up: features {:?} vs {} clouds of {} points", g.shape(feat_src), b, nl));
    }
    let mut all_idx = Vec::new();
    let mut all_w = Vec::new();
    let mut k_eff = 0;
    for c in 0..b {
        if check_coords(coords_src[c])? != nl {
            return Err(dim_err!("interpolate_up: ragged source clouds"));
        }
        let (idx, w, k) = interpolation_weights(coords_src[c], coords_dst[c], spec)?;
        k_eff = k;
        all_idx.extend(idx.into_iter().map(|j| c * nl + j));
        all_w.extend(w);
    }
    g.weighted_gather(feat_src, &all_idx, &all_w, k_eff)
}

/// Selects the global-branch rows that sit at the local points' positions.
pub fn downsample_select(g: &mut Graph, feat_global: Var, global_indices_of_local: &[usize]) -> Result<Var> {
    g.gather_rows(feat_global, global_indices_of_local)
}
