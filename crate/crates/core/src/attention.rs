//! Offset-attention over all points of a cloud.
//!
//! Single head, no positional encoding. The attention matrix `Q·Kᵀ` is
//! softmax-normalized down each column, then each row is divided by its
//! sum (floored at [`ROW_NORM_EPS`]), so every row is a convex weighting of
//! the value vectors. The
//! feed-forward unit sees the offset `A·V − F_in`, and its output is added
//! back onto `F_in`.

use crate::autodiff::{Graph, Var};
use crate::error::{dim_err, Result};
use crate::nn::{Forward, Init, Lbr, Linear};

/// Floor of the row-normalization denominator.
pub const ROW_NORM_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct OaConfig {
    /// Embedding / value width.
    pub d_e: usize,
    /// Query / key width.
    pub d_a: usize,
}

impl OaConfig {
    /// `d_a = d_e / 4` (at least 1).
    pub fn new(d_e: usize) -> Self {
        Self { d_e, d_a: (d_e / 4).max(1) }
    }
}

/// `Ā = Q·Kᵀ`, column softmax, then row L1 normalization. `q` and `k` are
/// `[N×d_a]`; the result is `[N×N]`.
pub fn attention_matrix(g: &mut Graph, q: Var, k: Var) -> Result<Var> {
    let n = g.shape(q)[0];
    let a = attention_matrix_batched(g, q, k, 1)?;
    g.reshape(a, &[n, n])
}

/// Batched form: `q`, `k` are `[B·N × d_a]`, output `[B × N × N]`.
pub fn attention_matrix_batched(g: &mut Graph, q: Var, k: Var, batch: usize) -> Result<Var> {
    let qs = g.shape(q).to_vec();
    if qs.len() != 2 || g.shape(k) != qs.as_slice() || batch == 0 || qs[0] % batch != 0 {
        return Err(dim_err!("attention: q {:?}, k {:?}, batch {}", qs, g.shape(k), batch));
    }
    let (n, da) = (qs[0] / batch, qs[1]);
    let q3 = g.reshape(q, &[batch, n, da])?;
    let k3 = g.reshape(k, &[batch, n, da])?;
    let kt = g.transpose(k3)?;
    let logits = g.matmul(q3, kt)?;
    let col = g.softmax_cols(logits)?;
    Ok(g.l1_normalize_rows(col, ROW_NORM_EPS))
}

/// Weights of one offset-attention layer.
#[derive(Clone, Debug)]
pub struct OffsetAttention {
    pub cfg: OaConfig,
    pub w_q: Linear,
    pub w_k: Linear,
    pub w_v: Linear,
    pub lbr: Lbr,
}

/// Intermediate tensors of one pass, exposed for inspection.
#[derive(Clone, Copy, Debug)]
pub struct OaTrace {
    pub q: Var,
    pub k: Var,
    pub v: Var,
    /// `[B×N×N]`
    pub attention: Var,
    /// `A·V`, `[B·N × d_e]`
    pub attended: Var,
    pub output: Var,
}

impl OffsetAttention {
    pub fn new(init: &mut Init, prefix: &str, cfg: OaConfig) -> Result<Self> {
        Ok(Self {
            cfg,
            w_q: Linear::new(init, &format!("{}.w_q", prefix), cfg.d_e, cfg.d_a, false)?,
            w_k: Linear::new(init, &format!("{}.w_k", prefix), cfg.d_e, cfg.d_a, false)?,
            w_v: Linear::new(init, &format!("{}.w_v", prefix), cfg.d_e, cfg.d_e, false)?,
            lbr: Lbr::new(init, &format!("{}.lbr", prefix), cfg.d_e, cfg.d_e)?,
        })
    }

    /// `(Q, K, V) = F·(W_q, W_k, W_v)`.
    pub fn project_qkv(&self, fw: &mut Forward, x: Var) -> Result<(Var, Var, Var)> {
        let s = fw.g.shape(x);
        if s.len() != 2 || s[1] != self.cfg.d_e {
            return Err(dim_err!("offset attention expects [N×{}], got {:?}", self.cfg.d_e, s));
        }
        Ok((self.w_q.forward(fw, x)?, self.w_k.forward(fw, x)?, self.w_v.forward(fw, x)?))
    }

    /// One cloud, `[N×d_e] → [N×d_e]`.
    pub fn forward(&self, fw: &mut Forward, x: Var) -> Result<Var> {
        self.forward_batched(fw, x, 1)
    }

    /// `batch` clouds stacked row-wise. Attention stays within each cloud;
    /// BatchNorm in the feed-forward sees all rows.
    pub fn forward_batched(&self, fw: &mut Forward, x: Var, batch: usize) -> Result<Var> {
        Ok(self.trace(fw, x, batch)?.output)
    }

    pub fn trace(&self, fw: &mut Forward, x: Var, batch: usize) -> Result<OaTrace> {
        let (q, k, v) = self.project_qkv(fw, x)?;
        let attention = attention_matrix_batched(&mut fw.g, q, k, batch)?;
        let rows = fw.g.shape(x)[0];
        let v3 = fw.g.reshape(v, &[batch, rows / batch, self.cfg.d_e])?;
        let av = fw.g.matmul(attention, v3)?;
        let attended = fw.g.reshape(av, &[rows, self.cfg.d_e])?;
        let offset = fw.g.sub(attended, x)?;
        let ff = self.lbr.forward(fw, offset)?;
        let output = fw.g.add(ff, x)?;
        Ok(OaTrace { q, k, v, attention, attended, output })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Mode;
    use crate::params::ParamStore;
    use crate::tensor::Tensor;

    #[test]
    fn default_query_width_is_quarter() {
        assert_eq!(OaConfig::new(256).d_a, 64);
        assert_eq!(OaConfig::new(2).d_a, 1);
    }

    #[test]
    fn zero_queries_give_uniform_attention() {
        let mut g = Graph::new();
        let q = g.constant(Tensor::zeros(&[5, 3]));
        let a = attention_matrix(&mut g, q, q).unwrap();
        assert_eq!(g.shape(a), &[5, 5]);
        let d = g.value(a).data();
        assert!(d.iter().all(|&v| v == 0.2), "{:?}", d);
        let one = g.constant(Tensor::new(vec![1, 3], vec![0.3, -1.0, 2.0]).unwrap());
        let a1 = attention_matrix(&mut g, one, one).unwrap();
        assert_eq!(g.value(a1).data(), &[1.0]);
    }

    #[test]
    fn projection_shapes() {
        let mut store = ParamStore::new();
        let oa = OffsetAttention::new(&mut Init::new(&mut store, 0), "oa", OaConfig::new(256)).unwrap();
        let mut fw = Forward::new(&store, Mode::Eval);
        let x = fw.g.constant(Tensor::zeros(&[128, 256]));
        let (q, k, v) = oa.project_qkv(&mut fw, x).unwrap();
        assert_eq!(fw.g.shape(q), &[128, 64]);
        assert_eq!(fw.g.shape(k), &[128, 64]);
        assert_eq!(fw.g.shape(v), &[128, 256]);
        assert!(fw.g.value(v).data().iter().all(|&x| x == 0.0));
        let bad = fw.g.constant(Tensor::zeros(&[4, 8]));
        assert!(oa.project_qkv(&mut fw, bad).is_err());
    }
}
