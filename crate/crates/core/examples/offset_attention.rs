//! One offset-attention layer: the doubly normalized attention matrix and
//! permutation equivariance of the output.
//!
//! cargo run --release --example offset_attention

use ctcloud::attention::{OaConfig, OffsetAttention};
use ctcloud::autodiff::Mode;
use ctcloud::nn::{Forward, Init};
use ctcloud::params::ParamStore;
use ctcloud::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> ctcloud::Result<()> {
    let (n, d_e) = (12, 16);
    let mut store = ParamStore::new();
    let oa = OffsetAttention::new(&mut Init::new(&mut store, 3), "oa", OaConfig::new(d_e))?;

    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = Tensor::from_fn(&[n, d_e], |_| rng.gen_range(-1.0..1.0));

    let mut fw = Forward::new(&store, Mode::Eval);
    let xv = fw.g.constant(x.clone());
    let tr = oa.trace(&mut fw, xv, 1)?;
    let a = fw.g.value(tr.attention).clone().reshape(&[n, n])?;
    let row_err = (0..n).map(|i| (a.row(i).iter().sum::<f64>() - 1.0).abs()).fold(0.0, f64::max);
    println!("attention {}x{}: max |row sum - 1| = {:.2e}, min entry = {:.3e}", n, n, row_err, a.data().iter().cloned().fold(f64::INFINITY, f64::min));
    let out = fw.g.value(tr.output).clone();

    let perm: Vec<usize> = (0..n).rev().collect();
    let mut fw = Forward::new(&store, Mode::Eval);
    let xp = fw.g.constant(x.select_rows(&perm)?);
    let yp = oa.forward(&mut fw, xp)?;
    let err = fw.g.value(yp).max_abs_diff(&out.select_rows(&perm)?);
    println!("permutation equivariance error: {:.2e}", err);
    Ok(())
}
