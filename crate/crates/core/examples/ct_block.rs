//! A single CT-block: branch shapes, and what happens when the
//! transmission elements are zeroed (the branches decouple).
//!
//! cargo run --release --example ct_block

use ctcloud::autodiff::Mode;
use ctcloud::ct_block::{BranchState, CtBlock, CtBlockConfig, Variant};
use ctcloud::nn::{Forward, Init};
use ctcloud::params::ParamStore;
use ctcloud::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn run(block: &CtBlock, store: &ParamStore, coords: &Tensor, local: &Tensor, global: &Tensor) -> ctcloud::Result<(Option<Tensor>, Option<Tensor>)> {
    let mut fw = Forward::new(store, Mode::Eval);
    let n = coords.rows();
    let state = BranchState {
        local: block.conv.as_ref().map(|_| fw.g.constant(local.clone())),
        local_coords: vec![coords.clone()],
        local_global_idx: vec![(0..n).collect()],
        global: block.trans.as_ref().map(|_| fw.g.constant(global.clone())),
        global_coords: vec![coords.clone()],
    };
    let out = block.forward(&mut fw, &state)?;
    Ok((out.local.map(|v| fw.g.value(v).clone()), out.global.map(|v| fw.g.value(v).clone())))
}

fn main() -> ctcloud::Result<()> {
    let (n, c, d_e) = (32, 8, 16);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let coords = Tensor::from_fn(&[n, 3], |_| rng.gen_range(-1.0..1.0));
    let local = Tensor::from_fn(&[n, c], |_| rng.gen_range(-1.0..1.0));
    let global = Tensor::from_fn(&[n, d_e], |_| rng.gen_range(-1.0..1.0));

    let cfg = CtBlockConfig::new(n, c, 16, 24, 4, d_e);
    let mut store = ParamStore::new();
    let full = CtBlock::new(&mut Init::new(&mut store, 0), "b", cfg.clone())?;
    let (l, g) = run(&full, &store, &coords, &local, &global)?;
    println!("local out {:?}, global out {:?}", l.as_ref().map(|t| t.shape().to_vec()), g.as_ref().map(|t| t.shape().to_vec()));

    for ft in [&full.ft1, &full.ft2].into_iter().flatten() {
        ft.zero(&mut store)?;
    }
    let (l0, g0) = run(&full, &store, &coords, &local, &global)?;

    // Standalone branches reusing the same weights.
    let mut conv_cfg = cfg.clone();
    conv_cfg.variant = Variant::ConvOnly;
    let mut conv_store = ParamStore::new();
    let conv = CtBlock::new(&mut Init::new(&mut conv_store, 99), "b", conv_cfg)?;
    let mut trans_cfg = cfg;
    trans_cfg.variant = Variant::TransformerOnly;
    let mut trans_store = ParamStore::new();
    let trans = CtBlock::new(&mut Init::new(&mut trans_store, 99), "b", trans_cfg)?;
    for s in [&mut conv_store, &mut trans_store] {
        let names: Vec<String> = s.names().map(String::from).collect();
        for name in names {
            s.set(&name, store.get(&name).expect("shared parameter").value.clone())?;
        }
    }
    let (lc, _) = run(&conv, &conv_store, &coords, &local, &global)?;
    let gt = run(&trans, &trans_store, &coords, &local, &global)?.1.expect("global output");
    println!("zeroed transmission vs conv-only:        {:.2e}", l0.unwrap().max_abs_diff(&lc.unwrap()));
    println!("zeroed transmission vs transformer-only: {:.2e}", g0.unwrap().max_abs_diff(&gt));
    println!("live transmission moves global by:       {:.2e}", g.unwrap().max_abs_diff(&gt));
    Ok(())
}
