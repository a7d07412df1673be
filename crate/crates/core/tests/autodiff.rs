mod common;

use common::{rng, uniform};
use ctcloud::autodiff::{Graph, OpKind};
use ctcloud::gradcheck::{check_graph, check_op};
use ctcloud::Tensor;
use proptest::prelude::*;

#[test]
fn every_op_passes_finite_differences() {
    for kind in OpKind::ALL {
        let e = check_op(kind, 3, 1e-6).unwrap();
        assert!(e < 1e-5, "{}: {:e}", kind.name(), e);
    }
}

#[test]
fn reused_input_accumulates_gradient() {
    // f(x) = sum(x ⊙ x + 3x)  ⇒  df/dx = 2x + 3.
    let x = Tensor::new(vec![2, 2], vec![0.5, -1.0, 2.0, 0.0]).unwrap();
    let mut g = Graph::new();
    let v = g.input(x.clone());
    let sq = g.mul(v, v).unwrap();
    let t = g.scale(v, 3.0);
    let s = g.add(sq, t).unwrap();
    let out = g.sum(s);
    g.backward(out).unwrap();
    let want: Vec<f64> = x.data().iter().map(|a| 2.0 * a + 3.0).collect();
    assert_eq!(g.grad(v).unwrap().data(), want.as_slice());
}

#[test]
fn constants_get_no_gradient() {
    let mut g = Graph::new();
    let c = g.constant(Tensor::ones(&[2, 2]));
    let x = g.input(Tensor::ones(&[2, 2]));
    let y = g.mul(c, x).unwrap();
    let out = g.sum(y);
    g.backward(out).unwrap();
    assert!(g.grad(c).is_none());
    assert_eq!(g.grad(x).unwrap().data(), &[1.0; 4]);
}

/// An attention-like chain: softmax over columns of X·Wᵀ, row-normalized,
/// applied to V, ReLU, column max, summed against a fixed projection.
fn chain(g: &mut Graph, v: &[ctcloud::autodiff::Var]) -> ctcloud::Result<ctcloud::autodiff::Var> {
    let (x, w, val) = (v[0], v[1], v[2]);
    let wt = g.transpose(w)?;
    let logits = g.matmul(x, wt)?;
    let a = g.softmax_cols(logits)?;
    let a = g.l1_normalize_rows(a, 1e-12);
    let h = g.matmul(a, val)?;
    let h = g.relu(h);
    let n = g.shape(h)[0];
    let c = g.shape(h)[1];
    let h3 = g.reshape(h, &[1, n, c])?;
    let m = g.max_pool_axis(h3, 1)?;
    let s = g.mul(m, m)?;
    Ok(g.sum(s))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn op_chains_match_central_differences(n in 2usize..7, d in 1usize..5, seed in 0u64..10_000) {
        let mut r = rng(seed);
        let x = uniform(&[n, d], &mut r);
        let w = uniform(&[n, d], &mut r);
        let val = uniform(&[n, 3], &mut r);
        let errs = check_graph(&[x, w, val], 1e-6, chain).unwrap();
        for e in errs {
            prop_assert!(e < 1e-5, "{:e}", e);
        }
    }

    #[test]
    fn backward_is_linear_in_the_seed_scale(n in 1usize..6, s in 0.1f64..10.0, seed in 0u64..10_000) {
        let x = uniform(&[n, 3], &mut rng(seed));
        let grad = |scale: f64| {
            let mut g = Graph::new();
            let v = g.input(x.clone());
            let y = g.relu(v);
            let y = g.mul(y, v).unwrap();
            let t = g.sum(y);
            let out = g.scale(t, scale);
            g.backward(out).unwrap();
            g.grad(v).unwrap().clone()
        };
        let (a, b) = (grad(1.0), grad(s));
        for (p, q) in a.data().iter().zip(b.data()) {
            prop_assert!((p * s - q).abs() <= 1e-12 * (1.0 + q.abs()));
        }
    }
}
