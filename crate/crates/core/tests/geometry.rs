mod common;

use common::{fps_oracle, knn_oracle, permutation, rng, uniform};
use ctcloud::autodiff::Graph;
use ctcloud::geometry::{farthest_point_sample, interpolate_up, interpolation_weights, knn_group, sample_and_group, InterpSpec};
use ctcloud::Tensor;
use proptest::prelude::*;

fn coords_strategy(max_n: usize) -> impl Strategy<Value = Tensor> {
    (1..=max_n).prop_flat_map(|n| {
        proptest::collection::vec(-1.0f64..1.0, n * 3).prop_map(move |d| Tensor::new(vec![n, 3], d).unwrap())
    })
}

/// Coordinates on a coarse grid, so distance ties are common.
fn grid_strategy(max_n: usize) -> impl Strategy<Value = Tensor> {
    (1..=max_n).prop_flat_map(|n| {
        proptest::collection::vec(-2i32..=2, n * 3)
            .prop_map(move |d| Tensor::new(vec![n, 3], d.into_iter().map(f64::from).collect()).unwrap())
    })
}

#[test]
fn fps_matches_brute_force_on_every_subset() {
    let mut r = rng(10);
    let cloud = uniform(&[10, 3], &mut r);
    for mask in 1u32..(1 << 10) {
        let idx: Vec<usize> = (0..10).filter(|i| mask & (1 << i) != 0).collect();
        let sub = cloud.select_rows(&idx).unwrap();
        for m in 1..=idx.len() {
            assert_eq!(farthest_point_sample(&sub, m).unwrap(), fps_oracle(&sub, m), "subset {:b}, m {}", mask, m);
        }
    }
}

#[test]
fn fps_prefix_property() {
    let mut r = rng(11);
    let c = uniform(&[40, 3], &mut r);
    let all = farthest_point_sample(&c, 40).unwrap();
    for m in [1, 5, 17, 39] {
        assert_eq!(farthest_point_sample(&c, m).unwrap(), all[..m]);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn fps_equals_oracle(c in coords_strategy(12), frac in 0.0f64..1.0) {
        let m = 1 + ((c.rows() - 1) as f64 * frac) as usize;
        prop_assert_eq!(farthest_point_sample(&c, m).unwrap(), fps_oracle(&c, m));
    }

    #[test]
    fn fps_equals_oracle_with_ties(c in grid_strategy(10), frac in 0.0f64..1.0) {
        let m = 1 + ((c.rows() - 1) as f64 * frac) as usize;
        prop_assert_eq!(farthest_point_sample(&c, m).unwrap(), fps_oracle(&c, m));
    }

    #[test]
    fn fps_picks_distinct_indices(c in grid_strategy(10)) {
        let mut s = farthest_point_sample(&c, c.rows()).unwrap();
        s.sort_unstable();
        prop_assert_eq!(s, (0..c.rows()).collect::<Vec<_>>());
    }

    #[test]
    fn fps_coordinates_ignore_input_order(c in coords_strategy(16), seed in 0u64..1000) {
        let n = c.rows();
        let m = (n / 2).max(1);
        let p = permutation(n, &mut rng(seed));
        let cp = c.select_rows(&p).unwrap();
        let a = c.select_rows(&farthest_point_sample(&c, m).unwrap()).unwrap();
        let b = cp.select_rows(&farthest_point_sample(&cp, m).unwrap()).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn knn_equals_sort_oracle(src in coords_strategy(20), q in coords_strategy(6), kf in 0.0f64..1.0) {
        let k = 1 + ((src.rows() - 1) as f64 * kf) as usize;
        prop_assert_eq!(knn_group(&src, &q, k).unwrap(), knn_oracle(&src, &q, k));
    }

    #[test]
    fn knn_with_ties_equals_sort_oracle(src in grid_strategy(20), q in grid_strategy(4), kf in 0.0f64..1.0) {
        let k = 1 + ((src.rows() - 1) as f64 * kf) as usize;
        prop_assert_eq!(knn_group(&src, &q, k).unwrap(), knn_oracle(&src, &q, k));
    }

    #[test]
    fn interpolation_weights_partition_unity(src in coords_strategy(12), dst in coords_strategy(12)) {
        let (idx, w, k) = interpolation_weights(&src, &dst, InterpSpec::default()).unwrap();
        prop_assert_eq!(k, src.rows().min(3));
        prop_assert_eq!(idx.len(), dst.rows() * k);
        for row in w.chunks(k) {
            prop_assert!(row.iter().all(|&x| x >= 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }
}

#[test]
fn knn_100_random_instances() {
    let mut r = rng(12);
    for t in 0..100 {
        let n = 5 + t % 40;
        let src = uniform(&[n, 3], &mut r);
        let q = uniform(&[7, 3], &mut r);
        let k = 1 + t % n;
        assert_eq!(knn_group(&src, &q, k).unwrap(), knn_oracle(&src, &q, k));
    }
}

#[test]
fn interpolation_reproduces_constants_and_sources() {
    let mut r = rng(13);
    let src = uniform(&[16, 3], &mut r);
    let dst = uniform(&[40, 3], &mut r);
    let mut g = Graph::new();
    let ones = g.constant(Tensor::ones(&[16, 2]));
    let up = interpolate_up(&mut g, ones, &src, &dst, InterpSpec::default()).unwrap();
    assert!(g.value(up).data().iter().all(|v| (v - 1.0).abs() < 1e-12));

    // Interpolating onto the source points themselves returns the source
    // features (up to the eps in the weights).
    let f = uniform(&[16, 4], &mut r);
    let fv = g.constant(f.clone());
    let same = interpolate_up(&mut g, fv, &src, &src, InterpSpec::default()).unwrap();
    assert!(g.value(same).max_abs_diff(&f) < 1e-6);
}

#[test]
fn sample_and_group_centers_are_own_nearest() {
    let mut r = rng(14);
    let c = uniform(&[64, 3], &mut r);
    let idx = sample_and_group(&c, 16, 8).unwrap();
    assert_eq!(idx.len(), 16);
    for i in 0..16 {
        assert_eq!(idx.neighbors_of(i)[0], idx.centers[i]);
        assert_eq!(idx.neighbors_of(i), knn_oracle(&c, &c.select_rows(&[idx.centers[i]]).unwrap(), 8).as_slice());
    }
}

#[test]
fn bad_sizes_are_dimension_errors() {
    let c = Tensor::zeros(&[4, 3]);
    assert!(farthest_point_sample(&c, 0).is_err());
    assert!(farthest_point_sample(&c, 5).is_err());
    assert!(knn_group(&c, &c, 5).is_err());
    assert!(farthest_point_sample(&Tensor::zeros(&[4, 2]), 2).is_err());
}
