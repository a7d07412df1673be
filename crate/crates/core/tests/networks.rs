mod common;

use common::{classification_permutation_error, distinct_cloud, permutation, rng, toy_classifier};
use ctcloud::autodiff::Mode;
use ctcloud::ct_block::Variant;
use ctcloud::data::{gen_part_shapes, gen_shapes};
use ctcloud::networks::{multi_scale_predict, ClassificationModel, ModelConfig, PartLayout, PointModel, ScaleMode, SegmentationModel};
use ctcloud::nn::Forward;
use ctcloud::Error;

#[test]
fn classification_is_permutation_invariant() {
    let mut r = rng(1);
    let clouds: Vec<_> = (0..3).map(|_| distinct_cloud(128, &mut r)).collect();
    let model = toy_classifier(128, 3);
    let e = classification_permutation_error(&model, &clouds, 3, 2);
    assert!(e < 1e-6, "{:e}", e);
}

#[test]
fn every_variant_is_permutation_invariant() {
    let mut r = rng(2);
    let clouds: Vec<_> = (0..2).map(|_| distinct_cloud(64, &mut r)).collect();
    for v in [Variant::NoTransmission, Variant::ConvOnly, Variant::TransformerOnly] {
        let mut cfg = ModelConfig::micro();
        cfg.variant = v;
        let model = ClassificationModel::new(&cfg, 64, 4, 0).unwrap();
        let e = classification_permutation_error(&model, &clouds, 2, 3);
        assert!(e < 1e-6, "{:?}: {:e}", v, e);
    }
}

#[test]
fn segmentation_is_permutation_equivariant() {
    let ds = gen_part_shapes(1, 128, 5).unwrap();
    let model = SegmentationModel::new(&ModelConfig::micro(), 128, ds.layout.clone().unwrap(), 1).unwrap();
    for c in &ds.items {
        let cat = c.category.unwrap();
        let base = model.segment(c, cat, Mode::Eval).unwrap();
        let p = permutation(128, &mut rng(9));
        let out = model.segment(&c.permuted(&p).unwrap(), cat, Mode::Eval).unwrap();
        assert!(out.max_abs_diff(&base.select_rows(&p).unwrap()) < 1e-6);
    }
}

#[test]
fn batch_rows_equal_single_cloud_passes_in_eval() {
    let ds = gen_shapes(2, 64, 0).unwrap();
    let model = ClassificationModel::new(&ModelConfig::micro(), 64, 3, 0).unwrap();
    let refs: Vec<_> = ds.items.iter().collect();
    let mut fw = Forward::new(model.store(), Mode::Eval);
    let out = model.forward_heads(&mut fw, &refs).unwrap();
    let batched = fw.g.value(out.fused).clone();
    for (i, c) in ds.items.iter().enumerate() {
        let single = model.classify(c, Mode::Eval).unwrap().fused;
        for (a, b) in batched.row(i).iter().zip(single.data()) {
            assert!((a - b).abs() < 1e-10);
        }
    }
}

#[test]
fn fused_logits_are_head_sum() {
    let model = toy_classifier(64, 1);
    let c = distinct_cloud(64, &mut rng(3));
    let out = model.classify(&c, Mode::Eval).unwrap();
    let (l, g) = (out.local.unwrap(), out.global.unwrap());
    for i in 0..3 {
        assert!((out.fused.data()[i] - l.data()[i] - g.data()[i]).abs() < 1e-12);
    }
}

#[test]
fn single_scale_one_matches_plain_prediction() {
    let model = toy_classifier(64, 2);
    let c = distinct_cloud(64, &mut rng(4));
    let p = model.predict_proba(&c).unwrap();
    let m = multi_scale_predict(&model, &c, &[1.0], ScaleMode::Uniform).unwrap();
    assert!(p.max_abs_diff(&m) < 1e-15);
    let rows: f64 = p.data().iter().sum();
    assert!((rows - 1.0).abs() < 1e-12);
}

#[test]
fn wrong_point_count_is_config_error() {
    let model = toy_classifier(64, 0);
    let c = distinct_cloud(32, &mut rng(5));
    assert!(matches!(model.classify(&c, Mode::Eval), Err(Error::Config(_))));
    assert!(ClassificationModel::new(&ModelConfig::toy(), 50, 3, 0).is_err());
}

#[test]
fn segmentation_outputs_one_row_per_point() {
    let layout = PartLayout { parts_per_category: vec![2, 3] };
    let model = SegmentationModel::new(&ModelConfig::micro(), 64, layout, 0).unwrap();
    let c = distinct_cloud(64, &mut rng(6));
    let s = model.segment(&c, 1, Mode::Eval).unwrap();
    assert_eq!(s.shape(), &[64, 5]);
}
