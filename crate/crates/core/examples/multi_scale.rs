//! Test-time multi-scale voting: fused probabilities averaged over scaled
//! copies of each cloud, compared with a single pass.
//!
//! cargo run --release --example multi_scale -- [epochs]

use ctcloud::data::gen_shapes;
use ctcloud::metrics::evaluate_classification;
use ctcloud::networks::{default_scales, ClassificationModel, ModelConfig, ScaleMode};
use ctcloud::training::{train, AugmentPreset, TrainConfig, TrainState};

fn main() -> ctcloud::Result<()> {
    let epochs: usize = std::env::args().nth(1).map_or(20, |s| s.parse().expect("epochs"));
    let mut ds = gen_shapes(30, 128, 0)?;
    ds.assign_split(60, 30)?;
    let (train_set, test_set) = (ds.train(), ds.test());
    let mut cfg_model = ModelConfig::toy();
    cfg_model.num_points = Some(128);
    let mut model = ClassificationModel::new(&cfg_model, 128, 3, 0)?;
    let cfg = TrainConfig { lr0: 0.01, epochs, ..TrainConfig::default() };
    let mut st = TrainState::new(&cfg);
    train(&mut model, &train_set, &cfg, AugmentPreset::Classification, &mut st, |_| Ok(None), |_, _, _| Ok(true))?;

    let scales = default_scales();
    let single = evaluate_classification(&model, &test_set, 3, 16, None)?;
    let uni = evaluate_classification(&model, &test_set, 3, 16, Some((&scales, ScaleMode::Uniform)))?;
    let aniso = evaluate_classification(&model, &test_set, 3, 16, Some((&scales, ScaleMode::Anisotropic { seed: 0 })))?;
    println!("scales {:?}", scales);
    println!("single pass       OA {:.3}  mAcc {:.3}", single.overall_accuracy, single.mean_class_accuracy);
    println!("uniform voting    OA {:.3}  mAcc {:.3}", uni.overall_accuracy, uni.mean_class_accuracy);
    println!("anisotropic vote  OA {:.3}  mAcc {:.3}", aniso.overall_accuracy, aniso.mean_class_accuracy);
    Ok(())
}
