//! Trains the four block variants on the toy classification set and
//! reports test accuracy averaged over seeds.
//!
//! cargo run --release --example ablation -- [epochs] [seeds]

use ctcloud::ct_block::Variant;
use ctcloud::data::gen_shapes;
use ctcloud::metrics::evaluate_classification;
use ctcloud::networks::{ClassificationModel, ModelConfig};
use ctcloud::training::{train, AugmentPreset, TrainConfig, TrainState};

fn main() -> ctcloud::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let epochs: usize = args.first().map_or(10, |s| s.parse().expect("epochs"));
    let seeds: u64 = args.get(1).map_or(3, |s| s.parse().expect("seeds"));

    let variants = [Variant::Full, Variant::ConvOnly, Variant::TransformerOnly, Variant::NoTransmission];
    for v in variants {
        let mut accs = Vec::new();
        for seed in 0..seeds {
            let mut ds = gen_shapes(87, 256, seed)?;
            ds.assign_split(200, 60)?;
            let (train_set, test_set) = (ds.train(), ds.test());
            let mut mc = ModelConfig::toy();
            mc.variant = v;
            let mut model = ClassificationModel::new(&mc, 256, 3, seed)?;
            let cfg = TrainConfig { lr0: 0.01, epochs, seed, ..TrainConfig::default() };
            let mut st = TrainState::new(&cfg);
            train(&mut model, &train_set, &cfg, AugmentPreset::Classification, &mut st, |_| Ok(None), |_, _, _| Ok(true))?;
            accs.push(evaluate_classification(&model, &test_set, 3, 16, None)?.overall_accuracy);
        }
        let mean = accs.iter().sum::<f64>() / accs.len() as f64;
        println!("{:<16} mean test OA {:.3}  per seed {:.3?}", format!("{:?}", v), mean, accs);
    }
    Ok(())
}
