//! Trains the two-head classifier on the sphere / cube / torus set.
//!
//! cargo run --release --example toy_classification -- [epochs] [lr0] [seed]

use std::time::Instant;

use ctcloud::data::gen_shapes;
use ctcloud::metrics::evaluate_classification;
use ctcloud::networks::{ClassificationModel, ModelConfig};
use ctcloud::training::{train, AugmentPreset, TrainConfig, TrainState};

fn main() -> ctcloud::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let arg = |i: usize, d: &str| args.get(i).cloned().unwrap_or_else(|| d.to_string());
    let epochs: usize = arg(0, "15").parse().expect("epochs");
    let lr0: f64 = arg(1, "0.01").parse().expect("lr0");
    let seed: u64 = arg(2, "0").parse().expect("seed");

    let mut ds = gen_shapes(87, 256, seed)?;
    ds.assign_split(200, 60)?;
    let (train_set, test_set) = (ds.train(), ds.test());

    let mut model = ClassificationModel::new(&ModelConfig::toy(), 256, 3, seed)?;
    println!("parameters: {}", model.store.num_scalars());
    let cfg = TrainConfig { lr0, epochs, seed, ..TrainConfig::default() };
    let mut state = TrainState::new(&cfg);
    let start = Instant::now();
    let history = train(
        &mut model,
        &train_set,
        &cfg,
        AugmentPreset::Classification,
        &mut state,
        |m| Ok(Some(evaluate_classification(m, &test_set, 3, 32, None)?.overall_accuracy)),
        |_, _, row| {
            println!(
                "epoch {:3}  lr {:.4}  loss {:.4}  train acc {:.3}  test acc {:.3}  [{:.0}s]",
                row.epoch,
                row.lr,
                row.train_loss,
                row.train_acc,
                row.eval.unwrap_or(f64::NAN),
                start.elapsed().as_secs_f64()
            );
            Ok(true)
        },
    )?;
    let train_acc = evaluate_classification(&model, &train_set, 3, 32, None)?;
    println!("final train OA {:.3}, test OA {:.3}", train_acc.overall_accuracy, history.last().unwrap().eval.unwrap());
    Ok(())
}
