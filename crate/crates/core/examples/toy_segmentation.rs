//! Trains the part-segmentation network on hemispheres and capped
//! cylinders.
//!
//! cargo run --release --example toy_segmentation -- [epochs] [lr0] [seed]

use std::time::Instant;

use ctcloud::data::gen_part_shapes;
use ctcloud::metrics::evaluate_segmentation;
use ctcloud::networks::{ModelConfig, SegmentationModel};
use ctcloud::training::{train, AugmentPreset, TrainConfig, TrainState};

fn main() -> ctcloud::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let arg = |i: usize, d: &str| args.get(i).cloned().unwrap_or_else(|| d.to_string());
    let epochs: usize = arg(0, "20").parse().expect("epochs");
    let lr0: f64 = arg(1, "0.01").parse().expect("lr0");
    let seed: u64 = arg(2, "0").parse().expect("seed");

    let mut ds = gen_part_shapes(65, 512, seed)?;
    ds.assign_split(100, 30)?;
    let layout = ds.layout.clone().expect("part layout");
    let (train_set, test_set) = (ds.train(), ds.test());

    let mut model = SegmentationModel::new(&ModelConfig::toy(), 512, layout.clone(), seed)?;
    println!("parameters: {}", model.store.num_scalars());
    let cfg = TrainConfig { lr0, epochs, seed, batch_size: 8, ..TrainConfig::default() };
    let mut state = TrainState::new(&cfg);
    let start = Instant::now();
    train(
        &mut model,
        &train_set,
        &cfg,
        AugmentPreset::Segmentation,
        &mut state,
        |_| Ok(None),
        |_, _, row| {
            println!(
                "epoch {:3}  lr {:.4}  loss {:.4}  train point acc {:.3}  [{:.0}s]",
                row.epoch,
                row.lr,
                row.train_loss,
                row.train_acc,
                start.elapsed().as_secs_f64()
            );
            Ok(true)
        },
    )?;
    let m = evaluate_segmentation(&model, &test_set, &layout, &ds.class_names, 8, None)?;
    println!("test point accuracy {:.3}, pIoU {:.3}", m.point_accuracy, m.piou);
    for (name, iou) in &m.category_iou {
        println!("  {:10} {:.3}", name, iou);
    }
    Ok(())
}
