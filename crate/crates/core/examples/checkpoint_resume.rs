//! Interrupting training after a few epochs and resuming from the
//! checkpoint gives the same weights as an uninterrupted run.
//!
//! cargo run --release --example checkpoint_resume

use ctcloud::data::gen_shapes;
use ctcloud::networks::{ClassificationModel, ModelConfig, PointModel};
use ctcloud::params::Checkpoint;
use ctcloud::training::{train, AugmentPreset, TrainConfig, TrainState};

fn main() -> ctcloud::Result<()> {
    let mut ds = gen_shapes(6, 64, 4)?;
    ds.assign_split(12, 6)?;
    let train_set = ds.train();
    let cfg = TrainConfig { lr0: 0.01, epochs: 4, batch_size: 4, seed: 4, ..TrainConfig::default() };
    let model_cfg = ModelConfig::micro();
    let fresh = || ClassificationModel::new(&model_cfg, 64, 3, 4);

    let mut full = fresh()?;
    let mut st = TrainState::new(&cfg);
    train(&mut full, &train_set, &cfg, AugmentPreset::Classification, &mut st, |_| Ok(None), |_, _, _| Ok(true))?;

    let dir = tempfile::tempdir().expect("temp dir");
    let path = dir.path().join("epoch2.ckpt");
    let mut first = fresh()?;
    let mut st = TrainState::new(&cfg);
    train(&mut first, &train_set, &cfg, AugmentPreset::Classification, &mut st, |_| Ok(None), |m, s, _| {
        s.checkpoint(m.store()).save(&path)?;
        Ok(s.epochs_done < 2)
    })?;
    println!("stopped after {} epochs, checkpoint at {}", st.epochs_done, path.display());

    let mut resumed = fresh()?;
    let mut st = TrainState::resume(&Checkpoint::load(&path)?, resumed.store_mut(), &cfg)?;
    train(&mut resumed, &train_set, &cfg, AugmentPreset::Classification, &mut st, |_| Ok(None), |_, _, _| Ok(true))?;

    let a = Checkpoint::from_store(full.store()).to_text();
    let b = Checkpoint::from_store(resumed.store()).to_text();
    println!("resumed weights identical to uninterrupted run: {}", a == b);
    Ok(())
}
