//! Writes a synthetic dataset as `.xyz` / `.labels` files plus a JSON
//! manifest, then reads it back.
//!
//! cargo run --release --example data_io -- [out_dir]

use std::path::PathBuf;

use ctcloud::data::{gen_part_shapes, load_dataset, save_dataset};

fn main() -> ctcloud::Result<()> {
    let out = std::env::args().nth(1).map_or_else(|| std::env::temp_dir().join("ctcloud-data-io"), PathBuf::from);
    let mut ds = gen_part_shapes(4, 64, 11)?;
    ds.assign_split(6, 2)?;
    let manifest = save_dataset(&out, &ds)?;
    println!("wrote {}", manifest.display());

    let back = load_dataset(&manifest)?;
    println!(
        "read {} clouds, categories {:?}, parts per category {:?}, split {}/{}",
        back.items.len(),
        back.class_names,
        back.layout.as_ref().map(|l| l.parts_per_category.clone()),
        back.split.train.len(),
        back.split.test.len()
    );
    let same = ds.items.iter().zip(&back.items).all(|(a, b)| a.coords == b.coords && a.point_labels == b.point_labels && a.category == b.category);
    println!("round trip exact: {}", same);
    Ok(())
}
