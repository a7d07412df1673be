//! Farthest-point sampling, k-NN grouping and inverse-distance weights on
//! a small random cloud.
//!
//! cargo run --release --example fps_knn

use ctcloud::data::sample_sphere;
use ctcloud::geometry::{farthest_point_sample, interpolation_weights, sample_and_group, InterpSpec};
use ctcloud::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> ctcloud::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let pts = sample_sphere(32, &mut rng);
    let cloud = Tensor::new(vec![pts.len(), 3], pts.iter().flatten().copied().collect())?;

    let fps = farthest_point_sample(&cloud, 8)?;
    println!("fps picks: {:?}", fps);

    let groups = sample_and_group(&cloud, 8, 4)?;
    for i in 0..groups.len() {
        println!("center {:2} -> neighbors {:?}", groups.centers[i], groups.neighbors_of(i));
    }

    let centers = cloud.select_rows(&fps)?;
    let (idx, w, k) = interpolation_weights(&centers, &cloud, InterpSpec::default())?;
    let p = (0..cloud.rows()).find(|i| !fps.contains(i)).expect("a non-center point");
    let nb: Vec<usize> = idx[p * k..(p + 1) * k].iter().map(|&j| fps[j]).collect();
    println!("point {} interpolates from {:?} with weights {:.3?}", p, nb, &w[p * k..(p + 1) * k]);
    Ok(())
}
