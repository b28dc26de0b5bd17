//! Builds every initialization scheme for a few profile-ish test faces and
//! prints how far each starts from the ground truth.
//!
//!     cargo run --release --example init_schemes

use poseinit::data::{generate_synthetic, split, SynthConfig};
use poseinit::eval::normalized_error;
use poseinit::geometry::Shape3D;
use poseinit::init::{aggregate_median, mean_shape_init, random_init, scheme1_3d_init, scheme2_knn_init, TrainExemplar};

fn main() -> poseinit::Result<()> {
    let shape3d = Shape3D::canonical();
    let (train, test) = split(generate_synthetic(&SynthConfig::default(), &shape3d)?, 0.8, 0)?;
    let exemplars = train.iter().map(TrainExemplar::from_sample).collect::<poseinit::Result<Vec<_>>>()?;

    println!("{:>12} {:>6}  {:>7} {:>8} {:>8} {:>7} {:>7}", "id", "yaw", "mean", "random1", "random5", "3d", "knn5");
    for s in test.iter().filter(|s| s.pose.is_some_and(|p| p.yaw.abs() >= 40.0)).take(8) {
        let gt = s.landmarks.as_ref().expect("landmarks");
        let pose = s.pose.expect("pose");
        let err = |shape| normalized_error(&shape, gt);
        println!(
            "{:>12} {:>6.1}  {:>7.3} {:>8.3} {:>8.3} {:>7.3} {:>7.3}",
            s.id,
            pose.yaw,
            err(mean_shape_init(&exemplars, &s.bb)?)?,
            err(random_init(&exemplars, &s.bb, 1, 0)?.shapes.remove(0))?,
            err(aggregate_median(&random_init(&exemplars, &s.bb, 5, 0)?.shapes)?)?,
            err(scheme1_3d_init(&pose, &s.bb, &shape3d)?)?,
            err(aggregate_median(&scheme2_knn_init(&pose, &s.bb, &exemplars, 5)?.shapes)?)?,
        );
    }
    Ok(())
}
