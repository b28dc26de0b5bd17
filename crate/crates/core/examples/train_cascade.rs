//! Trains a short fern cascade and follows one test face from the mean
//! shape to the final estimate.
//!
//!     cargo run --release --example train_cascade

use poseinit::cascade::{from_normalized, train_cascade, CascadeConfig, CascadeSample};
use poseinit::data::{generate_synthetic, split, SynthConfig};
use poseinit::eval::normalized_error;
use poseinit::geometry::Shape3D;

fn main() -> poseinit::Result<()> {
    let cfg = SynthConfig {
        count: 300,
        ..SynthConfig::default()
    };
    let (train, test) = split(generate_synthetic(&cfg, &Shape3D::canonical())?, 0.8, 0)?;
    let triples: Vec<CascadeSample> = train
        .iter()
        .map(|s| CascadeSample { image: &s.image, bb: s.bb, shape: s.landmarks.as_ref().expect("landmarks") })
        .collect();
    let model = train_cascade(
        &triples,
        &CascadeConfig {
            stages: 30,
            augmentation: 10,
            ..CascadeConfig::default()
        },
    )?;
    for r in model.trace().iter().step_by(5) {
        println!("stage {:>3}: rms residual {:.4}", r.stage, r.rms_residual);
    }

    let s = &test[0];
    let gt = s.landmarks.as_ref().expect("landmarks");
    let init = from_normalized(&model.mean_shape().to_flat(), &s.bb)?;
    let path = model.trajectory(&s.image, &s.bb, &init)?;
    for t in [0, 1, 5, 10, 20, path.len() - 1] {
        println!("{}: after stage {t:>2}, error {:.4}", s.id, normalized_error(&path[t], gt)?);
    }
    Ok(())
}
