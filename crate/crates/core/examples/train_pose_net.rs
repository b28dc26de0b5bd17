//! Trains the pose network on synthetic renders and reports the held-out
//! mean absolute error per angle.
//!
//!     cargo run --release --example train_pose_net -- [epochs]

use poseinit::data::{generate_synthetic, split, SynthConfig};
use poseinit::geometry::Shape3D;
use poseinit::pose_net::{train, PoseSample, TrainConfig};

fn main() -> poseinit::Result<()> {
    let epochs = std::env::args().nth(1).map_or(5, |s| s.parse().expect("epochs"));
    let cfg = SynthConfig {
        count: 600,
        ..SynthConfig::default()
    };
    let (train_set, test) = split(generate_synthetic(&cfg, &Shape3D::canonical())?, 0.8, 0)?;
    let samples: Vec<PoseSample> = train_set
        .iter()
        .map(|s| PoseSample { image: &s.image, bb: s.bb, pose: s.pose.expect("synthetic pose") })
        .collect();
    let trained = train(
        &samples,
        &TrainConfig {
            max_epochs: epochs,
            ..TrainConfig::default()
        },
    )?;
    println!("epoch  train_rmse  val_rmse");
    for e in &trained.history.epochs {
        println!("{:>5}  {:>10.2}  {:>8.2}", e.epoch, e.train_rmse_deg, e.val_rmse_deg);
    }
    let mut mae = [0.0; 3];
    for s in &test {
        let p = trained.net.predict_pose(&s.image, &s.bb)?.as_array();
        let g = s.pose.expect("synthetic pose").as_array();
        for k in 0..3 {
            mae[k] += (p[k] - g[k]).abs() / test.len() as f64;
        }
    }
    println!("held-out MAE (deg): pitch {:.2}, yaw {:.2}, roll {:.2}", mae[0], mae[1], mae[2]);
    Ok(())
}
