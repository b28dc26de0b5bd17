//! End to end: synthetic data, pose network, cascade, then a paired
//! comparison of initialization schemes written as JSON, CSV and SVG.
//!
//!     cargo run --release --example compare_schemes -- [out_dir]

use poseinit::cascade::{train_cascade, CascadeConfig, CascadeSample};
use poseinit::data::{generate_synthetic, split, SynthConfig};
use poseinit::eval::{compare_schemes, write_comparison, EvalSample, Pipeline, PoseSource, SchemeSpec};
use poseinit::geometry::Shape3D;
use poseinit::init::TrainExemplar;
use poseinit::pose_net::{train, PoseSample, TrainConfig};
use serde_json::json;

fn main() -> poseinit::Result<()> {
    let out = std::env::args().nth(1).unwrap_or_else(|| "compare_out".into());
    let shape3d = Shape3D::canonical();
    let synth = SynthConfig {
        count: 500,
        ..SynthConfig::default()
    };
    let (train_set, test) = split(generate_synthetic(&synth, &shape3d)?, 0.8, 0)?;

    let pose_samples: Vec<PoseSample> = train_set
        .iter()
        .map(|s| PoseSample { image: &s.image, bb: s.bb, pose: s.pose.expect("pose") })
        .collect();
    let pose_cfg = TrainConfig {
        max_epochs: 6,
        ..TrainConfig::default()
    };
    let net = train(&pose_samples, &pose_cfg)?.net;

    let triples: Vec<CascadeSample> = train_set
        .iter()
        .map(|s| CascadeSample { image: &s.image, bb: s.bb, shape: s.landmarks.as_ref().expect("landmarks") })
        .collect();
    let cascade_cfg = CascadeConfig {
        stages: 40,
        ..CascadeConfig::default()
    };
    let cascade = train_cascade(&triples, &cascade_cfg)?;

    let exemplars = train_set.iter().map(TrainExemplar::from_sample).collect::<poseinit::Result<Vec<_>>>()?;
    let pipeline = Pipeline { cascade: &cascade, pose_net: Some(&net), exemplars: &exemplars, shape3d: &shape3d };
    let specs: Vec<SchemeSpec> = ["random:1", "mean", "random:5", "3d", "knn:1"]
        .iter()
        .map(|s| SchemeSpec { scheme: s.parse().expect("scheme"), pose_source: PoseSource::Net, seed: 0 })
        .collect();
    let report = compare_schemes(&pipeline, &EvalSample::from_samples(&test), &specs, 0.1);

    println!("{:>14} {:>10} {:>9}  vs {}", "scheme", "mean err", "failures", report.deltas[0].baseline);
    for (r, d) in report.reports.iter().zip(&report.deltas) {
        println!("{:>14} {:>10.4} {:>9}  delta {:+.4}, wins {}/{}", r.label, r.mean_error, r.failures, d.mean_delta, d.wins, d.paired);
    }
    let config = json!({ "synth": synth, "pose_net": pose_cfg, "cascade": cascade_cfg });
    for path in write_comparison(out.as_ref(), "compare", &report, &config)? {
        println!("wrote {}", path.display());
    }
    Ok(())
}
