//! Renders a small synthetic dataset, splits it by yaw, and writes both
//! halves as manifest datasets.
//!
//!     cargo run --example synth_dataset -- [out_dir]

use poseinit::data::{generate_synthetic, save_dataset, split, SynthConfig};
use poseinit::geometry::Shape3D;

fn main() -> poseinit::Result<()> {
    let out = std::env::args().nth(1).unwrap_or_else(|| "synth_out".into());
    let cfg = SynthConfig {
        count: 200,
        seed: 7,
        ..SynthConfig::default()
    };
    let samples = generate_synthetic(&cfg, &Shape3D::canonical())?;
    let (train, test) = split(samples, 0.8, cfg.seed)?;
    let config = serde_json::to_value(&cfg)?;
    for (name, set) in [("train", &train), ("test", &test)] {
        let manifest = save_dataset(format!("{out}/{name}"), set, &config)?;
        let yaws: Vec<f64> = set.iter().filter_map(|s| s.pose.map(|p| p.yaw)).collect();
        let (lo, hi) = yaws.iter().fold((f64::MAX, f64::MIN), |(l, h), &y| (l.min(y), h.max(y)));
        println!("{name}: {} samples, yaw {lo:.1}..{hi:.1}, manifest {}", set.len(), manifest.display());
    }
    Ok(())
}
