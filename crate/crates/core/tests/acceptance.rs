//! Acceptance suite. Each test prints one `PASS`/`FAIL` line for its
//! criterion (written straight to stderr so it shows without --nocapture).
//!
//! The learned criteria share one fixture: the full command-line pipeline
//! `synth-gen -> train-pose -> train-cascade -> compare` on the default
//! synthetic set (2000 train / 500 test).

use std::collections::{BTreeMap, HashMap};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use nalgebra::Point2;
use poseinit::cascade::{extract_features, from_normalized, CascadeModel, FeatureDef, Probe};
use poseinit::cli;
use poseinit::data::{load_dataset, Sample, MANIFEST_FILE};
use poseinit::eval::{top_error_pose_analysis, ComparisonReport, EvalReport, PosedError};
use poseinit::geometry::{project_weak_perspective, BoundingBox, HeadPose, Shape2D, Shape3D};
use poseinit::gray::GrayImage;
use poseinit::init::{aggregate_median, knn_indices, TrainExemplar};
use poseinit::pose_net::{layers, PoseNet, PoseNetArch};
use poseinit::pose_solver::fit_pose_from_landmarks;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::Value;

fn report(n: u32, name: &str, pass: bool, detail: &str) {
    let line = format!(
        "{} criterion {n:>2} ({name}): {detail}\n",
        if pass { "PASS" } else { "FAIL" }
    );
    let _ = std::io::stderr().write_all(line.as_bytes());
    assert!(pass, "criterion {n} failed: {detail}");
}

fn run_cli(args: &[&str]) {
    let mut argv = vec!["poseinit"];
    argv.extend_from_slice(args);
    let code = cli::run(argv.iter().copied());
    assert_eq!(code, 0, "poseinit {} exited with {code}", args.join(" "));
}

// ---------------------------------------------------------------- fixture

struct Fixture {
    _dir: tempfile::TempDir,
    test: Vec<Sample>,
    net: PoseNet,
    pose_train_time: Duration,
    cascade: CascadeModel,
    /// Schemes with the network's pose.
    net_compare: ComparisonReport,
    /// Schemes with the pose fitted to the ground truth.
    solver_compare: ComparisonReport,
}

fn read_comparison(path: &Path) -> ComparisonReport {
    let v: Value = serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap();
    serde_json::from_value(v["comparison"].clone()).unwrap()
}

fn fixture() -> &'static Fixture {
    static FIXTURE: OnceLock<Fixture> = OnceLock::new();
    FIXTURE.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let p = |s: &str| dir.path().join(s).to_str().unwrap().to_string();
        let (data, pose, casc) = (p("data"), p("pose"), p("cascade"));
        let (train_manifest, test_manifest) = (p("data/train/manifest.json"), p("data/test/manifest.json"));

        run_cli(&["synth-gen", "--seed", "0", "--out-dir", &data]);
        let t = Instant::now();
        run_cli(&["train-pose", "--seed", "0", "--train", &train_manifest, "--out-dir", &pose]);
        let pose_train_time = t.elapsed();
        run_cli(&["train-cascade", "--seed", "0", "--train", &train_manifest, "--out-dir", &casc]);

        let cascade_file = format!("{casc}/{}", cli::CASCADE_FILE);
        let net_file = format!("{pose}/{}", cli::POSE_NET_FILE);
        let schemes = "random:1,mean,random:5,3d,knn:1";
        let (net_out, solver_out) = (p("compare_net"), p("compare_solver"));
        run_cli(&[
            "compare", "--seed", "0", "--test", &test_manifest, "--cascade", &cascade_file, "--pose-net", &net_file,
            "--pose-source", "net", "--schemes", schemes, "--seeds", "0,1,2,3,4", "--out-dir", &net_out,
        ]);
        run_cli(&[
            "compare", "--seed", "0", "--test", &test_manifest, "--cascade", &cascade_file, "--pose-source", "solver",
            "--schemes", "mean,3d,knn:1", "--seeds", "0", "--out-dir", &solver_out,
        ]);

        Fixture {
            test: load_dataset(&test_manifest).unwrap().samples,
            net: PoseNet::load(&net_file).unwrap(),
            pose_train_time,
            cascade: CascadeModel::load(&cascade_file).unwrap(),
            net_compare: read_comparison(&Path::new(&net_out).join("compare.json")),
            solver_compare: read_comparison(&Path::new(&solver_out).join("compare.json")),
            _dir: dir,
        }
    })
}

fn find<'a>(c: &'a ComparisonReport, label: &str) -> &'a EvalReport {
    c.reports
        .iter()
        .find(|r| r.label == label)
        .unwrap_or_else(|| panic!("no report {label}"))
}

fn seeded<'a>(c: &'a ComparisonReport, scheme: &str) -> Vec<&'a EvalReport> {
    (0..5).map(|s| find(c, &format!("{scheme}#{s}"))).collect()
}

// ---------------------------------------------------------------- criteria

#[test]
fn criterion_01_pose_solver_exactness() {
    let shape3d = Shape3D::canonical();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let start = Instant::now();
    let (mut ok, mut worst) = (0, 0.0f64);
    for _ in 0..1000 {
        let pose = HeadPose::new(rng.gen_range(-80.0..80.0), rng.gen_range(-80.0..80.0), rng.gen_range(-80.0..80.0)).unwrap();
        let w = rng.gen_range(30.0..300.0);
        let bb = BoundingBox::new(rng.gen_range(-50.0..200.0), rng.gen_range(-50.0..200.0), w, w * rng.gen_range(0.8..1.3)).unwrap();
        let shape = project_weak_perspective(&shape3d, &pose, &bb).unwrap();
        let fit = fit_pose_from_landmarks(&shape, &shape3d).unwrap().pose;
        let err = (fit.pitch - pose.pitch).abs().max((fit.yaw - pose.yaw).abs()).max((fit.roll - pose.roll).abs());
        worst = worst.max(err);
        ok += usize::from(err <= 1e-5);
    }
    let elapsed = start.elapsed();
    report(
        1,
        "pose-solver exactness",
        ok == 1000 && elapsed < Duration::from_secs(10),
        &format!("{ok}/1000 within 1e-5 deg (worst {worst:.2e}), {:.2} s", elapsed.as_secs_f64()),
    );
}

#[test]
fn criterion_02_pose_net_learnability() {
    let f = fixture();
    let mut mae = [0.0; 3];
    for s in &f.test {
        let p = f.net.predict_pose(&s.image, &s.bb).unwrap().as_array();
        let g = s.pose.unwrap().as_array();
        for k in 0..3 {
            mae[k] += (p[k] - g[k]).abs() / f.test.len() as f64;
        }
    }
    let minutes = f.pose_train_time.as_secs_f64() / 60.0;
    report(
        2,
        "pose-net learnability",
        mae.iter().all(|&m| m <= 8.0) && minutes <= 30.0,
        &format!(
            "held-out MAE pitch {:.2}, yaw {:.2}, roll {:.2} deg (bar 8); training {minutes:.1} min (bar 30)",
            mae[0], mae[1], mae[2]
        ),
    );
}

const FD_STEP: f64 = 1e-4;
const FD_TOL: f64 = 1e-3;
const BATCH: usize = 3;

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Records one finite-difference comparison for a layer of the check.
#[derive(Default)]
struct GradLog {
    checked: usize,
    worst: f64,
    mismatches: Vec<String>,
}

impl GradLog {
    fn check(&mut self, what: &str, analytic: f64, mut loss: impl FnMut(f64) -> f64) {
        let fd = (loss(FD_STEP) - loss(-FD_STEP)) / (2.0 * FD_STEP);
        let e = rel_err(analytic, fd);
        self.checked += 1;
        self.worst = self.worst.max(e);
        if e >= FD_TOL {
            self.mismatches.push(what.to_string());
        }
    }
}

fn picks(len: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    if len <= 150 { (0..len).collect() } else { (0..150).map(|_| rng.gen_range(0..len)).collect() }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn naive_conv(g: &layers::ConvGeom, x: &[f64], w: &[f64], b: &[f64]) -> Vec<f64> {
    let (oh, ow) = (g.out_h(), g.out_w());
    let mut out = vec![0.0; g.c_out * oh * ow];
    for co in 0..g.c_out {
        for y in 0..oh {
            for xo in 0..ow {
                let mut acc = b[co];
                for ci in 0..g.c_in {
                    for ky in 0..g.k {
                        for kx in 0..g.k {
                            acc += w[((co * g.c_in + ci) * g.k + ky) * g.k + kx] * x[(ci * g.h + y + ky) * g.w + xo + kx];
                        }
                    }
                }
                out[(co * oh + y) * ow + xo] = acc;
            }
        }
    }
    out
}

fn conv_check(g: layers::ConvGeom, rng: &mut ChaCha8Rng, log: &mut GradLog, name: &str) {
    let n_in = g.c_in * g.h * g.w;
    let xs: Vec<Vec<f64>> = (0..BATCH).map(|_| (0..n_in).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
    let w: Vec<f64> = (0..g.c_out * g.patch_len()).map(|_| rng.gen_range(-0.3..0.3)).collect();
    let b: Vec<f64> = (0..g.c_out).map(|_| rng.gen_range(-0.1..0.1)).collect();
    let r: Vec<Vec<f64>> = (0..BATCH).map(|_| (0..g.c_out * g.out_pixels()).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
    let loss = |xs: &[Vec<f64>], w: &[f64], b: &[f64]| -> f64 { xs.iter().zip(&r).map(|(x, r)| dot(&naive_conv(&g, x, w, b), r)).sum() };

    let mut dw = vec![0.0; w.len()];
    let mut db = vec![0.0; b.len()];
    let mut dxs = Vec::new();
    for (x, r) in xs.iter().zip(&r) {
        let mut col = vec![0.0; g.patch_len() * g.out_pixels()];
        let mut out = vec![0.0; r.len()];
        layers::conv_forward(&g, x, &w, &b, &mut col, &mut out);
        let (mut dx, mut dcol) = (vec![0.0; n_in], vec![0.0; col.len()]);
        layers::conv_backward(&g, &col, &w, r, &mut dw, &mut db, Some((&mut dx, &mut dcol)));
        dxs.push(dx);
    }
    for i in picks(w.len(), rng) {
        log.check(&format!("{name}.weight[{i}]"), dw[i], |h| {
            let mut w2 = w.clone();
            w2[i] += h;
            loss(&xs, &w2, &b)
        });
    }
    for i in 0..b.len() {
        log.check(&format!("{name}.bias[{i}]"), db[i], |h| {
            let mut b2 = b.clone();
            b2[i] += h;
            loss(&xs, &w, &b2)
        });
    }
    for i in picks(n_in, rng) {
        let s = i % BATCH;
        log.check(&format!("{name}.input[{s}][{i}]"), dxs[s][i], |h| {
            let mut x2 = xs.clone();
            x2[s][i] += h;
            loss(&x2, &w, &b)
        });
    }
}

fn dense_check(n_in: usize, n_out: usize, rng: &mut ChaCha8Rng, log: &mut GradLog, name: &str) {
    let x: Vec<f64> = (0..BATCH * n_in).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let w: Vec<f64> = (0..n_out * n_in).map(|_| rng.gen_range(-0.3..0.3)).collect();
    let b: Vec<f64> = (0..n_out).map(|_| rng.gen_range(-0.1..0.1)).collect();
    let r: Vec<f64> = (0..BATCH * n_out).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let loss = |x: &[f64], w: &[f64], b: &[f64]| -> f64 {
        let mut acc = 0.0;
        for s in 0..BATCH {
            for o in 0..n_out {
                acc += r[s * n_out + o] * (b[o] + dot(&w[o * n_in..(o + 1) * n_in], &x[s * n_in..(s + 1) * n_in]));
            }
        }
        acc
    };
    let (mut dw, mut db, mut dx) = (vec![0.0; w.len()], vec![0.0; n_out], vec![0.0; x.len()]);
    let mut y = vec![0.0; BATCH * n_out];
    layers::dense_forward(BATCH, n_in, n_out, &x, &w, &b, &mut y);
    layers::dense_backward(BATCH, n_in, n_out, &x, &w, &r, &mut dw, &mut db, Some(&mut dx));
    for i in picks(w.len(), rng) {
        log.check(&format!("{name}.weight[{i}]"), dw[i], |h| {
            let mut w2 = w.clone();
            w2[i] += h;
            loss(&x, &w2, &b)
        });
    }
    for i in picks(n_out, rng) {
        log.check(&format!("{name}.bias[{i}]"), db[i], |h| {
            let mut b2 = b.clone();
            b2[i] += h;
            loss(&x, &w, &b2)
        });
    }
    for i in picks(x.len(), rng) {
        log.check(&format!("{name}.input[{i}]"), dx[i], |h| {
            let mut x2 = x.clone();
            x2[i] += h;
            loss(&x2, &w, &b)
        });
    }
}

/// ReLU then 2x2 max pooling on `c x hw x hw` maps. Inputs keep a margin
/// from the ReLU kink and from ties inside every pooling window, so the
/// finite-difference step never crosses a switch point.
fn relu_pool_check(c: usize, hw: usize, rng: &mut ChaCha8Rng, log: &mut GradLog, name: &str) {
    let n = c * hw * hw;
    let xs: Vec<Vec<f64>> = (0..BATCH)
        .map(|_| {
            let mut levels: Vec<f64> = (0..n).map(|i| (i as f64 - n as f64 / 3.0) * 0.01 + 0.005).collect();
            for i in (1..n).rev() {
                levels.swap(i, rng.gen_range(0..=i));
            }
            levels
        })
        .collect();
    let (oh, ow) = (hw / 2, hw / 2);
    let r: Vec<Vec<f64>> = (0..BATCH).map(|_| (0..c * oh * ow).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
    let naive = |x: &[f64]| -> Vec<f64> {
        let mut out = vec![0.0; c * oh * ow];
        for ch in 0..c {
            for y in 0..oh {
                for xo in 0..ow {
                    let m = [(0, 0), (0, 1), (1, 0), (1, 1)]
                        .iter()
                        .map(|(dy, dx)| x[(ch * hw + 2 * y + dy) * hw + 2 * xo + dx].max(0.0))
                        .fold(f64::NEG_INFINITY, f64::max);
                    out[(ch * oh + y) * ow + xo] = m;
                }
            }
        }
        out
    };
    let loss = |xs: &[Vec<f64>]| -> f64 { xs.iter().zip(&r).map(|(x, r)| dot(&naive(x), r)).sum() };
    let mut grads = Vec::new();
    for (x, r) in xs.iter().zip(&r) {
        let mut act = x.clone();
        layers::relu_forward(&mut act);
        let (mut pooled, mut argmax) = (vec![0.0; c * oh * ow], vec![0; c * oh * ow]);
        layers::maxpool_forward(c, hw, hw, &act, &mut pooled, &mut argmax);
        let mut d = vec![0.0; n];
        layers::maxpool_backward(&argmax, r, &mut d);
        layers::relu_backward(&act, &mut d);
        grads.push(d);
    }
    for i in picks(n, rng) {
        let s = i % BATCH;
        log.check(&format!("{name}.input[{s}][{i}]"), grads[s][i], |h| {
            let mut x2 = xs.clone();
            x2[s][i] += h;
            loss(&x2)
        });
    }
}

fn dropout_check(n: usize, rng: &mut ChaCha8Rng, log: &mut GradLog) {
    let x: Vec<f64> = (0..BATCH * n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let mask: Vec<f64> = (0..x.len()).map(|_| if rng.gen_bool(0.5) { 2.0 } else { 0.0 }).collect();
    let r: Vec<f64> = (0..x.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let loss = |x: &[f64]| -> f64 { x.iter().zip(&mask).zip(&r).map(|((v, m), r)| v * m * r).sum() };
    let mut d = r.clone();
    layers::apply_mask(&mut d, &mask);
    for i in picks(x.len(), rng) {
        log.check(&format!("dropout.input[{i}]"), d[i], |h| {
            let mut x2 = x.clone();
            x2[i] += h;
            loss(&x2)
        });
    }
}

#[test]
fn criterion_03_gradient_correctness() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let arch = PoseNetArch::default();
    let mut per_layer: Vec<(String, GradLog)> = Vec::new();

    // layer by layer, with the shapes of the default architecture
    let (mut c_in, mut hw) = (1, arch.input_size);
    for (l, spec) in arch.conv.iter().enumerate() {
        let g = layers::ConvGeom { c_in, h: hw, w: hw, c_out: spec.channels, k: spec.kernel };
        let mut log = GradLog::default();
        conv_check(g, &mut rng, &mut log, &format!("conv{l}"));
        per_layer.push((format!("conv{l}"), log));
        let mut log = GradLog::default();
        relu_pool_check(spec.channels, g.out_h(), &mut rng, &mut log, &format!("relu_pool{l}"));
        per_layer.push((format!("relu_pool{l}"), log));
        (c_in, hw) = (spec.channels, g.out_h() / 2);
    }
    let mut n_in = c_in * hw * hw;
    let dims: Vec<usize> = arch.hidden.iter().copied().chain([3]).collect();
    for (l, &n_out) in dims.iter().enumerate() {
        let mut log = GradLog::default();
        dense_check(n_in, n_out, &mut rng, &mut log, &format!("dense{l}"));
        per_layer.push((format!("dense{l}"), log));
        n_in = n_out;
    }
    let mut log = GradLog::default();
    dropout_check(arch.hidden[0], &mut rng, &mut log);
    per_layer.push(("dropout".into(), log));

    // the composed network, every parameter tensor. A step of 1e-4 on a
    // first-layer weight moves tens of thousands of pre-activations and
    // regularly crosses ReLU and pooling switch points, so the composed
    // check uses a step inside the smooth region.
    let net = PoseNet::initialized(arch, &mut rng).unwrap();
    let n = net.input_size() * net.input_size();
    let inputs: Vec<Vec<f64>> = (0..BATCH).map(|_| (0..n).map(|_| rng.gen::<f64>()).collect()).collect();
    let refs: Vec<&[f64]> = inputs.iter().map(|v| v.as_slice()).collect();
    let targets: Vec<[f64; 3]> = (0..BATCH).map(|_| [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)]).collect();
    let (_, grad) = net.loss_and_gradient(&refs, &targets, None);
    let h = 1e-6;
    let mut params = net.params().to_vec();
    let mut composed = GradLog::default();
    for (name, range) in net.tensors() {
        let chosen: Vec<usize> = if range.len() <= 64 { range.clone().collect() } else { (0..32).map(|_| rng.gen_range(range.clone())).collect() };
        for i in chosen {
            let orig = params[i];
            params[i] = orig + h;
            let lp = net.loss_at(&params, &refs, &targets);
            params[i] = orig - h;
            let lm = net.loss_at(&params, &refs, &targets);
            params[i] = orig;
            let e = rel_err(grad[i], (lp - lm) / (2.0 * h));
            composed.checked += 1;
            composed.worst = composed.worst.max(e);
            if e >= FD_TOL {
                composed.mismatches.push(format!("{name}[{i}]"));
            }
        }
    }
    per_layer.push(("network".into(), composed));

    let pass = per_layer.iter().all(|(_, l)| l.mismatches.is_empty());
    let summary: Vec<String> = per_layer
        .iter()
        .map(|(name, l)| format!("{name} {}/{} worst {:.1e}", l.checked - l.mismatches.len(), l.checked, l.worst))
        .collect();
    report(3, "gradient correctness", pass, &format!("bar 1e-3 relative; {}", summary.join(", ")));
}

#[test]
fn criterion_04_initialization_quality() {
    let f = fixture();
    let wide: Vec<&str> = f
        .test
        .iter()
        .filter(|s| s.pose.unwrap().yaw.abs() >= 30.0)
        .map(|s| s.id.as_str())
        .collect();
    let better = |c: &ComparisonReport, label: &str| {
        let mean: HashMap<&str, f64> = find(c, "mean#0").records.iter().map(|r| (r.id.as_str(), r.init_error)).collect();
        let s1: HashMap<&str, f64> = find(c, label).records.iter().map(|r| (r.id.as_str(), r.init_error)).collect();
        let wins = wide.iter().filter(|id| s1[*id] < mean[*id]).count();
        wins as f64 / wide.len() as f64
    };
    let solver = better(&f.solver_compare, "3d@solver");
    let net = better(&f.net_compare, "3d@net");
    report(
        4,
        "initialization quality",
        solver >= 0.90 && net >= 0.75,
        &format!(
            "{} samples with |yaw| >= 30: scheme 1 beats mean init on {:.1}% with fitted pose (bar 90%), {:.1}% with network pose (bar 75%)",
            wide.len(),
            100.0 * solver,
            100.0 * net
        ),
    );
}

#[test]
fn criterion_05_failure_reduction() {
    let f = fixture();
    let c = &f.net_compare;
    let random: usize = seeded(c, "random:1").iter().map(|r| r.failures).sum();
    // the pose-driven schemes draw nothing at random: the same count recurs for every seed
    let s1 = 5 * find(c, "3d@net").failures;
    let s2 = 5 * find(c, "knn:1@net").failures;
    let reduction = |x: usize| if random > 0 { 1.0 - x as f64 / random as f64 } else { f64::NAN };
    report(
        5,
        "failure reduction",
        random > 0 && reduction(s1) >= 0.30 && reduction(s2) >= 0.30,
        &format!(
            "failures over 5 seeds: random:1 {random}, scheme 1 {s1} ({:.0}% fewer), scheme 2 {s2} ({:.0}% fewer); bar 30%",
            100.0 * reduction(s1),
            100.0 * reduction(s2)
        ),
    );
}

#[test]
fn criterion_06_one_vs_five() {
    let f = fixture();
    let c = &f.net_compare;
    let five: f64 = seeded(c, "random:5").iter().map(|r| r.mean_error).sum::<f64>() / 5.0;
    let one = find(c, "3d@net").mean_error;
    report(
        6,
        "one scheme-1 init vs five random",
        one <= 1.05 * five,
        &format!("mean error scheme 1 {one:.5} vs random:5 median {five:.5} (ratio {:.3}, bar 1.05)", one / five),
    );
}

#[test]
fn criterion_07_coarse_to_fine() {
    let f = fixture();
    let runs = seeded(&f.net_compare, "random:1");
    let ratios: Vec<f64> = runs.iter().map(|r| r.mean_error / r.mean_init_error).collect();
    let trace = f.cascade.trace();
    let monotone = trace.windows(2).all(|w| w[1].rms_residual <= w[0].rms_residual);

    // held-out error after the last stage below the error after the first
    let mean = f.cascade.mean_shape().to_flat();
    let (mut first, mut last) = (0.0, 0.0);
    for s in &f.test {
        let init = from_normalized(&mean, &s.bb).unwrap();
        let path = f.cascade.trajectory(&s.image, &s.bb, &init).unwrap();
        let gt = s.landmarks.as_ref().unwrap();
        first += poseinit::eval::normalized_error(&path[1], gt).unwrap();
        last += poseinit::eval::normalized_error(path.last().unwrap(), gt).unwrap();
    }
    report(
        7,
        "cascade coarse-to-fine",
        ratios.iter().all(|&r| r <= 0.5) && monotone && last < first,
        &format!(
            "final/initial error per seed {:?} (bar 0.5); training rms trace non-increasing over {} stages: {monotone}; held-out error stage 1 {:.4} -> stage T {:.4}",
            ratios.iter().map(|r| format!("{r:.3}")).collect::<Vec<_>>(),
            trace.len() - 1,
            first / f.test.len() as f64,
            last / f.test.len() as f64
        ),
    );
}

#[test]
fn criterion_08_oracle_equivalences() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);

    // k-NN against a brute-force scan; coarse pose lattice to force ties
    let shape = Shape2D::from_flat(&[0.0, 0.0, 1.0, 0.0, 0.0, 1.0]).unwrap();
    let exemplars: Vec<TrainExemplar> = (0..300)
        .map(|i| TrainExemplar {
            id: format!("e{:03}", (i * 7) % 300),
            shape: shape.clone(),
            bb: BoundingBox::new(0.0, 0.0, 1.0, 1.0).unwrap(),
            pose: HeadPose::new(
                rng.gen_range(-6..=6) as f64 * 5.0,
                rng.gen_range(-6..=6) as f64 * 10.0,
                rng.gen_range(-6..=6) as f64 * 5.0,
            )
            .unwrap(),
        })
        .collect();
    let mut knn_ok = 0;
    for _ in 0..10_000 {
        let q = HeadPose::new(
            rng.gen_range(-6..=6) as f64 * 5.0,
            rng.gen_range(-60.0..60.0),
            rng.gen_range(-6..=6) as f64 * 5.0,
        )
        .unwrap();
        let k = rng.gen_range(1..=12);
        let mut brute: Vec<(f64, &str, usize)> = exemplars
            .iter()
            .enumerate()
            .map(|(i, e)| {
                // squared distance: the square root can merge distinct distances into false ties
                let d = (e.pose.pitch - q.pitch).powi(2) + (e.pose.yaw - q.yaw).powi(2) + (e.pose.roll - q.roll).powi(2);
                (d, e.id.as_str(), i)
            })
            .collect();
        brute.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(b.1)).then(a.2.cmp(&b.2)));
        let expected: Vec<usize> = brute[..k].iter().map(|b| b.2).collect();
        knn_ok += usize::from(knn_indices(&q, &exemplars, k, &[1.0, 1.0, 1.0]).unwrap() == expected);
    }

    // median aggregation against per-coordinate sorting
    let mut median_ok = 0;
    for _ in 0..1000 {
        let n = rng.gen_range(1..=9);
        let shapes: Vec<Shape2D> = (0..n)
            .map(|_| Shape2D::from_flat(&(0..10).map(|_| rng.gen_range(-5.0..5.0)).collect::<Vec<_>>()).unwrap())
            .collect();
        let expected: Vec<f64> = (0..10)
            .map(|j| {
                let mut col: Vec<f64> = shapes.iter().map(|s| s.to_flat()[j]).collect();
                col.sort_by(|a, b| a.partial_cmp(b).unwrap());
                if n % 2 == 1 { col[n / 2] } else { 0.5 * (col[n / 2 - 1] + col[n / 2]) }
            })
            .collect();
        median_ok += usize::from(aggregate_median(&shapes).unwrap().to_flat() == expected);
    }

    // feature extraction against a naive probe evaluation
    let img = GrayImage::from_fn(64, 48, |_, _| rng.gen::<f64>()).unwrap();
    let mut worst = 0.0f64;
    for _ in 0..200 {
        let pts: Vec<Point2<f64>> = (0..6).map(|_| Point2::new(rng.gen_range(-10.0..74.0), rng.gen_range(-10.0..58.0))).collect();
        let shape = Shape2D::new(pts).unwrap();
        let bb = BoundingBox::new(rng.gen_range(0.0..20.0), rng.gen_range(0.0..20.0), rng.gen_range(10.0..40.0), 30.0).unwrap();
        let mut probe = || {
            let r = rng.gen_range(0.0..0.25f64);
            let th = rng.gen_range(0.0..std::f64::consts::TAU);
            Probe { a: rng.gen_range(0..6), b: rng.gen_range(0..6), alpha: rng.gen(), offset: [r * th.cos(), r * th.sin()] }
        };
        let defs: Vec<FeatureDef> = (0..20).map(|_| FeatureDef { probes: [probe(), probe()] }).collect();
        let got = extract_features(&img, &shape, &bb, &defs).unwrap();
        for (v, d) in got.iter().zip(&defs) {
            let naive = |p: &Probe| {
                let (a, b) = (shape.point(p.a), shape.point(p.b));
                let x = p.alpha * a.x + (1.0 - p.alpha) * b.x + p.offset[0] * bb.w;
                let y = p.alpha * a.y + (1.0 - p.alpha) * b.y + p.offset[1] * bb.w;
                bilinear_clamped(&img, x, y)
            };
            worst = worst.max((v - (naive(&d.probes[0]) - naive(&d.probes[1]))).abs());
        }
    }
    report(
        8,
        "oracle equivalences",
        knn_ok == 10_000 && median_ok == 1000 && worst <= 1e-9,
        &format!("k-NN {knn_ok}/10000 exact; median {median_ok}/1000 exact; features worst |diff| {worst:.1e} (bar 1e-9)"),
    );
}

/// Pixel `(i, j)` covers `[i, i+1) x [j, j+1)`; its value sits at the center.
fn bilinear_clamped(img: &GrayImage, x: f64, y: f64) -> f64 {
    let (w, h) = (img.width() as f64, img.height() as f64);
    let u = (x - 0.5).clamp(0.0, w - 1.0);
    let v = (y - 0.5).clamp(0.0, h - 1.0);
    let (x0, y0) = (u.floor(), v.floor());
    let (x1, y1) = ((x0 + 1.0).min(w - 1.0), (y0 + 1.0).min(h - 1.0));
    let (fx, fy) = (u - x0, v - y0);
    let g = |a: f64, b: f64| img.get(a as usize, b as usize);
    (1.0 - fy) * ((1.0 - fx) * g(x0, y0) + fx * g(x1, y0)) + fy * ((1.0 - fx) * g(x0, y1) + fx * g(x1, y1))
}

fn tree(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.insert(path.strip_prefix(dir).unwrap().to_path_buf(), std::fs::read(&path).unwrap());
            }
        }
    }
    out
}

#[test]
fn criterion_09_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let s = |p: &Path| p.to_str().unwrap().to_string();
    let data = root.join("data");
    run_cli(&["synth-gen", "--seed", "4", "--count", "60", "--out-dir", &s(&data)]);
    let train = s(&data.join("train").join(MANIFEST_FILE));
    let test = s(&data.join("test").join(MANIFEST_FILE));
    let first_pose = root.join("pose_a");
    let first_casc = root.join("cascade_a");

    type Cmd = Box<dyn Fn(&Path) -> Vec<String>>;
    let net = s(&first_pose.join(cli::POSE_NET_FILE));
    let casc = s(&first_casc.join(cli::CASCADE_FILE));
    let owned = |v: &[&str]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>();
    let commands: Vec<(&str, Cmd)> = vec![
        ("synth-gen", Box::new(move |_| owned(&["synth-gen", "--seed", "4", "--count", "60"]))),
        ("annotate-pose", { let t = train.clone(); Box::new(move |_| owned(&["annotate-pose", "--manifest", &t])) }),
        ("train-pose", { let t = train.clone(); Box::new(move |_| owned(&["train-pose", "--seed", "4", "--train", &t, "--max-epochs", "2", "--batch-size", "8"])) }),
        ("train-cascade", { let t = train.clone(); Box::new(move |_| owned(&["train-cascade", "--seed", "4", "--train", &t, "--stages", "6", "--augmentation", "4"])) }),
        ("align", { let (t, n, c) = (test.clone(), net.clone(), casc.clone()); Box::new(move |_| owned(&["align", "--seed", "4", "--manifest", &t, "--cascade", &c, "--pose-net", &n, "--scheme", "random:3"])) }),
        ("evaluate", { let (t, n, c) = (test.clone(), net.clone(), casc.clone()); Box::new(move |_| owned(&["evaluate", "--seed", "4", "--test", &t, "--cascade", &c, "--pose-net", &n, "--scheme", "knn:3"])) }),
        ("compare", { let (t, n, c) = (test.clone(), net.clone(), casc.clone()); Box::new(move |_| owned(&["compare", "--seed", "4", "--test", &t, "--cascade", &c, "--pose-net", &n, "--seeds", "0,1"])) }),
    ];

    let mut identical = Vec::new();
    let mut differing = Vec::new();
    for (name, cmd) in &commands {
        let outs: Vec<PathBuf> = match *name {
            "train-pose" => vec![first_pose.clone(), root.join("pose_b")],
            "train-cascade" => vec![first_casc.clone(), root.join("cascade_b")],
            _ => vec![root.join(format!("{name}_a")), root.join(format!("{name}_b"))],
        };
        for out in &outs {
            let mut args = cmd(out);
            args.extend(["--out-dir".to_string(), s(out)]);
            run_cli(&args.iter().map(String::as_str).collect::<Vec<_>>());
        }
        let (a, b) = (tree(&outs[0]), tree(&outs[1]));
        if !a.is_empty() && a == b {
            identical.push(*name);
        } else {
            differing.push(*name);
        }
    }
    report(
        9,
        "determinism",
        differing.is_empty(),
        &format!("byte-identical reruns: {identical:?}; differing: {differing:?}"),
    );
}

#[test]
fn criterion_10_top_error_analysis() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut results = Vec::new();
    let mut planted = 0;
    for i in 0..2000 {
        let pose = HeadPose::new(rng.gen_range(-30.0..30.0), rng.gen_range(-60.0..60.0), rng.gen_range(-30.0..30.0)).unwrap();
        let fail = pose.yaw.abs() >= 45.0 && rng.gen_bool(0.5);
        planted += usize::from(fail);
        let error = if fail { rng.gen_range(0.1..0.5) } else { rng.gen_range(0.0..0.1) };
        results.push(PosedError { id: format!("s{i:04}"), error, pose });
    }
    let analysis = top_error_pose_analysis(&results, planted).unwrap();
    let high: usize = analysis.histogram.iter().filter(|b| b.lo >= 45.0).map(|b| b.count).sum();
    let share = high as f64 / planted as f64;
    report(
        10,
        "top-error analysis",
        share >= 0.95,
        &format!("{high}/{planted} selected samples in buckets >= 45 deg ({:.1}%, bar 95%)", 100.0 * share),
    );
}
