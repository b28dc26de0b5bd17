//! The `poseinit` binary as a process: exit codes, error lines, outputs.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use poseinit::data::{load_pts, read_manifest, MANIFEST_FILE};

fn poseinit(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_poseinit")).args(args).output().unwrap()
}

fn ok(args: &[&str]) {
    let out = poseinit(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
}

fn error_line(out: &Output) -> serde_json::Value {
    let stderr = String::from_utf8(out.stderr.clone()).unwrap();
    let lines: Vec<&str> = stderr.lines().collect();
    assert_eq!(lines.len(), 1, "expected one error line, got {stderr:?}");
    serde_json::from_str(lines[0]).unwrap()
}

fn snapshot(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.insert(path.clone(), std::fs::read(&path).unwrap());
            }
        }
    }
    out
}

#[test]
fn usage_errors_exit_2_with_one_json_line() {
    for args in [
        vec!["frobnicate"],
        vec!["synth-gen", "--count", "many"],
        vec!["align", "--scheme", "sideways", "--image", "x.png", "--bbox", "0,0,10,10"],
    ] {
        let out = poseinit(&args);
        assert_eq!(out.status.code(), Some(2), "{args:?}");
        let v = error_line(&out);
        assert_eq!(v["exit"], 2);
        assert!(v["message"].is_string());
    }
}

#[test]
fn missing_input_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nothing").join(MANIFEST_FILE);
    let out = poseinit(&["train-pose", "--train", missing.to_str().unwrap(), "--out-dir", dir.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(3));
    assert_eq!(error_line(&out)["exit"], 3);
}

#[test]
fn align_single_image_writes_pts() {
    let dir = tempfile::tempdir().unwrap();
    let d = |s: &str| dir.path().join(s).to_str().unwrap().to_string();
    ok(&["synth-gen", "--seed", "2", "--count", "40", "--out-dir", &d("data")]);
    let train = d("data/train/manifest.json");
    let before = snapshot(&dir.path().join("data"));

    ok(&["annotate-pose", "--manifest", &train, "--out-dir", &d("annotated")]);
    ok(&["train-pose", "--train", &train, "--max-epochs", "1", "--batch-size", "8", "--out-dir", &d("pose")]);
    ok(&["train-cascade", "--train", &train, "--stages", "4", "--augmentation", "3", "--out-dir", &d("cascade")]);

    let test = read_manifest(d("data/test/manifest.json")).unwrap();
    let rec = &test.samples[0];
    let image = dir.path().join("data/test").join(&rec.image);
    let bb = rec.bbox.unwrap();
    let bbox = format!("{},{},{},{}", bb.x, bb.y, bb.w, bb.h);
    ok(&[
        "align",
        "--image",
        image.to_str().unwrap(),
        "--bbox",
        &bbox,
        "--scheme",
        "3d",
        "--cascade",
        &d("cascade/cascade.bin"),
        "--pose-net",
        &d("pose/pose_net.bin"),
        "--out-dir",
        &d("aligned"),
    ]);

    let listing: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("aligned/align.json")).unwrap()).unwrap();
    let pts = listing["outputs"][0]["pts"].as_str().unwrap();
    let shape = load_pts(dir.path().join("aligned").join(pts)).unwrap();
    assert_eq!(shape.len(), 68);
    assert!(shape.to_flat().iter().all(|v| v.is_finite()));

    // nothing above touched the generated data
    assert_eq!(snapshot(&dir.path().join("data")), before);
}
