use std::collections::BTreeMap;
use std::path::Path;
use std::process::{Command, Output};

use chickface::cropping::{eye_extremes, FaceCrop, DEFAULT_MASK_RADIUS_FACTOR};
use chickface::dataset::DatasetManifest;

const SUBCOMMANDS: [&str; 12] = [
    "ingest",
    "split-views",
    "serve-annotations",
    "train-keypoints",
    "detect",
    "align",
    "crop",
    "train-classifier",
    "evaluate",
    "explain",
    "report",
    "synth-data",
];

fn chickface(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_chickface")).args(args).env_remove("PIPELINE_CONFIG").output().unwrap()
}

fn ok(out: Output) -> String {
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn files(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(dir).unwrap().display().to_string(), std::fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn error_kind(out: &Output) -> String {
    let line = String::from_utf8_lossy(&out.stderr).lines().last().unwrap_or_default().to_string();
    let v: serde_json::Value = serde_json::from_str(&line).unwrap_or_else(|_| panic!("not JSON: {line}"));
    v["error"]["kind"].as_str().unwrap().to_string()
}

#[test]
fn help_lists_every_subcommand() {
    let help = ok(chickface(&["--help"]));
    for s in SUBCOMMANDS {
        assert!(help.contains(s), "{s}");
        ok(chickface(&[s, "--help"]));
    }
    assert!(ok(chickface(&["evaluate", "--help"])).contains("--k"));
}

#[test]
fn usage_errors_exit_with_2() {
    let out = chickface(&["evaluate", "--no-such-flag"]);
    assert_eq!(out.status.code(), Some(2));
    let out = chickface(&["crop", "--kind", "sideways"]);
    assert_eq!(out.status.code(), Some(2));

    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, r#"{"folds": 1}"#).unwrap();
    let out = chickface(&["--config", bad.to_str().unwrap(), "report"]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(error_kind(&out), "usage");

    // the environment variable is the fallback
    let out = Command::new(env!("CARGO_BIN_EXE_chickface")).arg("report").env("PIPELINE_CONFIG", &bad).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("folds"));

    // missing inputs are reported before any work
    let out = chickface(&["--output-root", dir.path().to_str().unwrap(), "detect"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn stage_failures_exit_with_1() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("manifest.json"), "{ not json").unwrap();
    let out = chickface(&["--output-root", dir.path().to_str().unwrap(), "detect"]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(error_kind(&out), "stage");
}

#[test]
fn synth_data_is_replayable() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    for d in [&a, &b] {
        ok(chickface(&["--seed", "7", "synth-data", "--ids", "40", "--out", d.path().to_str().unwrap()]));
    }
    let fa = files(a.path());
    assert_eq!(fa.len(), 40 + 40 * 3 + 2);
    assert_eq!(fa, files(b.path()));
}

#[test]
fn zero_margin_middle_crop_spans_the_eyes() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().to_str().unwrap();
    let base = ["--data-root", root, "--output-root", root, "--seed", "3"];
    let run = |extra: &[&str]| ok(chickface(&[&base[..], extra].concat()));
    run(&["synth-data", "--ids", "6"]);
    run(&["ingest", "--accept-all"]);
    run(&["detect", "--input-size", "160"]);
    run(&["align", "--annotations", &format!("{root}/annotations")]);
    run(&["crop", "--kind", "full"]);
    run(&["crop", "--kind", "middle", "--margin-scale", "0"]);

    let middle = DatasetManifest::load(&dir.path().join("crops_middle.json")).unwrap();
    assert_eq!(middle.frames.len(), 18);
    for f in &middle.frames {
        let full = FaceCrop::load(&dir.path().join("crops/full").join(format!("{}.png", f.frame_id))).unwrap();
        let m = FaceCrop::load(&dir.path().join(&f.image_ref)).unwrap();
        let ext = eye_extremes(&full, DEFAULT_MASK_RADIUS_FACTOR).unwrap();
        // source boxes are in aligned-frame coordinates
        let x0 = m.source_box.x - full.source_box.x;
        assert_eq!(x0, ext.left_x as f64, "{}", f.frame_id);
        assert_eq!(x0 + m.source_box.w, ext.right_x as f64, "{}", f.frame_id);
    }
}
