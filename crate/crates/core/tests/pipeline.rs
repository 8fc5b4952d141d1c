use std::collections::BTreeMap;
use std::path::Path;

use chickface::backbones::Backbone;
use chickface::classifier::{ClassifierConfig, FineTune};
use chickface::dataset::{assign_folds, ingest, read_labels_csv, CropKind, DatasetManifest, IngestOptions};
use chickface::detection::{ColorBlobDetector, DetectorConfig};
use chickface::evaluation::run_cross_validation;
use chickface::geometry::KeypointSet;
use chickface::keypoints::{train_keypoint_model, KeypointModelConfig};
use chickface::parallel::Execution;
use chickface::pipeline::*;
use chickface::synth::{generate, load_annotations, SynthConfig};

fn prepare(dir: &Path, cfg: &SynthConfig) -> (DatasetManifest, BTreeMap<String, KeypointSet>) {
    generate(cfg, dir).unwrap();
    let labels = read_labels_csv(&dir.join("labels.csv")).unwrap();
    let manifest = ingest(&dir.join("raw"), &labels, &dir.join("data"), &IngestOptions { accept_all: true }).unwrap();
    let kps = load_annotations(dir).unwrap().into_iter().map(|(k, v)| (k, v.1)).collect();
    (manifest, kps)
}

fn det_cfg() -> DetectorConfig {
    DetectorConfig { input_size: 160, ..Default::default() }
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

#[test]
fn synthetic_data_is_byte_identical_per_seed() {
    let (a, b, c) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let cfg = SynthConfig { ids: 6, frames_per_id: 2, seed: 7, ..Default::default() };
    generate(&cfg, a.path()).unwrap();
    generate(&cfg, b.path()).unwrap();
    generate(&SynthConfig { seed: 8, ..cfg.clone() }, c.path()).unwrap();
    let fa = files(a.path());
    assert_eq!(fa.len(), 6 * 2 + 6 * 2 * 3 + 2);
    assert_eq!(fa, files(b.path()));
    assert_ne!(fa, files(c.path()));
}

#[test]
fn every_synthetic_frame_survives_the_chain() {
    let dir = tempfile::tempdir().unwrap();
    let (manifest, kps) = prepare(dir.path(), &SynthConfig { ids: 12, frames_per_id: 1, seed: 3, ..Default::default() });
    let detector = ColorBlobDetector::default();
    let dcfg = det_cfg();
    let stages = Stages { detector: &detector, detector_cfg: &dcfg, keypoints: KeypointSource::Annotations(&kps), crop: CropParams::default(), middle: true };
    let seq = process_manifest(&manifest, &dir.path().join("data"), &stages, Execution::Sequential).unwrap();
    assert!(seq.skipped.is_empty(), "{:?}", seq.skipped);
    assert_eq!(seq.views.len(), 36);
    for v in &seq.views {
        let m = v.middle.as_ref().unwrap();
        let full_area = (v.full.width() * v.full.height()) as f64;
        assert!(m.middle_box.bbox.area() <= full_area);
        assert!(v.angle_deg.abs() <= 12.0 + 1e-9);
    }
    let par = process_manifest(&manifest, &dir.path().join("data"), &stages, Execution::Parallel).unwrap();
    for (a, b) in seq.views.iter().zip(&par.views) {
        assert_eq!(a.full.image, b.full.image);
        assert_eq!(a.middle.as_ref().unwrap().crop.image, b.middle.as_ref().unwrap().crop.image);
    }

    for kind in [CropKind::Full, CropKind::Middle] {
        let crops = write_crops(&manifest, &seq.views, kind, dir.path()).unwrap();
        let loaded = load_samples(&crops, dir.path(), Execution::Parallel).unwrap();
        let direct = classifier_samples(&manifest, &seq.views, kind).unwrap();
        assert_eq!(loaded.len(), direct.len());
        for (a, b) in loaded.iter().zip(&direct) {
            assert_eq!((&a.chick_id, &a.image_id, a.gender), (&b.chick_id, &b.image_id, b.gender));
            assert_eq!(a.image, b.image);
        }
    }
}

#[test]
fn learned_keypoints_drive_the_chain() {
    let dir = tempfile::tempdir().unwrap();
    let (manifest, kps) = prepare(dir.path(), &SynthConfig { ids: 24, frames_per_id: 1, seed: 4, ..Default::default() });
    let detector = ColorBlobDetector::default();
    let dcfg = det_cfg();
    let root = dir.path().join("data");
    let samples: Vec<_> = manifest
        .frames
        .iter()
        .map(|f| {
            let img = image::open(root.join(&f.image_ref)).unwrap().to_rgb8();
            let d = chickface::detection::detect_face(&img, &dcfg, &detector).unwrap().unwrap();
            keypoint_sample(&img, &d.bbox, &kps[&f.frame_id]).unwrap()
        })
        .collect();
    let kcfg = KeypointModelConfig { input_size: (64, 64), width: 16, lr: 3e-3, ..Default::default() };
    let (model, _) = train_keypoint_model(&samples, &kcfg, 30, 0, Execution::Parallel).unwrap();
    let stages = Stages { detector: &detector, detector_cfg: &dcfg, keypoints: KeypointSource::Model(&model), crop: CropParams::default(), middle: false };
    let out = process_manifest(&manifest, &root, &stages, Execution::Parallel).unwrap();
    assert!(out.views.len() >= 70, "only {} of 72 views processed", out.views.len());
    let mut err = Vec::new();
    for v in &out.views {
        let truth = &kps[&v.frame_id];
        for (name, k) in v.keypoints.iter() {
            err.push(k.point.distance(&truth.point(name)));
        }
    }
    let mean = err.iter().sum::<f64>() / err.len() as f64;
    assert!(mean < 3.0, "mean keypoint error {mean}");
}

#[test]
fn separable_synthetic_faces_classify_well() {
    for seed in 0..3 {
        let dir = tempfile::tempdir().unwrap();
        let (manifest, kps) = prepare(dir.path(), &SynthConfig { ids: 200, frames_per_id: 1, separability: 1.0, seed, ..Default::default() });
        let detector = ColorBlobDetector::default();
        let dcfg = det_cfg();
        let stages = Stages { detector: &detector, detector_cfg: &dcfg, keypoints: KeypointSource::Annotations(&kps), crop: CropParams::default(), middle: false };
        let out = process_manifest(&manifest, &dir.path().join("data"), &stages, Execution::Parallel).unwrap();
        let samples = classifier_samples(&manifest, &out.views, CropKind::Full).unwrap();
        let plan = assign_folds(&manifest.chicks, 5, seed).unwrap();
        let cfg = ClassifierConfig {
            backbone: Backbone::TinyTest,
            head_dims: [32, 16, 1],
            lr: 1e-2,
            epochs: 20,
            batch_size: 16,
            fine_tune: FineTune::HeadOnly,
            seed,
            ..Default::default()
        };
        let res = run_cross_validation(&samples, &plan, &cfg, CropKind::Full, Execution::Parallel).unwrap();
        assert!(res.report.averages.accuracy >= 0.95, "seed {seed}: {}", res.report.averages.accuracy);
    }
}
