#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use chickface::dataset::{ingest, read_labels_csv, DatasetManifest, IngestOptions};
use chickface::detection::{ColorBlobDetector, DetectorConfig};
use chickface::geometry::{BoundingBox, KeypointName, KeypointSet, Point2};
use chickface::keypoints::{KeypointModel, KeypointModelConfig};
use chickface::synth::{generate, load_annotations, SynthConfig};
use chickface_annotate::service::AdvanceConfig;
use chickface_annotate::{ManualAnnotation, Service};
use rusqlite::Connection;

pub struct Fixture {
    pub dir: tempfile::TempDir,
    pub manifest: DatasetManifest,
    pub truth: BTreeMap<String, (BoundingBox, KeypointSet)>,
}

impl Fixture {
    pub fn new(ids: usize, seed: u64) -> Fixture {
        let dir = tempfile::tempdir().unwrap();
        generate(&SynthConfig { ids, frames_per_id: 1, seed, ..Default::default() }, dir.path()).unwrap();
        let labels = read_labels_csv(&dir.path().join("labels.csv")).unwrap();
        let manifest = ingest(&dir.path().join("raw"), &labels, &dir.path().join("data"), &IngestOptions { accept_all: true }).unwrap();
        let truth = load_annotations(dir.path()).unwrap();
        Fixture { dir, manifest, truth }
    }

    pub fn data(&self) -> PathBuf {
        self.dir.path().join("data")
    }

    pub fn frame_ids(&self) -> Vec<String> {
        self.manifest.frames.iter().map(|f| f.frame_id.clone()).collect()
    }

    pub fn seed(&self, frame_id: &str) -> ManualAnnotation {
        let (bbox, keypoints) = self.truth[frame_id];
        ManualAnnotation { frame_id: frame_id.to_string(), bbox, keypoints }
    }

    pub fn service(&self) -> Service {
        let svc = Service::with_connection(Connection::open_in_memory().unwrap(), Arc::new(|| 1_700_000_000_000)).unwrap();
        svc.import_manifest(&self.manifest, &self.data()).unwrap();
        svc
    }

    pub fn advance_config(&self, models: &Path) -> AdvanceConfig {
        AdvanceConfig { keypoints: small_keypoints(), epochs: 2, seed: 5, detector_ref: "blob".into(), models_dir: models.to_path_buf() }
    }
}

pub fn small_keypoints() -> KeypointModelConfig {
    KeypointModelConfig { input_size: (32, 32), width: 4, batch_size: 4, ..Default::default() }
}

pub fn untrained_keypoints() -> KeypointModel {
    KeypointModel::init(small_keypoints(), 1).unwrap()
}

pub fn detector_cfg() -> DetectorConfig {
    DetectorConfig { input_size: 160, ..Default::default() }
}

pub fn detector() -> ColorBlobDetector {
    ColorBlobDetector::default()
}

/// Moves the nose centre one pixel to the right.
pub fn nudge(kps: &KeypointSet) -> KeypointSet {
    let mut out = *kps;
    let p = out.point(KeypointName::MiddleNose);
    let v = out.get(KeypointName::MiddleNose).visible;
    out.set(KeypointName::MiddleNose, Point2::new(p.x + 1.0, p.y), v);
    out
}
