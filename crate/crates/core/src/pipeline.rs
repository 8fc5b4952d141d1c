//! Per-view chain from a raw view image to face crops: detect, locate
//! keypoints inside the detected box, align on the eye line, cut the full and
//! middle faces. Frames that fail a stage are skipped and reported.

use std::collections::BTreeMap;
use std::path::Path;

use image::RgbImage;
use serde::{Deserialize, Serialize};

use crate::classifier::ClassifierSample;
use crate::cropping::{crop_full_face, crop_middle_face, FaceCrop, MiddleCrop, DEFAULT_MARGIN_SCALE, DEFAULT_MASK_RADIUS_FACTOR};
use crate::dataset::{CropKind, DatasetManifest, FrameRecord, ManifestCrop, Quality};
use crate::detection::{detect_face, Detection, DetectorConfig, FaceDetector};
use crate::geometry::{align_face, pose_gate, BoundingBox, KeypointSet, PoseDecision};
use crate::keypoints::{predict_keypoints, HeatmapModel, KeypointSample};
use crate::parallel::Execution;
use crate::raster;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CropParams {
    pub margin_scale: f64,
    pub mask_radius_factor: f64,
}

impl Default for CropParams {
    fn default() -> Self {
        CropParams { margin_scale: DEFAULT_MARGIN_SCALE, mask_radius_factor: DEFAULT_MASK_RADIUS_FACTOR }
    }
}

/// Where keypoints come from.
#[derive(Clone, Copy)]
pub enum KeypointSource<'a> {
    Model(&'a dyn HeatmapModel),
    /// Frame-coordinate annotations keyed by frame id.
    Annotations(&'a BTreeMap<String, KeypointSet>),
}

/// The integral pixel region of `bbox` and its top-left corner.
pub fn face_region(image: &RgbImage, bbox: &BoundingBox) -> Result<(RgbImage, (u32, u32))> {
    let (x0, y0, w, h) = bbox
        .rasterize(image.width(), image.height())
        .ok_or_else(|| Error::FlaggedFrame("face box has no pixels inside the image".into()))?;
    Ok((raster::crop(image, x0, y0, w, h), (x0, y0)))
}

/// Runs the keypoint model on the detected face and maps the result back to
/// frame coordinates.
pub fn locate_keypoints(image: &RgbImage, bbox: &BoundingBox, model: &dyn HeatmapModel) -> Result<KeypointSet> {
    let (face, (x0, y0)) = face_region(image, bbox)?;
    Ok(predict_keypoints(&face, model)?.translate(x0 as f64, y0 as f64))
}

/// Training example for the keypoint model: the face region of `bbox` with
/// frame-coordinate keypoints moved into it.
pub fn keypoint_sample(image: &RgbImage, bbox: &BoundingBox, kps: &KeypointSet) -> Result<KeypointSample> {
    let (face, (x0, y0)) = face_region(image, bbox)?;
    let keypoints = kps.translate(-(x0 as f64), -(y0 as f64));
    keypoints.validate(face.width() as f64, face.height() as f64)?;
    Ok(KeypointSample { image: face, keypoints })
}

#[derive(Clone, Debug)]
pub struct ProcessedView {
    pub frame_id: String,
    pub chick_id: String,
    pub detection: Detection,
    /// Frame coordinates, before alignment.
    pub keypoints: KeypointSet,
    pub angle_deg: f64,
    pub full: FaceCrop,
    pub middle: Option<MiddleCrop>,
}

impl ProcessedView {
    pub fn crop(&self, kind: CropKind) -> Option<&FaceCrop> {
        match kind {
            CropKind::Full => Some(&self.full),
            CropKind::Middle => self.middle.as_ref().map(|m| &m.crop),
        }
    }
}

pub struct Stages<'a> {
    pub detector: &'a dyn FaceDetector,
    pub detector_cfg: &'a DetectorConfig,
    pub keypoints: KeypointSource<'a>,
    pub crop: CropParams,
    pub middle: bool,
}

pub fn process_view(image: &RgbImage, frame: &FrameRecord, stages: &Stages) -> Result<ProcessedView> {
    let detection = detect_face(image, stages.detector_cfg, stages.detector)?
        .ok_or_else(|| Error::FlaggedFrame("no face detected".into()))?;
    let keypoints = match stages.keypoints {
        KeypointSource::Model(m) => locate_keypoints(image, &detection.bbox, m)?,
        KeypointSource::Annotations(a) => *a
            .get(&frame.frame_id)
            .ok_or_else(|| Error::invalid(format!("no keypoints for `{}`", frame.frame_id)))?,
    };
    if pose_gate(&keypoints) == PoseDecision::Reject {
        return Err(Error::Pose("eyes and beak corners must be visible".into()));
    }
    let aligned = align_face(image, &detection.bbox, &keypoints)?;
    if aligned.alignment.flagged {
        return Err(Error::FlaggedFrame("aligned box lost a visible keypoint".into()));
    }
    let full = crop_full_face(&aligned.image, aligned.aligned_box(), aligned.keypoints())?;
    let middle = if stages.middle {
        Some(crop_middle_face(&full, stages.crop.margin_scale, stages.crop.mask_radius_factor)?)
    } else {
        None
    };
    Ok(ProcessedView {
        frame_id: frame.frame_id.clone(),
        chick_id: frame.chick_id.clone(),
        detection,
        keypoints,
        angle_deg: aligned.alignment.angle_deg,
        full,
        middle,
    })
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct Skipped {
    pub frame_id: String,
    pub reason: String,
}

pub struct PipelineOutcome {
    pub views: Vec<ProcessedView>,
    pub skipped: Vec<Skipped>,
}

/// Processes every accepted frame of `manifest` (image refs relative to
/// `root`). Output order follows the manifest.
pub fn process_manifest(manifest: &DatasetManifest, root: &Path, stages: &Stages, exec: Execution) -> Result<PipelineOutcome> {
    let frames: Vec<&FrameRecord> = manifest.accepted_frames().collect();
    let results = exec.map(&frames, |f| -> Result<Result<ProcessedView>> {
        let image = image::open(root.join(&f.image_ref))?.to_rgb8();
        Ok(process_view(&image, f, stages))
    });
    let mut views = Vec::new();
    let mut skipped = Vec::new();
    for (f, r) in frames.iter().zip(results) {
        match r? {
            Ok(v) => views.push(v),
            Err(e @ (Error::Io(_) | Error::Image(_) | Error::Json(_) | Error::Detector { .. })) => return Err(e),
            Err(e) => {
                log::warn!("skipping {}: {e}", f.frame_id);
                skipped.push(Skipped { frame_id: f.frame_id.clone(), reason: e.to_string() });
            }
        }
    }
    Ok(PipelineOutcome { views, skipped })
}

/// Classifier inputs of one crop kind; genders come from the manifest.
pub fn classifier_samples(manifest: &DatasetManifest, views: &[ProcessedView], kind: CropKind) -> Result<Vec<ClassifierSample>> {
    let genders = manifest.gender_map();
    views
        .iter()
        .filter_map(|v| v.crop(kind).map(|c| (v, c)))
        .map(|(v, c)| {
            let gender = *genders
                .get(v.chick_id.as_str())
                .ok_or_else(|| Error::invalid(format!("chick `{}` missing from manifest", v.chick_id)))?;
            Ok(ClassifierSample { chick_id: v.chick_id.clone(), image_id: v.frame_id.clone(), gender, image: c.image.clone() })
        })
        .collect()
}

/// Writes `crops/<kind>/<frame_id>.png` with sidecars under `out_dir` and
/// returns the matching crop manifest.
pub fn write_crops(manifest: &DatasetManifest, views: &[ProcessedView], kind: CropKind, out_dir: &Path) -> Result<DatasetManifest> {
    let dir = out_dir.join("crops").join(kind.as_str());
    std::fs::create_dir_all(&dir)?;
    let mut frames = Vec::new();
    for v in views {
        let Some(crop) = v.crop(kind) else { continue };
        let rel = format!("crops/{}/{}.png", kind.as_str(), v.frame_id);
        crop.save(&out_dir.join(&rel))?;
        let src = manifest.frame(&v.frame_id).ok_or_else(|| Error::invalid(format!("frame `{}` not in manifest", v.frame_id)))?;
        frames.push(FrameRecord { image_ref: rel, quality: Quality::Accepted, ..src.clone() });
    }
    let out = DatasetManifest { chicks: manifest.chicks.clone(), frames, crop_kind: ManifestCrop::from(kind) };
    out.validate()?;
    Ok(out)
}

/// Reads the accepted crops of a crop manifest back as classifier inputs.
pub fn load_samples(manifest: &DatasetManifest, root: &Path, exec: Execution) -> Result<Vec<ClassifierSample>> {
    if manifest.crop_kind == ManifestCrop::None {
        return Err(Error::invalid("manifest holds raw views, not crops"));
    }
    let genders = manifest.gender_map();
    let frames: Vec<&FrameRecord> = manifest.accepted_frames().collect();
    exec.map(&frames, |f| {
        let gender = *genders
            .get(f.chick_id.as_str())
            .ok_or_else(|| Error::invalid(format!("chick `{}` missing from manifest", f.chick_id)))?;
        let image = image::open(root.join(&f.image_ref))?.to_rgb8();
        Ok(ClassifierSample { chick_id: f.chick_id.clone(), image_id: f.frame_id.clone(), gender, image })
    })
    .into_iter()
    .collect()
}
