use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{Context, Result};
use chickface::classifier::{train_classifier_with, write_history_csv, Classifier, ClassifierSample};
use chickface::cropping::{crop_full_face, crop_middle_face, FaceCrop};
use chickface::dataset::{
    assign_folds, ingest, read_labels_csv, sample_seed_frames, split_views, ChickRecord, CropKind, DatasetManifest, FoldPlan,
    FrameRecord, IngestOptions, ManifestCrop, Quality,
};
use chickface::detection::{detect_face, load_detector, Detection};
use chickface::evaluation::{render_report, run_cross_validation, CVResult};
use chickface::explain::{colorize, explain_prediction, overlay};
use chickface::geometry::{align_face, pose_gate, BoundingBox, KeypointSet, LabelMeDocument, PoseDecision};
use chickface::keypoints::{train_keypoint_model, KeypointModel};
use chickface::parallel::Execution;
use chickface::pipeline::{keypoint_sample, load_samples, locate_keypoints, Skipped};
use chickface::synth::{generate, SynthConfig};
use chickface_annotate::http::{serve, AppState};
use chickface_annotate::service::AdvanceConfig;
use chickface_annotate::Service;
use serde::{Deserialize, Serialize};

use crate::config::{ConfigError, PipelineConfig};
use crate::{ClassifierArgs, Command};

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    std::fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path, produced_by: &str) -> Result<T> {
    if !path.exists() {
        return Err(ConfigError(format!("{} not found; run `{produced_by}` first", path.display())).into());
    }
    let bytes = std::fs::read(path)?;
    serde_json::from_slice(&bytes).with_context(|| format!("parsing {}", path.display()))
}

fn load_manifest(cfg: &PipelineConfig) -> Result<DatasetManifest> {
    let path = cfg.manifest_path();
    if !path.exists() {
        return Err(ConfigError(format!("{} not found; run `ingest` first", path.display())).into());
    }
    Ok(DatasetManifest::load(&path)?)
}

/// LabelMe files of `dir` keyed by file stem.
fn load_labelme_dir(dir: &Path) -> Result<BTreeMap<String, (BoundingBox, KeypointSet)>> {
    PipelineConfig::require_dir(dir, "annotation directory")?;
    let mut out = BTreeMap::new();
    for entry in std::fs::read_dir(dir)? {
        let path = entry?.path();
        if path.extension().and_then(|e| e.to_str()) != Some("json") {
            continue;
        }
        let doc = LabelMeDocument::load(&path).with_context(|| path.display().to_string())?;
        let id = path.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_string();
        if let (Some(b), Some(k)) = (doc.face_box()?, doc.keypoints()?) {
            out.insert(id, (b, k));
        }
    }
    Ok(out)
}

fn apply_classifier_args(cfg: &mut PipelineConfig, a: &ClassifierArgs) -> Result<CropKind> {
    let c = &mut cfg.classifier;
    if let Some(b) = a.backbone {
        c.backbone = b;
    }
    if let Some(e) = a.epochs {
        c.epochs = e;
    }
    if let Some(lr) = a.lr {
        c.lr = lr;
    }
    if let Some(f) = a.fine_tune {
        c.fine_tune = f.into();
    }
    if let Some(p) = &a.pretrained {
        c.pretrained_ref = Some(p.clone());
    }
    cfg.validate()?;
    Ok(a.crop.into())
}

fn crop_manifest_path(cfg: &PipelineConfig, kind: CropKind) -> PathBuf {
    cfg.output_root.join(format!("crops_{}.json", kind.as_str()))
}

fn load_crops(cfg: &PipelineConfig, kind: CropKind, exec: Execution) -> Result<(DatasetManifest, Vec<ClassifierSample>)> {
    let path = crop_manifest_path(cfg, kind);
    if !path.exists() {
        return Err(ConfigError(format!("{} not found; run `crop --kind {}` first", path.display(), kind.as_str())).into());
    }
    let manifest = DatasetManifest::load(&path)?;
    let samples = load_samples(&manifest, &cfg.output_root, exec)?;
    Ok((manifest, samples))
}

/// Folds over the chicks that have at least one sample.
fn plan_folds(manifest: &DatasetManifest, samples: &[ClassifierSample], k: usize, seed: u64) -> Result<FoldPlan> {
    let present: std::collections::BTreeSet<&str> = samples.iter().map(|s| s.chick_id.as_str()).collect();
    let chicks: Vec<ChickRecord> = manifest.chicks.iter().filter(|c| present.contains(c.chick_id.as_str())).cloned().collect();
    Ok(assign_folds(&chicks, k, seed)?)
}

pub fn dispatch(cmd: Command, mut cfg: PipelineConfig, exec: Execution) -> Result<()> {
    match cmd {
        Command::SynthData { out, ids, frames, separability, feature, max_roll, noise } => {
            let out = out.unwrap_or_else(|| cfg.data_root.clone());
            let sc = SynthConfig {
                ids,
                frames_per_id: frames,
                separability,
                feature: feature.into(),
                max_roll_deg: max_roll,
                noise,
                seed: cfg.seed,
                ..SynthConfig::default()
            };
            sc.validate().map_err(|e| ConfigError(e.to_string()))?;
            let summary = generate(&sc, &out)?;
            println!("wrote {} chicks, {} stacked frames to {}", summary.chicks.len(), summary.frames, out.display());
            Ok(())
        }
        Command::Ingest { raw, labels, accept_all } => {
            let raw = raw.unwrap_or_else(|| cfg.data_root.join("raw"));
            let labels = labels.unwrap_or_else(|| cfg.data_root.join("labels.csv"));
            PipelineConfig::require_dir(&raw, "raw frame directory")?;
            if !labels.is_file() {
                return Err(ConfigError(format!("labels file {} does not exist", labels.display())).into());
            }
            let labels = read_labels_csv(&labels)?;
            let manifest = ingest(&raw, &labels, &cfg.output_root, &IngestOptions { accept_all })?;
            manifest.save(&cfg.manifest_path())?;
            println!("{} chicks, {} views -> {}", manifest.chicks.len(), manifest.frames.len(), cfg.manifest_path().display());
            Ok(())
        }
        Command::SplitViews { input, out } => {
            let img = image::open(&input).with_context(|| input.display().to_string())?.to_rgb8();
            let stem = input.file_stem().and_then(|s| s.to_str()).unwrap_or("frame");
            std::fs::create_dir_all(&out)?;
            for (i, v) in split_views(&img)?.iter().enumerate() {
                v.save(out.join(format!("{stem}_v{i}.png")))?;
            }
            Ok(())
        }
        Command::ServeAnnotations { addr, db, ui, sync_manifest } => serve_annotations(&cfg, addr, db, ui, sync_manifest, exec),
        Command::TrainKeypoints { annotations, epochs, max_samples } => {
            if let Some(e) = epochs {
                cfg.keypoint_epochs = e;
            }
            cfg.validate()?;
            train_keypoints(&cfg, annotations, max_samples, exec)
        }
        Command::Detect { model_ref, input_size, conf_threshold } => {
            if let Some(m) = model_ref {
                cfg.detector.model_ref = m;
            }
            if let Some(s) = input_size {
                cfg.detector.input_size = s;
            }
            if let Some(c) = conf_threshold {
                cfg.detector.conf_threshold = c;
            }
            cfg.validate()?;
            detect(&cfg, exec)
        }
        Command::Align { keypoints_model, annotations } => align(&cfg, keypoints_model, annotations, exec),
        Command::Crop { kind, margin_scale, mask_radius_factor } => {
            if let Some(m) = margin_scale {
                cfg.crop.margin_scale = m;
            }
            if let Some(m) = mask_radius_factor {
                cfg.crop.mask_radius_factor = m;
            }
            cfg.validate()?;
            crop(&cfg, kind.into(), exec)
        }
        Command::TrainClassifier { classifier, val_fold } => {
            let kind = apply_classifier_args(&mut cfg, &classifier)?;
            train_classifier(&cfg, kind, val_fold, exec)
        }
        Command::Evaluate { k, classifier } => {
            if let Some(k) = k {
                cfg.folds = k;
            }
            let kind = apply_classifier_args(&mut cfg, &classifier)?;
            evaluate(&cfg, kind, exec)
        }
        Command::Explain { model, crop, layer, limit } => explain(&cfg, &model, crop.into(), layer.as_deref(), limit, exec),
        Command::Report => report(&cfg).map(|_| ()),
    }
}

fn serve_annotations(
    cfg: &PipelineConfig,
    addr: std::net::SocketAddr,
    db: Option<PathBuf>,
    ui: Option<PathBuf>,
    sync_manifest: bool,
    exec: Execution,
) -> Result<()> {
    let mut manifest = load_manifest(cfg)?;
    if let Some(u) = &ui {
        PipelineConfig::require_dir(u, "UI directory")?;
    }
    let db = db.unwrap_or_else(|| cfg.output_root.join("annotations.sqlite"));
    let service = Service::open(&db).with_context(|| db.display().to_string())?;
    service.import_manifest(&manifest, &cfg.output_root)?;
    if sync_manifest {
        let stored = service.manifest()?;
        let genders = stored.gender_map();
        for c in &mut manifest.chicks {
            if let Some(&g) = genders.get(c.chick_id.as_str()) {
                c.gender = g;
            }
        }
        for f in &mut manifest.frames {
            if let Some(s) = stored.frame(&f.frame_id) {
                f.quality = s.quality;
            }
        }
        manifest.save(&cfg.manifest_path())?;
        println!("updated {}", cfg.manifest_path().display());
        return Ok(());
    }
    let state = AppState {
        service: Arc::new(service),
        advance: AdvanceConfig {
            keypoints: cfg.keypoints.clone(),
            epochs: cfg.keypoint_epochs,
            seed: cfg.seed,
            detector_ref: cfg.detector.model_ref.clone(),
            models_dir: cfg.models_dir().join("rounds"),
        },
        detector: Arc::from(load_detector(&cfg.detector.model_ref)?),
        detector_cfg: cfg.detector.clone(),
        exec,
        ui_dir: ui,
    };
    let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
    rt.block_on(serve(state, addr)).context("annotation service")
}

fn train_keypoints(cfg: &PipelineConfig, annotations: Option<PathBuf>, max_samples: Option<usize>, exec: Execution) -> Result<()> {
    let manifest = load_manifest(cfg)?;
    let labels = load_labelme_dir(&annotations.unwrap_or_else(|| cfg.data_root.join("annotations")))?;
    let annotated = DatasetManifest {
        frames: manifest.frames.iter().filter(|f| f.quality != Quality::Rejected && labels.contains_key(&f.frame_id)).cloned().collect(),
        ..manifest.clone()
    };
    if annotated.frames.is_empty() {
        return Err(ConfigError("no annotated views in the manifest".into()).into());
    }
    let ids = match max_samples {
        Some(n) => sample_seed_frames(&annotated, n, cfg.seed),
        None => annotated.frames.iter().map(|f| f.frame_id.clone()).collect(),
    };
    let samples = exec
        .map(&ids, |id| -> Result<_> {
            let f = annotated.frame(id).expect("sampled from the manifest");
            let img = image::open(cfg.output_root.join(&f.image_ref)).with_context(|| f.image_ref.clone())?.to_rgb8();
            let (b, k) = &labels[id];
            keypoint_sample(&img, b, k).with_context(|| id.clone())
        })
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let (model, losses) = train_keypoint_model(&samples, &cfg.keypoints, cfg.keypoint_epochs, cfg.seed, exec)?;
    let dir = cfg.models_dir();
    std::fs::create_dir_all(&dir)?;
    model.save(&dir.join("keypoints.safetensors"))?;
    let csv: String = std::iter::once("epoch,loss".to_string())
        .chain(losses.iter().enumerate().map(|(i, l)| format!("{},{l}", i + 1)))
        .map(|l| l + "\n")
        .collect();
    std::fs::write(dir.join("keypoints_loss.csv"), csv)?;
    println!("trained on {} views; final loss {:.6}", samples.len(), losses.last().copied().unwrap_or(f64::NAN));
    Ok(())
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DetectionRecord {
    pub frame_id: String,
    pub detection: Option<Detection>,
}

fn detect(cfg: &PipelineConfig, exec: Execution) -> Result<()> {
    let manifest = load_manifest(cfg)?;
    let frames: Vec<&FrameRecord> = manifest.accepted_frames().collect();
    if frames.is_empty() {
        return Err(ConfigError("no accepted views; ingest with --accept-all or review frames first".into()).into());
    }
    let detector = load_detector(&cfg.detector.model_ref)?;
    let records = exec
        .map(&frames, |f| -> Result<DetectionRecord> {
            let img = image::open(cfg.output_root.join(&f.image_ref)).with_context(|| f.image_ref.clone())?.to_rgb8();
            Ok(DetectionRecord { frame_id: f.frame_id.clone(), detection: detect_face(&img, &cfg.detector, detector.as_ref())? })
        })
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let found = records.iter().filter(|r| r.detection.is_some()).count();
    write_json(&cfg.output_root.join("detections.json"), &records)?;
    println!("faces in {found} of {} views", records.len());
    Ok(())
}

/// One upright face, as listed in `aligned/index.json`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AlignedRecord {
    pub frame_id: String,
    pub chick_id: String,
    /// Relative to the output root.
    pub image_ref: String,
    pub angle_deg: f64,
    pub aligned_box: BoundingBox,
    /// In aligned-frame coordinates.
    pub keypoints: KeypointSet,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct AlignedIndex {
    pub views: Vec<AlignedRecord>,
    pub skipped: Vec<Skipped>,
}

fn is_fatal(e: &chickface::Error) -> bool {
    matches!(e, chickface::Error::Io(_) | chickface::Error::Image(_) | chickface::Error::Json(_))
}

fn align(cfg: &PipelineConfig, model_path: Option<PathBuf>, annotations: Option<PathBuf>, exec: Execution) -> Result<()> {
    let manifest = load_manifest(cfg)?;
    let detections: Vec<DetectionRecord> = read_json(&cfg.output_root.join("detections.json"), "detect")?;
    let labels = annotations.as_deref().map(load_labelme_dir).transpose()?;
    let model = match &labels {
        Some(_) => None,
        None => {
            let p = model_path.unwrap_or_else(|| cfg.models_dir().join("keypoints.safetensors"));
            if !p.exists() {
                return Err(ConfigError(format!("{} not found; run `train-keypoints` or pass --annotations", p.display())).into());
            }
            Some(KeypointModel::load(&p)?)
        }
    };
    let dir = cfg.output_root.join("aligned");
    std::fs::create_dir_all(&dir)?;
    let results = exec.map(&detections, |r| -> chickface::Result<AlignedRecord> {
        let det = r.detection.ok_or_else(|| chickface::Error::FlaggedFrame("no face detected".into()))?;
        let f = manifest.frame(&r.frame_id).ok_or_else(|| chickface::Error::InvalidInput(format!("`{}` not in manifest", r.frame_id)))?;
        let img = image::open(cfg.output_root.join(&f.image_ref))?.to_rgb8();
        let kps = match (&labels, &model) {
            (Some(l), _) => l.get(&r.frame_id).map(|v| v.1).ok_or_else(|| chickface::Error::InvalidInput("no annotated keypoints".into()))?,
            (None, Some(m)) => locate_keypoints(&img, &det.bbox, m)?,
            (None, None) => unreachable!("a keypoint source is required"),
        };
        if pose_gate(&kps) == PoseDecision::Reject {
            return Err(chickface::Error::Pose("eyes and beak corners must be visible".into()));
        }
        let aligned = align_face(&img, &det.bbox, &kps)?;
        if aligned.alignment.flagged {
            return Err(chickface::Error::FlaggedFrame("aligned box lost a visible keypoint".into()));
        }
        let image_ref = format!("aligned/{}.png", r.frame_id);
        aligned.image.save(cfg.output_root.join(&image_ref))?;
        Ok(AlignedRecord {
            frame_id: r.frame_id.clone(),
            chick_id: f.chick_id.clone(),
            image_ref,
            angle_deg: aligned.alignment.angle_deg,
            aligned_box: aligned.alignment.aligned_box,
            keypoints: aligned.alignment.keypoints,
        })
    });
    let mut index = AlignedIndex::default();
    for (r, res) in detections.iter().zip(results) {
        match res {
            Ok(v) => index.views.push(v),
            Err(e) if is_fatal(&e) => return Err(e).context(r.frame_id.clone()),
            Err(e) => {
                log::warn!("skipping {}: {e}", r.frame_id);
                index.skipped.push(Skipped { frame_id: r.frame_id.clone(), reason: e.to_string() });
            }
        }
    }
    write_json(&dir.join("index.json"), &index)?;
    println!("aligned {} views, skipped {}", index.views.len(), index.skipped.len());
    Ok(())
}

fn crop(cfg: &PipelineConfig, kind: CropKind, exec: Execution) -> Result<()> {
    let manifest = load_manifest(cfg)?;
    let index: AlignedIndex = read_json(&cfg.output_root.join("aligned").join("index.json"), "align")?;
    let dir = cfg.output_root.join("crops").join(kind.as_str());
    std::fs::create_dir_all(&dir)?;
    let results = exec.map(&index.views, |v| -> chickface::Result<FrameRecord> {
        let img = image::open(cfg.output_root.join(&v.image_ref))?.to_rgb8();
        let full = crop_full_face(&img, &v.aligned_box, &v.keypoints)?;
        let out: FaceCrop = match kind {
            CropKind::Full => full,
            CropKind::Middle => crop_middle_face(&full, cfg.crop.margin_scale, cfg.crop.mask_radius_factor)?.crop,
        };
        let rel = format!("crops/{}/{}.png", kind.as_str(), v.frame_id);
        out.save(&cfg.output_root.join(&rel))?;
        let src = manifest.frame(&v.frame_id).ok_or_else(|| chickface::Error::InvalidInput(format!("`{}` not in manifest", v.frame_id)))?;
        Ok(FrameRecord { image_ref: rel, quality: Quality::Accepted, ..src.clone() })
    });
    let mut frames = Vec::new();
    let mut skipped = Vec::new();
    for (v, r) in index.views.iter().zip(results) {
        match r {
            Ok(f) => frames.push(f),
            Err(e) if is_fatal(&e) => return Err(e).context(v.frame_id.clone()),
            Err(e) => {
                log::warn!("skipping {}: {e}", v.frame_id);
                skipped.push(Skipped { frame_id: v.frame_id.clone(), reason: e.to_string() });
            }
        }
    }
    let out = DatasetManifest { chicks: manifest.chicks.clone(), frames, crop_kind: ManifestCrop::from(kind) };
    out.validate()?;
    out.save(&crop_manifest_path(cfg, kind))?;
    write_json(&dir.join("skipped.json"), &skipped)?;
    println!("{} {} crops, skipped {}", out.frames.len(), kind.as_str(), skipped.len());
    Ok(())
}

fn model_stem(cfg: &PipelineConfig, kind: CropKind) -> String {
    format!("{}_{}", cfg.classifier.backbone.as_str(), kind.as_str())
}

fn train_classifier(cfg: &PipelineConfig, kind: CropKind, val_fold: Option<usize>, exec: Execution) -> Result<()> {
    let (manifest, samples) = load_crops(cfg, kind, exec)?;
    let plan = plan_folds(&manifest, &samples, cfg.folds, cfg.fold_seed)?;
    let val_fold = val_fold.unwrap_or(plan.k - 1);
    if val_fold >= plan.k {
        return Err(ConfigError(format!("--val-fold must be below {}", plan.k)).into());
    }
    let (val, train): (Vec<ClassifierSample>, Vec<ClassifierSample>) =
        samples.into_iter().partition(|s| plan.fold_of(&s.chick_id) == Some(val_fold));
    let out = train_classifier_with(&train, &val, &cfg.classifier, exec)?;
    let dir = cfg.models_dir();
    std::fs::create_dir_all(&dir)?;
    let stem = model_stem(cfg, kind);
    out.best.model.save(&dir.join(format!("classifier_{stem}.safetensors")))?;
    write_history_csv(&dir.join(format!("classifier_{stem}_history.csv")), &out.history)?;
    println!("best epoch {} with validation accuracy {:.4}", out.best.epoch, out.best.val_accuracy);
    Ok(())
}

fn results_dir(cfg: &PipelineConfig) -> PathBuf {
    cfg.output_root.join("results")
}

fn evaluate(cfg: &PipelineConfig, kind: CropKind, exec: Execution) -> Result<()> {
    let (manifest, samples) = load_crops(cfg, kind, exec)?;
    let plan = plan_folds(&manifest, &samples, cfg.folds, cfg.fold_seed)?;
    let result = run_cross_validation(&samples, &plan, &cfg.classifier, kind, exec)?;
    let path = results_dir(cfg).join(format!("cv_{}.json", model_stem(cfg, kind)));
    std::fs::create_dir_all(results_dir(cfg))?;
    result.save_json(&path)?;
    report(cfg)?;
    println!("averaged accuracy {:.4} ({})", result.report.averages.accuracy, path.display());
    Ok(())
}

/// Renders every saved evaluation into `report/`.
pub fn report(cfg: &PipelineConfig) -> Result<Vec<CVResult>> {
    let dir = results_dir(cfg);
    PipelineConfig::require_dir(&dir, "results directory (run `evaluate` first)")?;
    let mut paths: Vec<PathBuf> = std::fs::read_dir(&dir)?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    paths.retain(|p| p.file_name().and_then(|n| n.to_str()).is_some_and(|n| n.starts_with("cv_") && n.ends_with(".json")));
    paths.sort();
    let results = paths.iter().map(|p| CVResult::load_json(p).with_context(|| p.display().to_string())).collect::<Result<Vec<_>>>()?;
    let docs = render_report(&results);
    let out = cfg.output_root.join("report");
    std::fs::create_dir_all(&out)?;
    std::fs::write(out.join("per_fold.csv"), &docs.per_fold_csv)?;
    std::fs::write(out.join("averaged.csv"), &docs.averaged_csv)?;
    std::fs::write(out.join("report.txt"), &docs.text)?;
    print!("{}", docs.text);
    Ok(results)
}

fn explain(cfg: &PipelineConfig, model: &Path, kind: CropKind, layer: Option<&str>, limit: Option<usize>, exec: Execution) -> Result<()> {
    if !model.exists() {
        return Err(ConfigError(format!("model {} does not exist", model.display())).into());
    }
    let classifier = Classifier::load(model)?;
    let (_, mut samples) = load_crops(cfg, kind, exec)?;
    if let Some(n) = limit {
        samples.truncate(n);
    }
    let dir = cfg.output_root.join("explain").join(kind.as_str());
    std::fs::create_dir_all(&dir)?;
    let records = exec
        .map(&samples, |s| -> Result<_> {
            let (_, map, record) = explain_prediction(&classifier, &s.image_id, &s.image, layer)?;
            colorize(&map).save(dir.join(format!("{}_heatmap.png", s.image_id)))?;
            overlay(&s.image, &map, 0.5)?.save(dir.join(format!("{}_overlay.png", s.image_id)))?;
            Ok(record)
        })
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    write_json(&dir.join("explain.json"), &records)?;
    println!("explained {} crops into {}", records.len(), dir.display());
    Ok(())
}
