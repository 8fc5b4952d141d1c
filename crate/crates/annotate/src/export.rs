//! Ground-truth bundle: `annotations/<frame>.json` (LabelMe),
//! `labels/<frame>.txt` (detector format) and `manifest.json`.
//! Entries are sorted and carry a fixed timestamp so equal inputs give equal
//! bytes.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{Cursor, Write};

use chickface::dataset::{DatasetManifest, Quality};
use chickface::detection::yolo_line;
use chickface::geometry::LabelMeDocument;
use zip::write::SimpleFileOptions;
use zip::{CompressionMethod, DateTime, ZipWriter};

use crate::error::{Result, ServiceError};
use crate::model::AnnotationTask;

/// `image_size` maps a frame id to the pixel size of its view.
pub fn bundle(tasks: &[AnnotationTask], manifest: &DatasetManifest, image_size: impl Fn(&str) -> Result<(u32, u32)>) -> Result<Vec<u8>> {
    let mut entries: BTreeMap<String, Vec<u8>> = BTreeMap::new();
    let mut chick_ids = BTreeSet::new();
    let mut frames = Vec::new();
    for t in tasks {
        let (Some(bbox), Some(kps)) = (t.revised_box, t.revised_keypoints) else { continue };
        let frame = manifest.frame(&t.frame_id).ok_or_else(|| ServiceError::UnknownFrame(t.frame_id.clone()))?;
        if frame.quality == Quality::Rejected {
            continue;
        }
        let (w, h) = image_size(&frame.frame_id)?;
        let doc = LabelMeDocument::from_annotation(&frame.image_ref, w, h, Some(&bbox), Some(&kps));
        entries.insert(format!("annotations/{}.json", t.frame_id), serde_json::to_vec_pretty(&doc)?);
        entries.insert(format!("labels/{}.txt", t.frame_id), format!("{}\n", yolo_line(&bbox, w, h, 0)).into_bytes());
        chick_ids.insert(frame.chick_id.clone());
        frames.push(frame.clone());
    }
    frames.sort_by(|a, b| a.frame_id.cmp(&b.frame_id));
    let slice = DatasetManifest {
        chicks: manifest.chicks.iter().filter(|c| chick_ids.contains(&c.chick_id)).cloned().collect(),
        frames,
        crop_kind: manifest.crop_kind,
    };
    entries.insert("manifest.json".to_string(), serde_json::to_vec_pretty(&slice)?);

    let opts = SimpleFileOptions::default()
        .compression_method(CompressionMethod::Deflated)
        .last_modified_time(DateTime::default())
        .unix_permissions(0o644);
    let mut zip = ZipWriter::new(Cursor::new(Vec::new()));
    for (name, bytes) in &entries {
        zip.start_file(name.as_str(), opts)?;
        zip.write_all(bytes)?;
    }
    Ok(zip.finish()?.into_inner())
}

/// Entry names and contents of a bundle, in archive order.
pub fn read_bundle(bytes: &[u8]) -> Result<Vec<(String, Vec<u8>)>> {
    let mut archive = zip::ZipArchive::new(Cursor::new(bytes))?;
    let mut out = Vec::new();
    for i in 0..archive.len() {
        let mut f = archive.by_index(i)?;
        let mut buf = Vec::new();
        std::io::Read::read_to_end(&mut f, &mut buf)?;
        out.push((f.name().to_string(), buf));
    }
    Ok(out)
}
