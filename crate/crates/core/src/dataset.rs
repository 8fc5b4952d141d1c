//! Frames, chicks, the dataset manifest, view splitting and grouped fold
//! planning.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::path::{Path, PathBuf};

use image::RgbImage;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::parallel;
use crate::raster;
use crate::{Error, Result};

/// Number of camera views stacked vertically in every recorded frame.
pub const VIEWS_PER_FRAME: u32 = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Gender {
    Female,
    Male,
}

impl Gender {
    /// Binary label with male as the positive class.
    pub fn label(self) -> f64 {
        match self {
            Gender::Female => 0.0,
            Gender::Male => 1.0,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Gender::Female => "female",
            Gender::Male => "male",
        }
    }

    pub fn parse(s: &str) -> Option<Gender> {
        match s.trim().to_ascii_lowercase().as_str() {
            "female" | "f" => Some(Gender::Female),
            "male" | "m" => Some(Gender::Male),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChickRecord {
    pub chick_id: String,
    pub gender: Gender,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Quality {
    #[default]
    Unreviewed,
    Accepted,
    Rejected,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameRecord {
    pub frame_id: String,
    pub chick_id: String,
    pub view_index: u8,
    /// Path relative to the manifest's directory.
    pub image_ref: String,
    #[serde(default)]
    pub quality: Quality,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CropKind {
    Full,
    Middle,
}

impl CropKind {
    pub fn as_str(self) -> &'static str {
        match self {
            CropKind::Full => "full",
            CropKind::Middle => "middle",
        }
    }
}

/// Crop kind recorded in a manifest; `None` for raw view images.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ManifestCrop {
    Full,
    Middle,
    #[default]
    None,
}

impl From<CropKind> for ManifestCrop {
    fn from(k: CropKind) -> Self {
        match k {
            CropKind::Full => ManifestCrop::Full,
            CropKind::Middle => ManifestCrop::Middle,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub chicks: Vec<ChickRecord>,
    pub frames: Vec<FrameRecord>,
    pub crop_kind: ManifestCrop,
}

impl DatasetManifest {
    pub fn validate(&self) -> Result<()> {
        let mut ids = HashSet::new();
        for c in &self.chicks {
            if !ids.insert(c.chick_id.as_str()) {
                return Err(Error::invalid(format!("duplicate chick_id `{}`", c.chick_id)));
            }
        }
        let mut frame_ids = HashSet::new();
        for f in &self.frames {
            if !ids.contains(f.chick_id.as_str()) {
                return Err(Error::invalid(format!(
                    "frame `{}` references unknown chick `{}`",
                    f.frame_id, f.chick_id
                )));
            }
            if f.view_index as u32 >= VIEWS_PER_FRAME {
                return Err(Error::invalid(format!(
                    "frame `{}` has view_index {} outside 0..{VIEWS_PER_FRAME}",
                    f.frame_id, f.view_index
                )));
            }
            if !frame_ids.insert(f.frame_id.as_str()) {
                return Err(Error::invalid(format!("duplicate frame_id `{}`", f.frame_id)));
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let m: DatasetManifest = serde_json::from_slice(&std::fs::read(path)?)?;
        m.validate()?;
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.validate()?;
        let mut bytes = serde_json::to_vec_pretty(self)?;
        bytes.push(b'\n');
        std::fs::write(path, bytes)?;
        Ok(())
    }

    pub fn gender_of(&self, chick_id: &str) -> Option<Gender> {
        self.chicks.iter().find(|c| c.chick_id == chick_id).map(|c| c.gender)
    }

    pub fn gender_map(&self) -> BTreeMap<&str, Gender> {
        self.chicks.iter().map(|c| (c.chick_id.as_str(), c.gender)).collect()
    }

    /// Frames eligible for training and evaluation.
    pub fn accepted_frames(&self) -> impl Iterator<Item = &FrameRecord> {
        self.frames.iter().filter(|f| f.quality == Quality::Accepted)
    }

    pub fn frame(&self, frame_id: &str) -> Option<&FrameRecord> {
        self.frames.iter().find(|f| f.frame_id == frame_id)
    }

    /// Checks that every frame's image decodes, relative to `root`.
    pub fn check_images(&self, root: &Path) -> Result<()> {
        for f in &self.frames {
            image::open(root.join(&f.image_ref))
                .map_err(|e| Error::invalid(format!("frame `{}`: {e}", f.frame_id)))?;
        }
        Ok(())
    }
}

/// Splits a vertically stacked frame into its top, middle and bottom views.
pub fn split_views(stacked: &RgbImage) -> Result<Vec<RgbImage>> {
    let (w, h) = stacked.dimensions();
    if w == 0 || h == 0 || h % VIEWS_PER_FRAME != 0 {
        return Err(Error::invalid(format!(
            "stacked frame height {h} is not divisible by {VIEWS_PER_FRAME}"
        )));
    }
    let vh = h / VIEWS_PER_FRAME;
    Ok((0..VIEWS_PER_FRAME)
        .map(|i| raster::crop(stacked, 0, i * vh, w, vh))
        .collect())
}

/// Grouped fold assignment: every chick sits in exactly one fold.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub k: usize,
    pub assignment: BTreeMap<String, usize>,
}

impl FoldPlan {
    pub fn fold_of(&self, chick_id: &str) -> Option<usize> {
        self.assignment.get(chick_id).copied()
    }

    pub fn ids_in(&self, fold: usize) -> BTreeSet<&str> {
        self.assignment
            .iter()
            .filter(|(_, &f)| f == fold)
            .map(|(id, _)| id.as_str())
            .collect()
    }

    /// `(female, male)` ID counts per fold.
    pub fn gender_counts(&self, chicks: &[ChickRecord]) -> Vec<(usize, usize)> {
        let mut counts = vec![(0, 0); self.k];
        for c in chicks {
            if let Some(f) = self.fold_of(&c.chick_id) {
                match c.gender {
                    Gender::Female => counts[f].0 += 1,
                    Gender::Male => counts[f].1 += 1,
                }
            }
        }
        counts
    }
}

/// Shuffles chick IDs per gender with `seed` and deals them round-robin into
/// `k` folds, so per-gender ID counts differ by at most one between folds.
pub fn assign_folds(chicks: &[ChickRecord], k: usize, seed: u64) -> Result<FoldPlan> {
    if k < 2 {
        return Err(Error::Planning(format!("k must be at least 2, got {k}")));
    }
    let mut seen = HashSet::new();
    for c in chicks {
        if !seen.insert(c.chick_id.as_str()) {
            return Err(Error::Planning(format!("duplicate chick_id `{}`", c.chick_id)));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut assignment = BTreeMap::new();
    for gender in [Gender::Female, Gender::Male] {
        // sorted first so the plan does not depend on input order
        let mut ids: Vec<&str> = chicks
            .iter()
            .filter(|c| c.gender == gender)
            .map(|c| c.chick_id.as_str())
            .collect();
        if ids.len() < k {
            return Err(Error::Planning(format!(
                "{} {} IDs cannot fill {k} folds",
                ids.len(),
                gender.as_str()
            )));
        }
        ids.sort_unstable();
        ids.shuffle(&mut rng);
        for (i, id) in ids.into_iter().enumerate() {
            assignment.insert(id.to_string(), i % k);
        }
    }
    Ok(FoldPlan { k, assignment })
}

/// Variance of the 3x3 Laplacian response over interior pixels of the
/// grayscale image. Higher means sharper; constant images score 0.
pub fn blur_score(image: &RgbImage) -> Result<f64> {
    let (w, h) = image.dimensions();
    if w == 0 || h == 0 {
        return Err(Error::invalid("empty image"));
    }
    if w < 3 || h < 3 {
        return Ok(0.0);
    }
    let g = raster::to_gray(image);
    let (h, w) = (h as usize, w as usize);
    let n = ((h - 2) * (w - 2)) as f64;
    let mut sum = 0.0f64;
    let mut sum_sq = 0.0f64;
    for y in 1..h - 1 {
        for x in 1..w - 1 {
            let lap = (g[[y - 1, x]] + g[[y + 1, x]] + g[[y, x - 1]] + g[[y, x + 1]]) as f64
                - 4.0 * g[[y, x]] as f64;
            sum += lap;
            sum_sq += lap * lap;
        }
    }
    let mean = sum / n;
    Ok((sum_sq / n - mean * mean).max(0.0))
}

/// Gender label row of the ingest labels CSV (`video_id,chick_id,gender`).
#[derive(Clone, Debug, Deserialize, Serialize)]
pub struct VideoLabel {
    pub video_id: String,
    pub chick_id: String,
    pub gender: String,
}

pub fn read_labels_csv(path: &Path) -> Result<Vec<VideoLabel>> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| Error::invalid(format!("{}: {e}", path.display())))?;
    rdr.deserialize()
        .map(|r| r.map_err(|e| Error::invalid(format!("{}: {e}", path.display()))))
        .collect()
}

/// Parses `<video_id>_<frame_idx>.png`; the video id may itself contain
/// underscores.
pub fn parse_frame_name(file_name: &str) -> Option<(String, u64)> {
    let stem = file_name.strip_suffix(".png")?;
    let (video, idx) = stem.rsplit_once('_')?;
    if video.is_empty() {
        return None;
    }
    Some((video.to_string(), idx.parse().ok()?))
}

pub struct IngestOptions {
    /// Mark every ingested view as accepted (for pre-screened footage).
    pub accept_all: bool,
}

/// Splits every stacked frame under `raw_dir` into views written to
/// `out_dir/views/`, and returns a manifest whose image refs are relative to
/// `out_dir`.
pub fn ingest(raw_dir: &Path, labels: &[VideoLabel], out_dir: &Path, opts: &IngestOptions) -> Result<DatasetManifest> {
    let mut by_video = BTreeMap::new();
    let mut chicks: BTreeMap<String, Gender> = BTreeMap::new();
    for l in labels {
        let g = Gender::parse(&l.gender)
            .ok_or_else(|| Error::invalid(format!("video `{}`: unknown gender `{}`", l.video_id, l.gender)))?;
        if let Some(prev) = chicks.insert(l.chick_id.clone(), g) {
            if prev != g {
                return Err(Error::invalid(format!("chick `{}` labelled with two genders", l.chick_id)));
            }
        }
        by_video.insert(l.video_id.clone(), l.chick_id.clone());
    }

    let mut raw: Vec<(String, u64, PathBuf)> = Vec::new();
    for entry in std::fs::read_dir(raw_dir)? {
        let path = entry?.path();
        let Some(name) = path.file_name().and_then(|n| n.to_str()) else { continue };
        if let Some((video, idx)) = parse_frame_name(name) {
            raw.push((video, idx, path));
        }
    }
    raw.sort();

    let views_dir = out_dir.join("views");
    std::fs::create_dir_all(&views_dir)?;
    let quality = if opts.accept_all { Quality::Accepted } else { Quality::Unreviewed };

    let results: Vec<Result<Vec<FrameRecord>>> = parallel::map(&raw, |(video, idx, path)| {
        let chick_id = by_video
            .get(video)
            .ok_or_else(|| Error::invalid(format!("no label for video `{video}`")))?;
        let img = image::open(path)?.to_rgb8();
        let views = split_views(&img).map_err(|e| Error::invalid(format!("{}: {e}", path.display())))?;
        let mut out = Vec::with_capacity(views.len());
        for (v, view) in views.iter().enumerate() {
            let frame_id = format!("{video}_{idx}_v{v}");
            let rel = format!("views/{frame_id}.png");
            view.save(out_dir.join(&rel))?;
            out.push(FrameRecord {
                frame_id,
                chick_id: chick_id.clone(),
                view_index: v as u8,
                image_ref: rel,
                quality,
            });
        }
        Ok(out)
    });
    let mut frames = Vec::new();
    for r in results {
        frames.extend(r?);
    }
    let used: BTreeSet<&str> = frames.iter().map(|f| f.chick_id.as_str()).collect();
    let chicks = chicks
        .iter()
        .filter(|(id, _)| used.contains(id.as_str()))
        .map(|(id, &gender)| ChickRecord { chick_id: id.clone(), gender })
        .collect();
    let manifest = DatasetManifest { chicks, frames, crop_kind: ManifestCrop::None };
    manifest.validate()?;
    Ok(manifest)
}

/// Uniformly samples `n` frame ids (sorted) to seed a manual annotation round.
pub fn sample_seed_frames(manifest: &DatasetManifest, n: usize, seed: u64) -> Vec<String> {
    let mut ids: Vec<&str> = manifest.frames.iter().map(|f| f.frame_id.as_str()).collect();
    ids.sort_unstable();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ids.shuffle(&mut rng);
    let mut picked: Vec<String> = ids.into_iter().take(n).map(str::to_string).collect();
    picked.sort();
    picked
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::Rgb;

    fn chicks(f: usize, m: usize) -> Vec<ChickRecord> {
        (0..f)
            .map(|i| ChickRecord { chick_id: format!("f{i:03}"), gender: Gender::Female })
            .chain((0..m).map(|i| ChickRecord { chick_id: format!("m{i:03}"), gender: Gender::Male }))
            .collect()
    }

    #[test]
    fn split_2160_rows() {
        let img = RgbImage::new(1920, 2160);
        let v = split_views(&img).unwrap();
        assert_eq!(v.len(), 3);
        assert!(v.iter().all(|x| x.dimensions() == (1920, 720)));
        assert!(split_views(&RgbImage::new(1920, 2161)).is_err());
    }

    #[test]
    fn split_bands_in_order() {
        let mut img = RgbImage::new(4, 6);
        for (_, y, p) in img.enumerate_pixels_mut() {
            *p = match y / 2 {
                0 => Rgb([255, 0, 0]),
                1 => Rgb([0, 255, 0]),
                _ => Rgb([0, 0, 255]),
            };
        }
        let v = split_views(&img).unwrap();
        assert!(v[0].pixels().all(|p| p.0 == [255, 0, 0]));
        assert!(v[1].pixels().all(|p| p.0 == [0, 255, 0]));
        assert!(v[2].pixels().all(|p| p.0 == [0, 0, 255]));
    }

    #[test]
    fn folds_five_and_five() {
        let plan = assign_folds(&chicks(5, 5), 5, 3).unwrap();
        assert_eq!(plan.gender_counts(&chicks(5, 5)), vec![(1, 1); 5]);
    }

    #[test]
    fn folds_deterministic_and_order_independent() {
        let c = chicks(23, 17);
        let a = assign_folds(&c, 4, 42).unwrap();
        let mut rev = c.clone();
        rev.reverse();
        assert_eq!(a, assign_folds(&c, 4, 42).unwrap());
        assert_eq!(a, assign_folds(&rev, 4, 42).unwrap());
        assert_ne!(a, assign_folds(&c, 4, 43).unwrap());
    }

    #[test]
    fn folds_need_enough_ids() {
        assert!(matches!(assign_folds(&chicks(4, 10), 5, 0), Err(Error::Planning(_))));
        assert!(matches!(assign_folds(&chicks(4, 10), 1, 0), Err(Error::Planning(_))));
    }

    #[test]
    fn blur_constant_is_zero_and_empty_errors() {
        let img = RgbImage::from_pixel(10, 10, Rgb([7, 7, 7]));
        assert_eq!(blur_score(&img).unwrap(), 0.0);
        assert!(blur_score(&RgbImage::new(0, 0)).is_err());
    }

    #[test]
    fn frame_names() {
        assert_eq!(parse_frame_name("vid_a_0012.png"), Some(("vid_a".into(), 12)));
        assert_eq!(parse_frame_name("x.png"), None);
        assert_eq!(parse_frame_name("_3.png"), None);
    }

    #[test]
    fn manifest_rejects_dangling_chick() {
        let m = DatasetManifest {
            chicks: chicks(1, 0),
            frames: vec![FrameRecord {
                frame_id: "a".into(),
                chick_id: "nope".into(),
                view_index: 0,
                image_ref: "a.png".into(),
                quality: Quality::Unreviewed,
            }],
            crop_kind: ManifestCrop::None,
        };
        assert!(m.validate().is_err());
    }

    #[test]
    fn quality_defaults_to_unreviewed() {
        let f: FrameRecord =
            serde_json::from_str(r#"{"frame_id":"a","chick_id":"c","view_index":1,"image_ref":"a.png"}"#).unwrap();
        assert_eq!(f.quality, Quality::Unreviewed);
    }
}
