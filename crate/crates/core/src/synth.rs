//! Procedural chick faces with exact ground truth, standing in for the real
//! recordings. Every frame stacks three views of one chick vertically; the
//! gender is carried by one shape ratio whose female and male distributions
//! overlap according to `separability`.

use std::collections::BTreeMap;
use std::path::Path;

use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{Gender, VideoLabel, VIEWS_PER_FRAME};
use crate::geometry::{BoundingBox, KeypointSet, LabelMeDocument, Point2};
use crate::parallel;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GenderFeature {
    /// Comb height over head height.
    #[default]
    CombHeight,
    /// Beak half-width over head half-width.
    BeakWidth,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub ids: usize,
    pub frames_per_id: usize,
    pub view_width: u32,
    pub view_height: u32,
    /// 0 gives identical distributions, 1 disjoint ones.
    pub separability: f64,
    pub feature: GenderFeature,
    pub max_roll_deg: f64,
    pub noise: u8,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            ids: 200,
            frames_per_id: 2,
            view_width: 160,
            view_height: 160,
            separability: 0.9,
            feature: GenderFeature::CombHeight,
            max_roll_deg: 12.0,
            noise: 8,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.separability) {
            return Err(Error::invalid(format!("separability must lie in [0, 1], got {}", self.separability)));
        }
        if self.ids < 2 || self.frames_per_id == 0 {
            return Err(Error::invalid("need at least two ids and one frame per id"));
        }
        if self.view_width < 120 || self.view_height < 140 {
            return Err(Error::invalid("views must be at least 120x140 pixels"));
        }
        if !(0.0..=30.0).contains(&self.max_roll_deg) {
            return Err(Error::invalid("max_roll_deg must lie in [0, 30]"));
        }
        Ok(())
    }

    /// Support `[lo, lo + width)` of the female trait distribution.
    fn trait_range(&self) -> (f64, f64) {
        match self.feature {
            GenderFeature::CombHeight => (0.15, 0.2),
            GenderFeature::BeakWidth => (0.14, 0.1),
        }
    }

    /// Females draw from `U(lo, lo + w)`, males from the same interval shifted
    /// by `separability * w`.
    pub fn sample_trait(&self, gender: Gender, rng: &mut impl Rng) -> f64 {
        let (lo, w) = self.trait_range();
        let shift = match gender {
            Gender::Female => 0.0,
            Gender::Male => self.separability * w,
        };
        lo + shift + rng.random_range(0.0..w)
    }

    /// Accuracy of the best threshold on the trait: `0.5 + separability / 2`.
    pub fn bayes_accuracy(&self) -> f64 {
        0.5 + self.separability / 2.0
    }
}

/// Everything needed to draw one view.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FaceParams {
    pub center: Point2,
    /// Head half-width and half-height.
    pub axes: (f64, f64),
    pub roll_deg: f64,
    pub comb_ratio: f64,
    pub beak_ratio: f64,
    pub head_rgb: [u8; 3],
}

const BACKGROUND: [f64; 3] = [92.0, 112.0, 94.0];
const COMB: [f64; 3] = [205.0, 35.0, 40.0];
const BEAK: [f64; 3] = [240.0, 140.0, 30.0];
const NOSTRIL: [f64; 3] = [120.0, 70.0, 30.0];
const EYE: [f64; 3] = [15.0, 12.0, 10.0];

impl FaceParams {
    /// Shape-frame keypoints (u right, v down, origin at the head centre).
    /// The anatomical right eye sits on the image left.
    fn local_keypoints(&self) -> [(f64, f64); 7] {
        let (a, b) = self.axes;
        let bw = self.beak_ratio * a;
        [
            (0.0, -0.22 * b),       // upper_nose
            (0.0, 0.05 * b),        // middle_nose
            (-0.42 * a, -0.15 * b), // right_eye
            (-bw, 0.25 * b),        // right_beak
            (0.0, 0.55 * b),        // middle_beak
            (bw, 0.25 * b),         // left_beak
            (0.42 * a, -0.15 * b),  // left_eye
        ]
    }

    fn to_image(&self, (u, v): (f64, f64)) -> Point2 {
        let t = self.roll_deg.to_radians();
        let (s, c) = t.sin_cos();
        Point2::new(self.center.x + c * u - s * v, self.center.y + s * u + c * v)
    }

    fn to_local(&self, p: Point2) -> (f64, f64) {
        let t = self.roll_deg.to_radians();
        let (s, c) = t.sin_cos();
        let (dx, dy) = (p.x - self.center.x, p.y - self.center.y);
        (c * dx + s * dy, -s * dx + c * dy)
    }

    pub fn keypoints(&self) -> KeypointSet {
        KeypointSet::all_visible(self.local_keypoints().map(|q| self.to_image(q)))
    }

    /// Colour at a point, or `None` for background.
    fn shade(&self, p: Point2) -> Option<[f64; 3]> {
        let (u, v) = self.to_local(p);
        let (a, b) = self.axes;
        let kp = self.local_keypoints();
        let eye_r = 0.11 * a;
        for e in [kp[2], kp[6]] {
            if (u - e.0).powi(2) + (v - e.1).powi(2) <= eye_r * eye_r {
                return Some(EYE);
            }
        }
        let nostril = kp[1];
        if (u - nostril.0).powi(2) + (v - nostril.1).powi(2) <= (0.04 * a).powi(2) {
            return Some(NOSTRIL);
        }
        if in_kite(u, v, kp[0], kp[3], kp[4], kp[5]) {
            return Some(BEAK);
        }
        if (u / a).powi(2) + (v / b).powi(2) <= 1.0 {
            // darker towards the rim
            let r = ((u / a).powi(2) + (v / b).powi(2)).sqrt();
            let k = 1.0 - 0.12 * r;
            return Some(self.head_rgb.map(|c| c as f64 * k));
        }
        let hc = self.comb_ratio * 2.0 * b;
        let (cu, cv) = (0.0, -b - hc / 2.0 + 3.0);
        let (ca, cb) = (0.38 * a, hc / 2.0 + 3.0);
        if ((u - cu) / ca).powi(2) + ((v - cv) / cb).powi(2) <= 1.0 {
            return Some(COMB);
        }
        None
    }
}

/// Convex quadrilateral `top, left, bottom, right` (clockwise in image space).
fn in_kite(u: f64, v: f64, top: (f64, f64), left: (f64, f64), bottom: (f64, f64), right: (f64, f64)) -> bool {
    let quad = [top, right, bottom, left];
    let mut sign = 0.0;
    for i in 0..4 {
        let (p, q) = (quad[i], quad[(i + 1) % 4]);
        let cross = (q.0 - p.0) * (v - p.1) - (q.1 - p.1) * (u - p.0);
        if cross == 0.0 {
            continue;
        }
        if sign == 0.0 {
            sign = cross.signum();
        } else if cross.signum() != sign {
            return false;
        }
    }
    true
}

/// One rendered view with its ground truth.
#[derive(Clone, Debug)]
pub struct SynthView {
    pub image: RgbImage,
    /// Pixel-edge bounds of the drawn face (head, comb and beak).
    pub bbox: BoundingBox,
    pub keypoints: KeypointSet,
    pub params: FaceParams,
}

pub fn render_view(params: &FaceParams, width: u32, height: u32, noise: u8, rng: &mut impl Rng) -> Result<SynthView> {
    let mut image = RgbImage::new(width, height);
    let (mut x0, mut y0, mut x1, mut y1) = (u32::MAX, u32::MAX, 0, 0);
    for y in 0..height {
        for x in 0..width {
            let p = Point2::new(x as f64 + 0.5, y as f64 + 0.5);
            let base = match params.shade(p) {
                Some(c) => {
                    x0 = x0.min(x);
                    y0 = y0.min(y);
                    x1 = x1.max(x + 1);
                    y1 = y1.max(y + 1);
                    c
                }
                None => BACKGROUND,
            };
            let n = noise as i32;
            let px = base.map(|c| (c.round() as i32 + if n > 0 { rng.random_range(-n..=n) } else { 0 }).clamp(0, 255) as u8);
            image.put_pixel(x, y, Rgb(px));
        }
    }
    if x1 <= x0 || y1 <= y0 || x0 == 0 || y0 == 0 || x1 == width || y1 == height {
        return Err(Error::invalid("synthetic face does not fit inside the view"));
    }
    let bbox = BoundingBox::from_corners(x0 as f64, y0 as f64, x1 as f64, y1 as f64)?;
    let keypoints = params.keypoints();
    keypoints.validate(width as f64, height as f64)?;
    Ok(SynthView { image, bbox, keypoints, params: *params })
}

/// Per-chick constants.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthChick {
    pub chick_id: String,
    pub video_id: String,
    pub gender: Gender,
    pub trait_value: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSummary {
    pub config: SynthConfig,
    pub chicks: Vec<SynthChick>,
    pub frames: usize,
}

fn chick_params(cfg: &SynthConfig, chick: &SynthChick, rng: &mut ChaCha8Rng) -> FaceParams {
    let (w, h) = (cfg.view_width as f64, cfg.view_height as f64);
    let a = rng.random_range(33.0..38.0);
    let b = a * rng.random_range(0.85..0.95);
    let (comb_ratio, beak_ratio) = match cfg.feature {
        GenderFeature::CombHeight => (chick.trait_value, rng.random_range(0.18..0.26)),
        GenderFeature::BeakWidth => (rng.random_range(0.2..0.4), chick.trait_value),
    };
    let tint = rng.random_range(-15.0..15.0f64);
    FaceParams {
        center: Point2::new(w / 2.0, h * 0.6),
        axes: (a, b),
        roll_deg: 0.0,
        comb_ratio,
        beak_ratio,
        head_rgb: [(235.0 + tint * 0.3) as u8, (200.0 + tint) as u8, (60.0 + tint) as u8],
    }
}

/// Jitters position, scale and roll for one view of a chick.
fn view_params(cfg: &SynthConfig, base: &FaceParams, rng: &mut ChaCha8Rng) -> FaceParams {
    let s = rng.random_range(0.95..1.05);
    let roll = if cfg.max_roll_deg > 0.0 { rng.random_range(-cfg.max_roll_deg..cfg.max_roll_deg) } else { 0.0 };
    FaceParams {
        center: Point2::new(base.center.x + rng.random_range(-8.0..8.0), base.center.y + rng.random_range(-6.0..6.0)),
        axes: (base.axes.0 * s, base.axes.1 * s),
        roll_deg: roll,
        ..*base
    }
}

pub fn chicks(cfg: &SynthConfig) -> Vec<SynthChick> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    (0..cfg.ids)
        .map(|i| {
            let gender = if i % 2 == 0 { Gender::Female } else { Gender::Male };
            SynthChick {
                chick_id: format!("chick{i:04}"),
                video_id: format!("vid{i:04}"),
                gender,
                trait_value: cfg.sample_trait(gender, &mut rng),
            }
        })
        .collect()
}

/// Stacked frames of one chick with per-view ground truth.
pub fn render_chick(cfg: &SynthConfig, chick: &SynthChick, index: usize) -> Result<Vec<(RgbImage, Vec<SynthView>)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(index as u64 + 1));
    let base = chick_params(cfg, chick, &mut rng);
    let mut frames = Vec::with_capacity(cfg.frames_per_id);
    for _ in 0..cfg.frames_per_id {
        let mut stacked = RgbImage::new(cfg.view_width, cfg.view_height * VIEWS_PER_FRAME);
        let mut views = Vec::new();
        for v in 0..VIEWS_PER_FRAME {
            let params = view_params(cfg, &base, &mut rng);
            let view = render_view(&params, cfg.view_width, cfg.view_height, cfg.noise, &mut rng)?;
            image::imageops::replace(&mut stacked, &view.image, 0, (v * cfg.view_height) as i64);
            views.push(view);
        }
        frames.push((stacked, views));
    }
    Ok(frames)
}

/// Writes `raw/<video>_<idx>.png`, `labels.csv`, `annotations/<frame_id>.json`
/// (LabelMe, one per view, matching the ids produced by ingest) and
/// `synth.json`.
pub fn generate(cfg: &SynthConfig, out_dir: &Path) -> Result<SynthSummary> {
    cfg.validate()?;
    let chicks = chicks(cfg);
    let raw = out_dir.join("raw");
    let ann = out_dir.join("annotations");
    std::fs::create_dir_all(&raw)?;
    std::fs::create_dir_all(&ann)?;
    let indexed: Vec<(usize, &SynthChick)> = chicks.iter().enumerate().collect();
    let written = parallel::map(&indexed, |&(i, chick)| -> Result<usize> {
        let frames = render_chick(cfg, chick, i)?;
        for (f, (stacked, views)) in frames.iter().enumerate() {
            stacked.save(raw.join(format!("{}_{f}.png", chick.video_id)))?;
            for (v, view) in views.iter().enumerate() {
                let frame_id = format!("{}_{f}_v{v}", chick.video_id);
                let doc = LabelMeDocument::from_annotation(
                    &format!("../views/{frame_id}.png"),
                    cfg.view_width,
                    cfg.view_height,
                    Some(&view.bbox),
                    Some(&view.keypoints),
                );
                doc.save(&ann.join(format!("{frame_id}.json")))?;
            }
        }
        Ok(frames.len())
    });
    let mut frames = 0;
    for w in written {
        frames += w?;
    }
    let mut labels = csv::Writer::from_path(out_dir.join("labels.csv")).map_err(|e| Error::Io(e.into()))?;
    for c in &chicks {
        labels
            .serialize(VideoLabel { video_id: c.video_id.clone(), chick_id: c.chick_id.clone(), gender: c.gender.as_str().into() })
            .map_err(|e| Error::Io(e.into()))?;
    }
    labels.flush()?;
    let summary = SynthSummary { config: cfg.clone(), chicks, frames };
    let mut bytes = serde_json::to_vec_pretty(&summary)?;
    bytes.push(b'\n');
    std::fs::write(out_dir.join("synth.json"), bytes)?;
    Ok(summary)
}

/// Ground truth of a generated dataset keyed by view frame id.
pub fn load_annotations(out_dir: &Path) -> Result<BTreeMap<String, (BoundingBox, KeypointSet)>> {
    let mut out = BTreeMap::new();
    for entry in std::fs::read_dir(out_dir.join("annotations"))? {
        let path = entry?.path();
        if path.extension().and_then(|e| e.to_str()) != Some("json") {
            continue;
        }
        let doc = LabelMeDocument::load(&path)?;
        let id = path.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_string();
        if let (Some(b), Some(k)) = (doc.face_box()?, doc.keypoints()?) {
            out.insert(id, (b, k));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::KeypointName;

    fn params() -> FaceParams {
        FaceParams {
            center: Point2::new(80.0, 96.0),
            axes: (36.0, 32.0),
            roll_deg: 0.0,
            comb_ratio: 0.3,
            beak_ratio: 0.22,
            head_rgb: [235, 200, 60],
        }
    }

    #[test]
    fn keypoint_layout() {
        let k = params().keypoints();
        let p = |n| k.point(n);
        assert!(p(KeypointName::RightEye).x < p(KeypointName::LeftEye).x);
        assert!(p(KeypointName::UpperNose).y < p(KeypointName::RightEye).y);
        assert!(p(KeypointName::MiddleBeak).y > p(KeypointName::LeftBeak).y);
        assert_eq!(p(KeypointName::RightEye).y, p(KeypointName::LeftEye).y);
    }

    #[test]
    fn rendered_colours_match_keypoints() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut p = params();
        p.roll_deg = 9.0;
        let v = render_view(&p, 160, 160, 0, &mut rng).unwrap();
        let px = |n: KeypointName| {
            let q = v.keypoints.point(n);
            v.image.get_pixel(q.x as u32, q.y as u32).0
        };
        assert_eq!(px(KeypointName::LeftEye), [15, 12, 10]);
        assert_eq!(px(KeypointName::RightEye), [15, 12, 10]);
        assert_eq!(px(KeypointName::MiddleNose), [120, 70, 30]);
        assert!(v.bbox.contains(&v.keypoints.point(KeypointName::MiddleBeak)));
        // comb reaches above the head
        assert!(v.bbox.y < p.center.y - p.axes.1 - 5.0);
    }

    #[test]
    fn trait_distributions() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let disjoint = SynthConfig { separability: 1.0, ..Default::default() };
        let f = (0..500).map(|_| disjoint.sample_trait(Gender::Female, &mut rng)).fold(0.0f64, f64::max);
        let m = (0..500).map(|_| disjoint.sample_trait(Gender::Male, &mut rng)).fold(1.0f64, f64::min);
        assert!(f <= m);
        assert_eq!(SynthConfig { separability: 0.9, ..Default::default() }.bayes_accuracy(), 0.95);
    }

    #[test]
    fn chick_rendering_is_deterministic() {
        let cfg = SynthConfig { ids: 4, frames_per_id: 1, ..Default::default() };
        let c = chicks(&cfg);
        let a = render_chick(&cfg, &c[1], 1).unwrap();
        let b = render_chick(&cfg, &c[1], 1).unwrap();
        assert_eq!(a[0].0, b[0].0);
        assert_eq!(a[0].0.height(), 480);
    }
}
