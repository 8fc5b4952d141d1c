//! Cropped Full Face and Cropped Middle Face extraction from aligned frames.

use std::path::Path;

use image::RgbImage;
use serde::{Deserialize, Serialize};

use crate::dataset::CropKind;
use crate::geometry::{pose_gate, BoundingBox, KeypointName, KeypointSet, PoseDecision};
use crate::raster;
use crate::{Error, Result};

pub const DEFAULT_MASK_RADIUS_FACTOR: f64 = 0.25;
pub const DEFAULT_MARGIN_SCALE: f64 = 1.0;

const BEAK_POINTS: [KeypointName; 3] = [KeypointName::MiddleBeak, KeypointName::LeftBeak, KeypointName::RightBeak];

/// An aligned face region. `source_box` is the integral pixel rectangle the
/// image was cut from, in aligned-frame coordinates; keypoints are in crop
/// coordinates and visible ones lie inside `[0, w] x [0, h]`.
#[derive(Clone, Debug)]
pub struct FaceCrop {
    pub image: RgbImage,
    pub kind: CropKind,
    pub source_box: BoundingBox,
    pub keypoints: KeypointSet,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CropSidecar {
    pub kind: CropKind,
    pub source_box: BoundingBox,
    pub keypoints: KeypointSet,
}

impl FaceCrop {
    pub fn width(&self) -> u32 {
        self.image.width()
    }

    pub fn height(&self) -> u32 {
        self.image.height()
    }

    pub fn sidecar(&self) -> CropSidecar {
        CropSidecar { kind: self.kind, source_box: self.source_box, keypoints: self.keypoints }
    }

    /// Writes `<path>` as PNG and `<path>.json` (extension replaced) as sidecar.
    pub fn save(&self, png_path: &Path) -> Result<()> {
        self.image.save(png_path)?;
        let mut bytes = serde_json::to_vec_pretty(&self.sidecar())?;
        bytes.push(b'\n');
        std::fs::write(png_path.with_extension("json"), bytes)?;
        Ok(())
    }

    pub fn load(png_path: &Path) -> Result<FaceCrop> {
        let image = image::open(png_path)?.to_rgb8();
        let side: CropSidecar = serde_json::from_slice(&std::fs::read(png_path.with_extension("json"))?)?;
        Ok(FaceCrop { image, kind: side.kind, source_box: side.source_box, keypoints: side.keypoints })
    }
}

fn cut(image: &RgbImage, bbox: &BoundingBox, kps: &KeypointSet) -> Result<(RgbImage, BoundingBox, KeypointSet)> {
    let (x0, y0, w, h) = bbox
        .rasterize(image.width(), image.height())
        .ok_or_else(|| Error::FlaggedFrame("crop box has no pixels inside the image".into()))?;
    let source_box = BoundingBox { x: x0 as f64, y: y0 as f64, w: w as f64, h: h as f64 };
    Ok((raster::crop(image, x0, y0, w, h), source_box, kps.translate(-(x0 as f64), -(y0 as f64))))
}

/// Pixel-exact crop of the aligned face box.
pub fn crop_full_face(aligned_image: &RgbImage, aligned_box: &BoundingBox, aligned_kps: &KeypointSet) -> Result<FaceCrop> {
    aligned_box.validate()?;
    let frame = BoundingBox { x: 0.0, y: 0.0, w: aligned_image.width() as f64, h: aligned_image.height() as f64 };
    if !frame.contains_box(aligned_box, 1e-6) {
        return Err(Error::FlaggedFrame(format!("face box {aligned_box:?} extends outside the image")));
    }
    let (image, source_box, keypoints) = cut(aligned_image, aligned_box, aligned_kps)?;
    let inner = BoundingBox { x: 0.0, y: 0.0, w: source_box.w, h: source_box.h };
    if let Some((name, _)) = keypoints.iter().find(|(_, k)| k.visible && !inner.contains(&k.point)) {
        return Err(Error::FlaggedFrame(format!("visible keypoint {name} falls outside the face box")));
    }
    Ok(FaceCrop { image, kind: CropKind::Full, source_box, keypoints })
}

/// Horizontal eye extent in pixel-edge coordinates: `left_x` is the left
/// edge of the leftmost dark pixel around the image-left eye, `right_x` the
/// right edge of the rightmost dark pixel around the image-right eye.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EyeExtremes {
    pub left_x: i64,
    pub right_x: i64,
    /// Set when a mask held no foreground and the keypoint x was used.
    pub fallback: bool,
}

/// Otsu threshold over 8-bit values; pixels `<= t` form the dark class.
/// `None` when all values are equal.
pub fn otsu_threshold(values: &[u8]) -> Option<u8> {
    let mut hist = [0u64; 256];
    for &v in values {
        hist[v as usize] += 1;
    }
    let total = values.len() as f64;
    let lo = hist.iter().position(|&c| c > 0)?;
    let hi = hist.iter().rposition(|&c| c > 0)?;
    if lo == hi {
        return None;
    }
    let sum_all: f64 = hist.iter().enumerate().map(|(i, &c)| i as f64 * c as f64).sum();
    let (mut w0, mut sum0) = (0.0f64, 0.0f64);
    let mut best = (f64::NEG_INFINITY, lo as u8);
    for t in lo..hi {
        w0 += hist[t] as f64;
        sum0 += t as f64 * hist[t] as f64;
        let w1 = total - w0;
        if w0 == 0.0 || w1 == 0.0 {
            continue;
        }
        let m0 = sum0 / w0;
        let m1 = (sum_all - sum0) / w1;
        let between = w0 * w1 * (m0 - m1) * (m0 - m1);
        if between > best.0 {
            best = (between, t as u8);
        }
    }
    Some(best.1)
}

fn visible_eyes(kps: &KeypointSet) -> Result<(crate::geometry::Point2, crate::geometry::Point2)> {
    if !kps.is_visible(KeypointName::LeftEye) || !kps.is_visible(KeypointName::RightEye) {
        return Err(Error::Pose("both eyes must be visible".into()));
    }
    let a = kps.point(KeypointName::LeftEye);
    let b = kps.point(KeypointName::RightEye);
    Ok(if a.x <= b.x { (a, b) } else { (b, a) })
}

/// Binarizes the grayscale crop with Otsu's threshold computed inside two
/// eye discs of radius `mask_radius_factor * eye_distance`, then scans each
/// disc for its outermost dark pixel.
pub fn eye_extremes(full_crop: &FaceCrop, mask_radius_factor: f64) -> Result<EyeExtremes> {
    if !(mask_radius_factor > 0.0) {
        return Err(Error::invalid("mask radius factor must be positive"));
    }
    let (img_left, img_right) = visible_eyes(&full_crop.keypoints)?;
    let radius = mask_radius_factor * img_left.distance(&img_right);
    let gray = raster::to_gray(&full_crop.image);
    let (h, w) = gray.dim();

    let disc_pixels = |c: crate::geometry::Point2| {
        let x0 = ((c.x - radius).floor().max(0.0)) as usize;
        let y0 = ((c.y - radius).floor().max(0.0)) as usize;
        let x1 = ((c.x + radius).ceil().max(0.0) as usize).min(w);
        let y1 = ((c.y + radius).ceil().max(0.0) as usize).min(h);
        let mut px = Vec::new();
        for y in y0..y1 {
            for x in x0..x1 {
                let (dx, dy) = (x as f64 + 0.5 - c.x, y as f64 + 0.5 - c.y);
                if dx * dx + dy * dy <= radius * radius {
                    px.push((x, y, gray[[y, x]].round().clamp(0.0, 255.0) as u8));
                }
            }
        }
        px
    };
    let left_disc = disc_pixels(img_left);
    let right_disc = disc_pixels(img_right);
    let values: Vec<u8> = left_disc.iter().chain(&right_disc).map(|p| p.2).collect();

    let fallback = EyeExtremes {
        left_x: img_left.x.round() as i64,
        right_x: img_right.x.round() as i64,
        fallback: true,
    };
    let Some(t) = otsu_threshold(&values) else {
        return Ok(fallback);
    };
    let left = left_disc.iter().filter(|p| p.2 <= t).map(|p| p.0 as i64).min();
    let right = right_disc.iter().filter(|p| p.2 <= t).map(|p| p.0 as i64 + 1).max();
    let out = EyeExtremes {
        left_x: left.unwrap_or(fallback.left_x),
        right_x: right.unwrap_or(fallback.right_x),
        fallback: left.is_none() || right.is_none(),
    };
    if out.left_x >= out.right_x {
        return Ok(fallback);
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MiddleBox {
    /// In full-crop coordinates, clamped to the crop.
    pub bbox: BoundingBox,
    pub margin: f64,
    /// Set when the eye-to-border slack summed to zero and no margin was added.
    pub degenerate_margin: bool,
}

/// Box spanning the eye extremes horizontally (plus a symmetric margin) and
/// from `upper_nose` down to the lowest beak point.
///
/// The margin is `margin_scale * d_eye / (0.5 * (s_left + s_right))`, where
/// `s_left`/`s_right` are the distances from the eye extremes to the crop's
/// left and right borders.
pub fn middle_face_box(full_crop: &FaceCrop, extremes: &EyeExtremes, margin_scale: f64) -> Result<MiddleBox> {
    if !(margin_scale >= 0.0) || !margin_scale.is_finite() {
        return Err(Error::invalid("margin scale must be a finite non-negative number"));
    }
    let kps = &full_crop.keypoints;
    let (img_left, img_right) = visible_eyes(kps)?;
    if !kps.is_visible(KeypointName::UpperNose) {
        return Err(Error::Pose("upper_nose must be visible".into()));
    }
    let bottom = BEAK_POINTS
        .iter()
        .filter(|&&k| kps.is_visible(k))
        .map(|&k| kps.point(k).y)
        .fold(f64::NEG_INFINITY, f64::max);
    if bottom == f64::NEG_INFINITY {
        return Err(Error::Pose("at least one beak point must be visible".into()));
    }
    let top = kps.point(KeypointName::UpperNose).y;

    let width = full_crop.width() as f64;
    let height = full_crop.height() as f64;
    let d_eye = img_left.distance(&img_right);
    let s_left = extremes.left_x as f64;
    let s_right = width - extremes.right_x as f64;
    let slack = 0.5 * (s_left + s_right);
    let (margin, degenerate_margin) = if slack <= 0.0 { (0.0, true) } else { (margin_scale * d_eye / slack, false) };

    let x0 = (extremes.left_x as f64 - margin).max(0.0);
    let x1 = (extremes.right_x as f64 + margin).min(width);
    let y0 = top.max(0.0);
    let y1 = bottom.min(height);
    if !(x1 > x0 && y1 > y0) {
        return Err(Error::FlaggedFrame(format!(
            "middle face box is empty (x {x0:.1}..{x1:.1}, y {y0:.1}..{y1:.1})"
        )));
    }
    Ok(MiddleBox {
        bbox: BoundingBox { x: x0, y: y0, w: x1 - x0, h: y1 - y0 },
        margin,
        degenerate_margin,
    })
}

#[derive(Clone, Debug)]
pub struct MiddleCrop {
    pub crop: FaceCrop,
    pub extremes: EyeExtremes,
    pub middle_box: MiddleBox,
}

/// Cuts the middle face out of a full-face crop (or re-cuts a middle crop).
/// Keypoints falling outside the middle region are marked invisible.
pub fn crop_middle_face(full_crop: &FaceCrop, margin_scale: f64, mask_radius_factor: f64) -> Result<MiddleCrop> {
    if pose_gate(&full_crop.keypoints) == PoseDecision::Reject {
        return Err(Error::Pose("eyes and beak corners must be visible".into()));
    }
    let extremes = eye_extremes(full_crop, mask_radius_factor)?;
    let middle_box = middle_face_box(full_crop, &extremes, margin_scale)?;
    let (image, local_box, kps) = cut(&full_crop.image, &middle_box.bbox, &full_crop.keypoints)?;

    let inner = BoundingBox { x: 0.0, y: 0.0, w: local_box.w, h: local_box.h };
    for name in [KeypointName::UpperNose, KeypointName::MiddleNose, KeypointName::MiddleBeak] {
        let k = kps.get(name);
        if k.visible && !inner.contains(&k.point) {
            return Err(Error::FlaggedFrame(format!("{name} falls outside the middle face box")));
        }
    }
    let mut keypoints = kps;
    for name in KeypointName::ALL {
        let k = keypoints.get_mut(name);
        if k.visible && !inner.contains(&k.point) {
            k.visible = false;
        }
    }
    let source_box = BoundingBox {
        x: full_crop.source_box.x + local_box.x,
        y: full_crop.source_box.y + local_box.y,
        w: local_box.w,
        h: local_box.h,
    };
    Ok(MiddleCrop {
        crop: FaceCrop { image, kind: CropKind::Middle, source_box, keypoints },
        extremes,
        middle_box,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Point2;
    use image::Rgb;

    /// White canvas with two black discs; pixel (x, y) is dark when its centre
    /// lies within `r` of a disc centre.
    fn two_discs(w: u32, h: u32, cy: f64, xs: [f64; 2], r: f64) -> RgbImage {
        let mut img = RgbImage::from_pixel(w, h, Rgb([255, 255, 255]));
        for (x, y, p) in img.enumerate_pixels_mut() {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            if xs.iter().any(|&cx| (px - cx).powi(2) + (py - cy).powi(2) <= r * r) {
                *p = Rgb([0, 0, 0]);
            }
        }
        img
    }

    fn synthetic_crop(img: RgbImage, eyes: [f64; 2], eye_y: f64) -> FaceCrop {
        let (w, h) = img.dimensions();
        let mut k = KeypointSet::all_visible([Point2::new(50.0, 30.0); 7]);
        k.set(KeypointName::RightEye, Point2::new(eyes[0], eye_y), true);
        k.set(KeypointName::LeftEye, Point2::new(eyes[1], eye_y), true);
        k.set(KeypointName::UpperNose, Point2::new(50.0, 10.0), true);
        k.set(KeypointName::MiddleNose, Point2::new(50.0, 45.0), true);
        k.set(KeypointName::RightBeak, Point2::new(40.0, 60.0), true);
        k.set(KeypointName::LeftBeak, Point2::new(60.0, 62.0), true);
        k.set(KeypointName::MiddleBeak, Point2::new(50.0, 70.0), true);
        FaceCrop {
            image: img,
            kind: CropKind::Full,
            source_box: BoundingBox { x: 0.0, y: 0.0, w: w as f64, h: h as f64 },
            keypoints: k,
        }
    }

    /// Exhaustive scan oracle: outermost dark pixels near each disc.
    fn scan_oracle(img: &RgbImage, split_x: u32) -> (i64, i64) {
        let mut left = i64::MAX;
        let mut right = i64::MIN;
        for (x, _, p) in img.enumerate_pixels() {
            if p.0[0] < 128 {
                if x < split_x {
                    left = left.min(x as i64);
                } else {
                    right = right.max(x as i64 + 1);
                }
            }
        }
        (left, right)
    }

    #[test]
    fn extremes_of_two_discs() {
        let img = two_discs(100, 100, 20.0, [20.0, 80.0], 5.0);
        assert_eq!(scan_oracle(&img, 50), (15, 85));
        let crop = synthetic_crop(img, [20.0, 80.0], 20.0);
        let e = eye_extremes(&crop, 0.25).unwrap();
        assert_eq!((e.left_x, e.right_x, e.fallback), (15, 85, false));
        assert_eq!(eye_extremes(&crop, 0.25).unwrap(), e);
    }

    #[test]
    fn white_eye_region_falls_back() {
        let img = RgbImage::from_pixel(100, 100, Rgb([255, 255, 255]));
        let crop = synthetic_crop(img, [20.3, 79.6], 20.0);
        let e = eye_extremes(&crop, 0.25).unwrap();
        assert_eq!((e.left_x, e.right_x, e.fallback), (20, 80, true));
    }

    #[test]
    fn margin_formula() {
        let img = two_discs(100, 100, 20.0, [15.0, 85.0], 5.0);
        let mut crop = synthetic_crop(img, [15.0, 85.0], 20.0);
        let ex = EyeExtremes { left_x: 15, right_x: 85, fallback: false };
        let mb = middle_face_box(&crop, &ex, 1.0).unwrap();
        // 70 / (0.5 * (15 + 15))
        assert!((mb.margin - 70.0 / 15.0).abs() < 1e-12);
        assert!((mb.bbox.x - (15.0 - 70.0 / 15.0)).abs() < 1e-12);
        assert!((mb.bbox.right() - (85.0 + 70.0 / 15.0)).abs() < 1e-12);
        assert!((mb.bbox.x - 10.333).abs() < 1e-3 && (mb.bbox.right() - 89.667).abs() < 1e-3);

        let mb0 = middle_face_box(&crop, &ex, 0.0).unwrap();
        assert_eq!((mb0.bbox.x, mb0.bbox.right()), (15.0, 85.0));
        assert_eq!(mb0.bbox.y, 10.0);
        assert_eq!(mb0.bbox.h, 70.0 - 10.0);

        let full = EyeExtremes { left_x: 0, right_x: 100, fallback: false };
        let deg = middle_face_box(&crop, &full, 1.0).unwrap();
        assert!(deg.degenerate_margin && deg.margin == 0.0);

        crop.keypoints.get_mut(KeypointName::UpperNose).visible = false;
        assert!(matches!(middle_face_box(&crop, &ex, 1.0), Err(Error::Pose(_))));
    }

    #[test]
    fn full_crop_examples() {
        let mut img = RgbImage::new(100, 80);
        img.put_pixel(3, 4, Rgb([9, 9, 9]));
        let k = KeypointSet::all_visible([Point2::new(10.0, 10.0); 7]);
        let whole = BoundingBox::new(0.0, 0.0, 100.0, 80.0).unwrap();
        let c = crop_full_face(&img, &whole, &k).unwrap();
        assert_eq!(c.image, img);

        let big = RgbImage::new(300, 300);
        let b = BoundingBox::new(10.0, 20.0, 100.0, 80.0).unwrap();
        let k = KeypointSet::all_visible([Point2::new(10.0, 20.0); 7]);
        let c = crop_full_face(&big, &b, &k).unwrap();
        assert_eq!(c.image.dimensions(), (100, 80));
        assert_eq!(c.keypoints.point(KeypointName::LeftEye), Point2::new(0.0, 0.0));

        let outside = BoundingBox::new(250.0, 250.0, 100.0, 80.0).unwrap();
        assert!(matches!(crop_full_face(&big, &outside, &k), Err(Error::FlaggedFrame(_))));
    }

    #[test]
    fn middle_of_middle_is_stable_at_zero_margin() {
        let img = two_discs(100, 100, 20.0, [20.0, 80.0], 5.0);
        let crop = synthetic_crop(img, [20.0, 80.0], 20.0);
        let m1 = crop_middle_face(&crop, 0.0, 0.25).unwrap();
        assert_eq!((m1.middle_box.bbox.x, m1.middle_box.bbox.right()), (15.0, 85.0));
        let m2 = crop_middle_face(&m1.crop, 0.0, 0.25).unwrap();
        assert_eq!(m2.crop.image.dimensions(), m1.crop.image.dimensions());
        assert_eq!((m2.middle_box.bbox.x, m2.middle_box.bbox.y), (0.0, 0.0));
        assert_eq!(m2.crop.source_box, m1.crop.source_box);
        // translation of keypoints
        let d = m1.crop.source_box;
        let kp = crop.keypoints.point(KeypointName::MiddleNose);
        assert_eq!(m1.crop.keypoints.point(KeypointName::MiddleNose), Point2::new(kp.x - d.x, kp.y - d.y));
    }

    #[test]
    fn otsu_two_levels() {
        let v: Vec<u8> = [10u8; 30].into_iter().chain([200u8; 70]).collect();
        let t = otsu_threshold(&v).unwrap();
        assert!((10..200).contains(&t));
        assert_eq!(otsu_threshold(&[5, 5, 5]), None);
    }
}
