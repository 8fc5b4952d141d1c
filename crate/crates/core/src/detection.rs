//! Face localization: confidence gating, IoU, greedy NMS and letterboxing
//! around a pluggable detector model.

use std::cmp::Ordering;
use std::collections::VecDeque;

use image::{Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use crate::geometry::BoundingBox;
use crate::raster;
use crate::{Error, Result};

/// Letterbox padding value.
pub const PAD_VALUE: u8 = 114;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    #[serde(rename = "box")]
    pub bbox: BoundingBox,
    pub confidence: f64,
    pub class_id: u32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DetectorConfig {
    pub input_size: u32,
    pub conf_threshold: f64,
    pub iou_threshold: f64,
    pub model_ref: String,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        DetectorConfig {
            input_size: 640,
            conf_threshold: 0.8,
            iou_threshold: 0.5,
            model_ref: "blob".to_string(),
        }
    }
}

impl DetectorConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = |v: f64| v > 0.0 && v <= 1.0;
        if self.input_size == 0 || !unit(self.conf_threshold) || !unit(self.iou_threshold) {
            return Err(Error::invalid(format!("invalid detector config {self:?}")));
        }
        Ok(())
    }
}

/// A trained face detector. `infer` receives the letterboxed square input
/// and returns raw `(box, confidence, class)` triples in that image's
/// coordinates.
pub trait FaceDetector: Send + Sync {
    fn identity(&self) -> String;
    fn infer(&self, input: &RgbImage) -> Result<Vec<Detection>>;
}

pub fn iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let iw = (a.right().min(b.right()) - a.x.max(b.x)).max(0.0);
    let ih = (a.bottom().min(b.bottom()) - a.y.max(b.y)).max(0.0);
    let inter = iw * ih;
    if inter == 0.0 {
        return 0.0;
    }
    (inter / (a.area() + b.area() - inter)).clamp(0.0, 1.0)
}

/// Greedy non-maximum suppression. Candidates are visited by descending
/// confidence (ties keep input order); a candidate is dropped when its IoU
/// with an already kept box is strictly greater than `iou_threshold`.
pub fn nms(dets: &[Detection], iou_threshold: f64) -> Vec<Detection> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&i, &j| {
        dets[j]
            .confidence
            .partial_cmp(&dets[i].confidence)
            .unwrap_or(Ordering::Equal)
    });
    let mut kept: Vec<Detection> = Vec::new();
    for i in order {
        if kept.iter().all(|k| iou(&k.bbox, &dets[i].bbox) <= iou_threshold) {
            kept.push(dets[i]);
        }
    }
    kept
}

#[derive(Clone, Debug)]
pub struct Letterbox {
    pub image: RgbImage,
    pub scale: f64,
    /// Left and top padding in the letterboxed image.
    pub pad: (f64, f64),
}

impl Letterbox {
    pub fn to_original(&self, x: f64, y: f64) -> (f64, f64) {
        ((x - self.pad.0) / self.scale, (y - self.pad.1) / self.scale)
    }

    pub fn to_letterboxed(&self, x: f64, y: f64) -> (f64, f64) {
        (x * self.scale + self.pad.0, y * self.scale + self.pad.1)
    }

    pub fn box_to_original(&self, b: &BoundingBox) -> BoundingBox {
        let (x, y) = self.to_original(b.x, b.y);
        BoundingBox { x, y, w: b.w / self.scale, h: b.h / self.scale }
    }
}

/// Aspect-preserving resize into a `size x size` square, centred on gray
/// padding.
pub fn letterbox(image: &RgbImage, size: u32) -> Result<Letterbox> {
    let (w, h) = image.dimensions();
    if w == 0 || h == 0 || size == 0 {
        return Err(Error::invalid("letterbox needs a non-empty image and size"));
    }
    let scale = size as f64 / w.max(h) as f64;
    let nw = ((w as f64 * scale).round() as u32).clamp(1, size);
    let nh = ((h as f64 * scale).round() as u32).clamp(1, size);
    let dx = (size - nw) / 2;
    let dy = (size - nh) / 2;
    let resized = raster::resize(image, nw, nh);
    let mut canvas = RgbImage::from_pixel(size, size, Rgb([PAD_VALUE; 3]));
    image::imageops::replace(&mut canvas, &resized, dx as i64, dy as i64);
    Ok(Letterbox { image: canvas, scale, pad: (dx as f64, dy as f64) })
}

/// Letterbox, infer, gate by confidence, suppress, map back; returns the
/// single most confident face.
pub fn detect_face(image: &RgbImage, cfg: &DetectorConfig, detector: &dyn FaceDetector) -> Result<Option<Detection>> {
    cfg.validate()?;
    let lb = letterbox(image, cfg.input_size)?;
    let raw = detector.infer(&lb.image).map_err(|e| Error::Detector {
        model: detector.identity(),
        message: e.to_string(),
    })?;
    let confident: Vec<Detection> = raw
        .into_iter()
        .filter(|d| d.confidence >= cfg.conf_threshold && d.bbox.w > 0.0 && d.bbox.h > 0.0)
        .collect();
    Ok(nms(&confident, cfg.iou_threshold)
        .first()
        .map(|d| Detection { bbox: lb.box_to_original(&d.bbox), ..*d }))
}

/// One line of the normalized `class cx cy w h` training format.
pub fn yolo_line(bbox: &BoundingBox, image_w: u32, image_h: u32, class_id: u32) -> String {
    let (w, h) = (image_w as f64, image_h as f64);
    let c = bbox.center();
    format!(
        "{class_id} {:.6} {:.6} {:.6} {:.6}",
        (c.x / w).clamp(0.0, 1.0),
        (c.y / h).clamp(0.0, 1.0),
        (bbox.w / w).clamp(0.0, 1.0),
        (bbox.h / h).clamp(0.0, 1.0)
    )
}

/// Reference detector for bright, warm-coloured subjects on a cooler
/// background: thresholds warm pixels, labels 4-connected components and
/// reports each component's bounding box. Confidence is the component's share
/// of all warm pixels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ColorBlobDetector {
    pub min_red: u8,
    pub min_red_minus_blue: i16,
    /// Components smaller than this fraction of the image are ignored.
    pub min_area_fraction: f64,
}

impl Default for ColorBlobDetector {
    fn default() -> Self {
        ColorBlobDetector { min_red: 150, min_red_minus_blue: 60, min_area_fraction: 0.002 }
    }
}

impl ColorBlobDetector {
    fn is_warm(&self, p: &Rgb<u8>) -> bool {
        let [r, _, b] = p.0;
        r >= self.min_red && r as i16 - b as i16 >= self.min_red_minus_blue
    }
}

impl FaceDetector for ColorBlobDetector {
    fn identity(&self) -> String {
        format!("blob(r>={},r-b>={})", self.min_red, self.min_red_minus_blue)
    }

    fn infer(&self, input: &RgbImage) -> Result<Vec<Detection>> {
        let (w, h) = (input.width() as usize, input.height() as usize);
        let mask: Vec<bool> = input.pixels().map(|p| self.is_warm(p)).collect();
        let total = mask.iter().filter(|&&m| m).count();
        if total == 0 {
            return Ok(Vec::new());
        }
        let min_area = (self.min_area_fraction * (w * h) as f64).max(1.0) as usize;
        let mut seen = vec![false; w * h];
        let mut out = Vec::new();
        let mut queue = VecDeque::new();
        for start in 0..w * h {
            if !mask[start] || seen[start] {
                continue;
            }
            seen[start] = true;
            queue.push_back(start);
            let (mut x0, mut y0, mut x1, mut y1, mut area) = (usize::MAX, usize::MAX, 0, 0, 0usize);
            while let Some(i) = queue.pop_front() {
                let (x, y) = (i % w, i / w);
                area += 1;
                x0 = x0.min(x);
                y0 = y0.min(y);
                x1 = x1.max(x);
                y1 = y1.max(y);
                let mut push = |j: usize| {
                    if mask[j] && !seen[j] {
                        seen[j] = true;
                        queue.push_back(j);
                    }
                };
                if x > 0 {
                    push(i - 1);
                }
                if x + 1 < w {
                    push(i + 1);
                }
                if y > 0 {
                    push(i - w);
                }
                if y + 1 < h {
                    push(i + w);
                }
            }
            if area >= min_area {
                out.push(Detection {
                    bbox: BoundingBox {
                        x: x0 as f64,
                        y: y0 as f64,
                        w: (x1 - x0 + 1) as f64,
                        h: (y1 - y0 + 1) as f64,
                    },
                    confidence: area as f64 / total as f64,
                    class_id: 0,
                });
            }
        }
        Ok(out)
    }
}

/// Resolves a `model_ref` to a detector. Built in: `blob` (default
/// thresholds) and `blob:<min_red>,<min_red_minus_blue>`.
pub fn load_detector(model_ref: &str) -> Result<Box<dyn FaceDetector>> {
    match model_ref.split_once(':') {
        None if model_ref == "blob" => Ok(Box::new(ColorBlobDetector::default())),
        Some(("blob", params)) => {
            let mut parts = params.split(',').map(str::trim);
            let parse_err = || Error::Detector {
                model: model_ref.to_string(),
                message: "expected blob:<min_red>,<min_red_minus_blue>".into(),
            };
            let min_red = parts.next().and_then(|v| v.parse().ok()).ok_or_else(parse_err)?;
            let min_rb = parts.next().and_then(|v| v.parse().ok()).ok_or_else(parse_err)?;
            Ok(Box::new(ColorBlobDetector { min_red, min_red_minus_blue: min_rb, ..Default::default() }))
        }
        _ => Err(Error::Detector {
            model: model_ref.to_string(),
            message: "unknown detector model; implement FaceDetector to plug in external weights".into(),
        }),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bx(x: f64, y: f64, w: f64, h: f64) -> BoundingBox {
        BoundingBox::new(x, y, w, h).unwrap()
    }

    fn det(b: BoundingBox, c: f64) -> Detection {
        Detection { bbox: b, confidence: c, class_id: 0 }
    }

    struct Fixed(Vec<Detection>);
    impl FaceDetector for Fixed {
        fn identity(&self) -> String {
            "fixed".into()
        }
        fn infer(&self, _: &RgbImage) -> Result<Vec<Detection>> {
            Ok(self.0.clone())
        }
    }

    struct Broken;
    impl FaceDetector for Broken {
        fn identity(&self) -> String {
            "broken-v1".into()
        }
        fn infer(&self, _: &RgbImage) -> Result<Vec<Detection>> {
            Err(Error::Model("weights missing".into()))
        }
    }

    #[test]
    fn iou_examples() {
        let a = bx(0., 0., 1., 1.);
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&a, &bx(5., 5., 1., 1.)), 0.0);
        assert!((iou(&a, &bx(0.5, 0., 1., 1.)) - 1.0 / 3.0).abs() < 1e-12);
        // touching edges
        assert_eq!(iou(&a, &bx(1., 0., 1., 1.)), 0.0);
    }

    #[test]
    fn nms_examples() {
        assert!(nms(&[], 0.5).is_empty());
        let b = bx(0., 0., 10., 10.);
        let kept = nms(&[det(b, 0.8), det(b, 0.9)], 0.5);
        assert_eq!(kept.len(), 1);
        assert_eq!(kept[0].confidence, 0.9);
    }

    #[test]
    fn nms_keeps_at_threshold_and_breaks_ties_by_input_order() {
        // IoU exactly 1/3
        let a = det(bx(0., 0., 1., 1.), 0.9);
        let b = det(bx(0.5, 0., 1., 1.), 0.7);
        assert_eq!(nms(&[a, b], 1.0 / 3.0).len(), 2);
        assert_eq!(nms(&[a, b], 0.3).len(), 1);

        let first = det(bx(0., 0., 4., 4.), 0.5);
        let second = det(bx(0., 0., 4., 4.), 0.5);
        let second = Detection { class_id: 7, ..second };
        assert_eq!(nms(&[first, second], 0.5)[0].class_id, 0);
    }

    #[test]
    fn letterbox_examples() {
        let lb = letterbox(&RgbImage::new(200, 100), 640).unwrap();
        assert_eq!(lb.scale, 3.2);
        assert_eq!(lb.pad, (0.0, 160.0));
        assert_eq!(lb.image.dimensions(), (640, 640));
        assert_eq!(lb.image.get_pixel(5, 5).0, [PAD_VALUE; 3]);

        let sq = letterbox(&RgbImage::new(320, 320), 640).unwrap();
        assert_eq!((sq.scale, sq.pad), (2.0, (0.0, 0.0)));

        let (x, y) = lb.to_letterboxed(200.0, 100.0);
        let (bx_, by) = lb.to_original(x, y);
        assert!((bx_ - 200.0).abs() < 1e-6 && (by - 100.0).abs() < 1e-6);
    }

    #[test]
    fn detect_face_examples() {
        let cfg = DetectorConfig::default();
        let img = RgbImage::new(200, 100);
        assert_eq!(detect_face(&img, &cfg, &Fixed(vec![])).unwrap(), None);

        // a box at (64, 224, 320, 160) in the 640 letterbox maps to
        // ((64-0)/3.2, (224-160)/3.2, 320/3.2, 160/3.2) = (20, 20, 100, 50)
        let one = Fixed(vec![det(bx(64., 224., 320., 160.), 0.85)]);
        let d = detect_face(&img, &cfg, &one).unwrap().unwrap();
        assert_eq!(d.bbox, bx(20., 20., 100., 50.));
        assert_eq!(d.confidence, 0.85);

        // IoU of these two is 0.7
        let a = bx(0., 0., 100., 100.);
        let b = bx(0., 0., 100., 70.);
        assert!((iou(&a, &b) - 0.7).abs() < 1e-12);
        let two = Fixed(vec![det(b, 0.85), det(a, 0.9)]);
        let d = detect_face(&img, &cfg, &two).unwrap().unwrap();
        assert_eq!(d.confidence, 0.9);

        let low = Fixed(vec![det(a, 0.79)]);
        assert_eq!(detect_face(&img, &cfg, &low).unwrap(), None);
    }

    #[test]
    fn detector_errors_carry_identity() {
        let err = detect_face(&RgbImage::new(10, 10), &DetectorConfig::default(), &Broken).unwrap_err();
        assert!(err.to_string().contains("broken-v1"));
        assert!(load_detector("yolo.onnx").is_err());
        assert!(load_detector("blob").is_ok());
        assert!(load_detector("blob:140,50").is_ok());
    }

    #[test]
    fn blob_finds_warm_square() {
        let mut img = RgbImage::from_pixel(64, 64, Rgb([90, 130, 100]));
        for y in 10..30 {
            for x in 20..50 {
                img.put_pixel(x, y, Rgb([240, 200, 60]));
            }
        }
        let dets = ColorBlobDetector::default().infer(&img).unwrap();
        assert_eq!(dets.len(), 1);
        assert_eq!(dets[0].bbox, bx(20., 10., 30., 20.));
        assert_eq!(dets[0].confidence, 1.0);
    }

    #[test]
    fn yolo_line_format() {
        let l = yolo_line(&bx(10., 20., 30., 40.), 100, 200, 0);
        assert_eq!(l, "0 0.250000 0.200000 0.300000 0.200000");
    }
}
