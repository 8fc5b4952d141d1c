//! Seven-keypoint face schema, eye-line alignment and the yaw visibility gate.
//!
//! Coordinates are image coordinates with `y` increasing downward.

mod labelme;

pub use labelme::{LabelMeDocument, LabelMeShape};

use std::fmt;

use image::{Rgb, RgbImage};
use serde::de::{self, Deserializer, MapAccess, Visitor};
use serde::ser::{SerializeMap, SerializeStruct, Serializer};
use serde::{Deserialize, Serialize};

use crate::raster;
use crate::{Error, Result};

/// Eyes closer than this are treated as coincident.
pub const MIN_EYE_DISTANCE: f64 = 2.0;

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Point2 {
    pub x: f64,
    pub y: f64,
}

impl Point2 {
    pub const fn new(x: f64, y: f64) -> Self {
        Point2 { x, y }
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }

    pub fn distance(&self, other: &Point2) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }
}

/// Axis-aligned box: top-left corner plus size.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl BoundingBox {
    pub fn new(x: f64, y: f64, w: f64, h: f64) -> Result<Self> {
        let b = BoundingBox { x, y, w, h };
        b.validate()?;
        Ok(b)
    }

    pub fn from_corners(x0: f64, y0: f64, x1: f64, y1: f64) -> Result<Self> {
        Self::new(x0, y0, x1 - x0, y1 - y0)
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.x, self.y, self.w, self.h].iter().all(|v| v.is_finite());
        if !finite || self.w <= 0.0 || self.h <= 0.0 {
            return Err(Error::invalid(format!("invalid box {self:?}")));
        }
        Ok(())
    }

    pub fn right(&self) -> f64 {
        self.x + self.w
    }

    pub fn bottom(&self) -> f64 {
        self.y + self.h
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn center(&self) -> Point2 {
        Point2::new(self.x + self.w / 2.0, self.y + self.h / 2.0)
    }

    pub fn corners(&self) -> [Point2; 4] {
        [
            Point2::new(self.x, self.y),
            Point2::new(self.right(), self.y),
            Point2::new(self.x, self.bottom()),
            Point2::new(self.right(), self.bottom()),
        ]
    }

    /// Closed containment test.
    pub fn contains(&self, p: &Point2) -> bool {
        p.x >= self.x && p.x <= self.right() && p.y >= self.y && p.y <= self.bottom()
    }

    pub fn contains_box(&self, other: &BoundingBox, tol: f64) -> bool {
        other.x >= self.x - tol
            && other.y >= self.y - tol
            && other.right() <= self.right() + tol
            && other.bottom() <= self.bottom() + tol
    }

    /// Intersection, or `None` when the overlap has no area.
    pub fn intersect(&self, other: &BoundingBox) -> Option<BoundingBox> {
        let x0 = self.x.max(other.x);
        let y0 = self.y.max(other.y);
        let x1 = self.right().min(other.right());
        let y1 = self.bottom().min(other.bottom());
        (x1 > x0 && y1 > y0).then(|| BoundingBox { x: x0, y: y0, w: x1 - x0, h: y1 - y0 })
    }

    /// Pixel rectangle `(x0, y0, w, h)`: min corner floored, max corner ceiled,
    /// then clipped to `[0, width) x [0, height)`.
    pub fn rasterize(&self, width: u32, height: u32) -> Option<(u32, u32, u32, u32)> {
        let x0 = self.x.floor().max(0.0);
        let y0 = self.y.floor().max(0.0);
        let x1 = self.right().ceil().min(width as f64);
        let y1 = self.bottom().ceil().min(height as f64);
        (x1 > x0 && y1 > y0).then(|| (x0 as u32, y0 as u32, (x1 - x0) as u32, (y1 - y0) as u32))
    }
}

/// The seven canonical facial keypoints, in canonical order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KeypointName {
    UpperNose,
    MiddleNose,
    RightEye,
    RightBeak,
    MiddleBeak,
    LeftBeak,
    LeftEye,
}

impl KeypointName {
    pub const ALL: [KeypointName; 7] = [
        KeypointName::UpperNose,
        KeypointName::MiddleNose,
        KeypointName::RightEye,
        KeypointName::RightBeak,
        KeypointName::MiddleBeak,
        KeypointName::LeftBeak,
        KeypointName::LeftEye,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn as_str(self) -> &'static str {
        match self {
            KeypointName::UpperNose => "upper_nose",
            KeypointName::MiddleNose => "middle_nose",
            KeypointName::RightEye => "right_eye",
            KeypointName::RightBeak => "right_beak",
            KeypointName::MiddleBeak => "middle_beak",
            KeypointName::LeftBeak => "left_beak",
            KeypointName::LeftEye => "left_eye",
        }
    }

    pub fn parse(s: &str) -> Option<KeypointName> {
        Self::ALL.into_iter().find(|k| k.as_str() == s)
    }
}

impl fmt::Display for KeypointName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Keypoint {
    pub point: Point2,
    pub visible: bool,
}

/// Exactly seven named keypoints with visibility, in canonical order.
///
/// Serialized as `{"points": {name: {x, y}, ...}, "visible": {name: bool, ...}}`
/// with names in canonical order.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct KeypointSet {
    entries: [Keypoint; 7],
}

impl KeypointSet {
    pub fn new(entries: [Keypoint; 7]) -> Self {
        KeypointSet { entries }
    }

    pub fn all_visible(points: [Point2; 7]) -> Self {
        KeypointSet {
            entries: points.map(|point| Keypoint { point, visible: true }),
        }
    }

    pub fn get(&self, name: KeypointName) -> &Keypoint {
        &self.entries[name.index()]
    }

    pub fn get_mut(&mut self, name: KeypointName) -> &mut Keypoint {
        &mut self.entries[name.index()]
    }

    pub fn point(&self, name: KeypointName) -> Point2 {
        self.entries[name.index()].point
    }

    pub fn is_visible(&self, name: KeypointName) -> bool {
        self.entries[name.index()].visible
    }

    pub fn set(&mut self, name: KeypointName, point: Point2, visible: bool) {
        self.entries[name.index()] = Keypoint { point, visible };
    }

    pub fn iter(&self) -> impl Iterator<Item = (KeypointName, &Keypoint)> {
        KeypointName::ALL.into_iter().zip(self.entries.iter())
    }

    pub fn entries(&self) -> &[Keypoint; 7] {
        &self.entries
    }

    /// Applies `f` to every point, visible or not.
    pub fn map_points(&self, f: impl Fn(Point2) -> Point2) -> KeypointSet {
        KeypointSet {
            entries: self.entries.map(|k| Keypoint { point: f(k.point), visible: k.visible }),
        }
    }

    pub fn translate(&self, dx: f64, dy: f64) -> KeypointSet {
        self.map_points(|p| Point2::new(p.x + dx, p.y + dy))
    }

    /// Checks finiteness and that visible points lie within `[0,w] x [0,h]`.
    pub fn validate(&self, width: f64, height: f64) -> Result<()> {
        for (name, k) in self.iter() {
            if !k.point.is_finite() {
                return Err(Error::invalid(format!("keypoint {name} is not finite")));
            }
            if k.visible && (k.point.x < 0.0 || k.point.y < 0.0 || k.point.x > width || k.point.y > height) {
                return Err(Error::invalid(format!(
                    "visible keypoint {name} at ({:.2}, {:.2}) lies outside {width}x{height}",
                    k.point.x, k.point.y
                )));
            }
        }
        Ok(())
    }
}

struct NamedPoints<'a>(&'a KeypointSet);
struct NamedVisibility<'a>(&'a KeypointSet);

impl Serialize for NamedPoints<'_> {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let mut m = s.serialize_map(Some(7))?;
        for (name, k) in self.0.iter() {
            m.serialize_entry(name.as_str(), &k.point)?;
        }
        m.end()
    }
}

impl Serialize for NamedVisibility<'_> {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let mut m = s.serialize_map(Some(7))?;
        for (name, k) in self.0.iter() {
            m.serialize_entry(name.as_str(), &k.visible)?;
        }
        m.end()
    }
}

impl Serialize for KeypointSet {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let mut st = s.serialize_struct("KeypointSet", 2)?;
        st.serialize_field("points", &NamedPoints(self))?;
        st.serialize_field("visible", &NamedVisibility(self))?;
        st.end()
    }
}

fn collect_named<'de, V, A>(mut map: A) -> std::result::Result<[Option<V>; 7], A::Error>
where
    V: Deserialize<'de>,
    A: MapAccess<'de>,
{
    let mut out: [Option<V>; 7] = Default::default();
    while let Some(key) = map.next_key::<String>()? {
        let name = KeypointName::parse(&key)
            .ok_or_else(|| de::Error::custom(format!("unknown keypoint name `{key}`")))?;
        if out[name.index()].is_some() {
            return Err(de::Error::custom(format!("duplicate keypoint `{key}`")));
        }
        out[name.index()] = Some(map.next_value()?);
    }
    Ok(out)
}

struct PointsMap([Option<Point2>; 7]);
struct VisibleMap([Option<bool>; 7]);

impl<'de> Deserialize<'de> for PointsMap {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        struct V;
        impl<'de> Visitor<'de> for V {
            type Value = PointsMap;
            fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
                f.write_str("a map of keypoint name to point")
            }
            fn visit_map<A: MapAccess<'de>>(self, map: A) -> std::result::Result<PointsMap, A::Error> {
                collect_named(map).map(PointsMap)
            }
        }
        d.deserialize_map(V)
    }
}

impl<'de> Deserialize<'de> for VisibleMap {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        struct V;
        impl<'de> Visitor<'de> for V {
            type Value = VisibleMap;
            fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
                f.write_str("a map of keypoint name to visibility")
            }
            fn visit_map<A: MapAccess<'de>>(self, map: A) -> std::result::Result<VisibleMap, A::Error> {
                collect_named(map).map(VisibleMap)
            }
        }
        d.deserialize_map(V)
    }
}

impl<'de> Deserialize<'de> for KeypointSet {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        struct Raw {
            points: PointsMap,
            visible: VisibleMap,
        }
        let raw = Raw::deserialize(d)?;
        let mut entries = [Keypoint::default(); 7];
        for name in KeypointName::ALL {
            let i = name.index();
            let point = raw.points.0[i]
                .ok_or_else(|| de::Error::custom(format!("missing keypoint `{name}`")))?;
            let visible = raw.visible.0[i]
                .ok_or_else(|| de::Error::custom(format!("missing visibility for `{name}`")))?;
            entries[i] = Keypoint { point, visible };
        }
        Ok(KeypointSet { entries })
    }
}

/// Row-major 2x3 affine matrix.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AffineTransform {
    pub m: [[f64; 3]; 2],
}

impl AffineTransform {
    pub const IDENTITY: AffineTransform = AffineTransform {
        m: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]],
    };

    pub fn translation(tx: f64, ty: f64) -> Self {
        AffineTransform {
            m: [[1.0, 0.0, tx], [0.0, 1.0, ty]],
        }
    }

    /// `self ∘ other`: apply `other` first.
    pub fn compose(&self, other: &AffineTransform) -> AffineTransform {
        let a = &self.m;
        let b = &other.m;
        let mut m = [[0.0; 3]; 2];
        for r in 0..2 {
            m[r][0] = a[r][0] * b[0][0] + a[r][1] * b[1][0];
            m[r][1] = a[r][0] * b[0][1] + a[r][1] * b[1][1];
            m[r][2] = a[r][0] * b[0][2] + a[r][1] * b[1][2] + a[r][2];
        }
        AffineTransform { m }
    }

    pub fn determinant(&self) -> f64 {
        self.m[0][0] * self.m[1][1] - self.m[0][1] * self.m[1][0]
    }

    pub fn inverse(&self) -> Result<AffineTransform> {
        let det = self.determinant();
        if det.abs() < 1e-12 || !det.is_finite() {
            return Err(Error::DegenerateGeometry("singular affine transform".into()));
        }
        let [[a, b, tx], [c, d, ty]] = self.m;
        let ia = d / det;
        let ib = -b / det;
        let ic = -c / det;
        let id = a / det;
        Ok(AffineTransform {
            m: [[ia, ib, -(ia * tx + ib * ty)], [ic, id, -(ic * tx + id * ty)]],
        })
    }
}

/// Midpoint between the two eyes.
pub fn eye_midpoint(left_eye: Point2, right_eye: Point2) -> Point2 {
    Point2::new((left_eye.x + right_eye.x) / 2.0, (left_eye.y + right_eye.y) / 2.0)
}

/// Expresses the eye midpoint relative to the face box's top-left corner;
/// this is the rotation pivot.
pub fn adjust_to_box(midpoint: Point2, bbox: &BoundingBox) -> Point2 {
    Point2::new(midpoint.x - bbox.x, midpoint.y - bbox.y)
}

/// Eye-line angle in degrees, measured from the anatomical right eye (which
/// sits on the image left of an upright frontal face) to the left eye.
/// Range `(-180, 180]`.
pub fn rotation_angle(left_eye: Point2, right_eye: Point2) -> Result<f64> {
    if !left_eye.is_finite() || !right_eye.is_finite() {
        return Err(Error::invalid("non-finite eye coordinates"));
    }
    if left_eye.distance(&right_eye) < MIN_EYE_DISTANCE {
        return Err(Error::DegenerateGeometry(format!(
            "eyes are closer than {MIN_EYE_DISTANCE} px"
        )));
    }
    let dy = left_eye.y - right_eye.y;
    let dx = left_eye.x - right_eye.x;
    let deg = dy.atan2(dx).to_degrees();
    Ok(if deg <= -180.0 { deg + 360.0 } else { deg })
}

/// Rotation-and-scale matrix about `center`:
///
/// ```text
/// [  a   b   (1-a)*cx - b*cy ]      a = scale * cos(theta)
/// [ -b   a   b*cx + (1-a)*cy ]      b = scale * sin(theta)
/// ```
///
/// In y-down coordinates a positive angle turns content counter-clockwise on
/// screen, cancelling a measured tilt of the same angle.
pub fn rotation_matrix(center: Point2, angle_deg: f64, scale: f64) -> Result<AffineTransform> {
    if !(scale > 0.0) || !scale.is_finite() {
        return Err(Error::invalid(format!("scale must be positive, got {scale}")));
    }
    if !angle_deg.is_finite() || !center.is_finite() {
        return Err(Error::invalid("non-finite rotation parameters"));
    }
    let theta = angle_deg.to_radians();
    let a = scale * theta.cos();
    let b = scale * theta.sin();
    let (cx, cy) = (center.x, center.y);
    Ok(AffineTransform {
        m: [
            [a, b, (1.0 - a) * cx - b * cy],
            [-b, a, b * cx + (1.0 - a) * cy],
        ],
    })
}

pub fn apply_to_point(t: &AffineTransform, p: Point2) -> Point2 {
    let m = &t.m;
    Point2::new(
        m[0][0] * p.x + m[0][1] * p.y + m[0][2],
        m[1][0] * p.x + m[1][1] * p.y + m[1][2],
    )
}

/// Warps `image` into an `out_size` canvas: each output pixel centre is
/// pulled back through `t` and sampled bilinearly, black outside the source.
pub fn warp_image(image: &RgbImage, t: &AffineTransform, out_size: (u32, u32)) -> Result<RgbImage> {
    let (ow, oh) = out_size;
    if ow == 0 || oh == 0 {
        return Err(Error::invalid("output size must be positive"));
    }
    let inv = t.inverse()?;
    let mut out = RgbImage::new(ow, oh);
    for (x, y, px) in out.enumerate_pixels_mut() {
        let src = apply_to_point(&inv, Point2::new(x as f64 + 0.5, y as f64 + 0.5));
        *px = raster::to_rgb8(raster::sample_bilinear(image, src.x, src.y));
    }
    Ok(out)
}

/// Smallest axis-aligned box containing the four transformed corners.
pub fn enclosing_box(t: &AffineTransform, bbox: &BoundingBox) -> BoundingBox {
    let pts = bbox.corners().map(|c| apply_to_point(t, c));
    let x0 = pts.iter().map(|p| p.x).fold(f64::INFINITY, f64::min);
    let y0 = pts.iter().map(|p| p.y).fold(f64::INFINITY, f64::min);
    let x1 = pts.iter().map(|p| p.x).fold(f64::NEG_INFINITY, f64::max);
    let y1 = pts.iter().map(|p| p.y).fold(f64::NEG_INFINITY, f64::max);
    BoundingBox { x: x0, y: y0, w: x1 - x0, h: y1 - y0 }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoseDecision {
    Accept,
    Reject,
}

/// Rejects strong yaw: both eyes and both beak corners must be visible. Roll
/// and pitch are corrected or tolerated downstream.
pub fn pose_gate(kps: &KeypointSet) -> PoseDecision {
    const GATED: [KeypointName; 4] = [
        KeypointName::LeftEye,
        KeypointName::RightEye,
        KeypointName::LeftBeak,
        KeypointName::RightBeak,
    ];
    if GATED.iter().all(|&k| kps.is_visible(k)) {
        PoseDecision::Accept
    } else {
        PoseDecision::Reject
    }
}

/// Geometry computed by [`align_geometry`], independent of pixels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Alignment {
    /// Full-frame transform (source frame -> aligned frame).
    pub transform: AffineTransform,
    pub angle_deg: f64,
    /// Pivot in face-box coordinates.
    pub pivot: Point2,
    pub aligned_box: BoundingBox,
    pub keypoints: KeypointSet,
    /// Set when the clamped box no longer contains every visible keypoint.
    pub flagged: bool,
}

#[derive(Clone, Debug)]
pub struct AlignedFace {
    pub image: RgbImage,
    pub alignment: Alignment,
}

impl AlignedFace {
    pub fn aligned_box(&self) -> &BoundingBox {
        &self.alignment.aligned_box
    }

    pub fn keypoints(&self) -> &KeypointSet {
        &self.alignment.keypoints
    }
}

/// The geometric half of [`align_face`]: transform, aligned box and keypoints
/// for a frame of `width x height` pixels.
pub fn align_geometry(width: u32, height: u32, bbox: &BoundingBox, kps: &KeypointSet) -> Result<Alignment> {
    bbox.validate()?;
    if !kps.is_visible(KeypointName::LeftEye) || !kps.is_visible(KeypointName::RightEye) {
        return Err(Error::Pose("both eyes must be visible for alignment".into()));
    }
    let left = kps.point(KeypointName::LeftEye);
    let right = kps.point(KeypointName::RightEye);
    let angle_deg = rotation_angle(left, right)?;
    let pivot = adjust_to_box(eye_midpoint(left, right), bbox);
    let local = rotation_matrix(pivot, angle_deg, 1.0)?;
    // frame -> box coordinates, rotate about the pivot, back to the frame
    let transform = AffineTransform::translation(bbox.x, bbox.y)
        .compose(&local)
        .compose(&AffineTransform::translation(-bbox.x, -bbox.y));

    let keypoints = kps.map_points(|p| apply_to_point(&transform, p));

    let enclosing = enclosing_box(&transform, bbox);
    let c = enclosing.center();
    let tight = BoundingBox { x: c.x - bbox.w / 2.0, y: c.y - bbox.h / 2.0, w: bbox.w, h: bbox.h };
    let frame = BoundingBox { x: 0.0, y: 0.0, w: width as f64, h: height as f64 };
    let aligned_box = enclosing
        .intersect(&tight)
        .and_then(|b| b.intersect(&frame))
        .ok_or_else(|| Error::FlaggedFrame("aligned face box lies outside the image".into()))?;
    let flagged = keypoints
        .iter()
        .any(|(_, k)| k.visible && !aligned_box.contains(&k.point));

    Ok(Alignment { transform, angle_deg, pivot, aligned_box, keypoints, flagged })
}

/// Rotates the frame about the eye midpoint so the eye line is horizontal,
/// and carries the face box and keypoints along.
pub fn align_face(image: &RgbImage, bbox: &BoundingBox, kps: &KeypointSet) -> Result<AlignedFace> {
    let alignment = align_geometry(image.width(), image.height(), bbox, kps)?;
    let image = if alignment.angle_deg == 0.0 {
        image.clone()
    } else {
        warp_image(image, &alignment.transform, image.dimensions())?
    };
    Ok(AlignedFace { image, alignment })
}

/// Draws the box outline and keypoint markers; used for debug output.
pub fn draw_annotations(image: &mut RgbImage, bbox: &BoundingBox, kps: &KeypointSet) {
    let (w, h) = (image.width() as i64, image.height() as i64);
    let mut put = |x: i64, y: i64, c: Rgb<u8>| {
        if x >= 0 && y >= 0 && x < w && y < h {
            image.put_pixel(x as u32, y as u32, c);
        }
    };
    let green = Rgb([0, 255, 0]);
    let (x0, y0) = (bbox.x.round() as i64, bbox.y.round() as i64);
    let (x1, y1) = (bbox.right().round() as i64 - 1, bbox.bottom().round() as i64 - 1);
    for x in x0..=x1 {
        put(x, y0, green);
        put(x, y1, green);
    }
    for y in y0..=y1 {
        put(x0, y, green);
        put(x1, y, green);
    }
    for (name, k) in kps.iter() {
        let c = if k.visible { KEYPOINT_COLORS[name.index()] } else { Rgb([128, 128, 128]) };
        let (cx, cy) = (k.point.x.floor() as i64, k.point.y.floor() as i64);
        for d in -1..=1 {
            put(cx + d, cy, c);
            put(cx, cy + d, c);
        }
    }
}

/// Fixed marker colour per keypoint, canonical order.
pub const KEYPOINT_COLORS: [Rgb<u8>; 7] = [
    Rgb([230, 25, 75]),
    Rgb([60, 180, 75]),
    Rgb([0, 130, 200]),
    Rgb([245, 130, 48]),
    Rgb([145, 30, 180]),
    Rgb([70, 240, 240]),
    Rgb([240, 50, 230]),
];
