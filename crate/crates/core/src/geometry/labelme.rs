//! LabelMe-compatible annotation documents: one `rectangle` shape for the
//! face box and one `point` shape per keypoint, labelled with the canonical
//! keypoint name. Invisible keypoints carry `"flags": {"visible": false}`;
//! keypoints missing from a document load as invisible.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{BoundingBox, Keypoint, KeypointName, KeypointSet, Point2};
use crate::{Error, Result};

pub const FACE_LABEL: &str = "face";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelMeShape {
    pub label: String,
    pub points: Vec<[f64; 2]>,
    #[serde(default)]
    pub group_id: Option<i64>,
    pub shape_type: String,
    #[serde(default)]
    pub flags: BTreeMap<String, bool>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct LabelMeDocument {
    #[serde(default = "default_version")]
    pub version: String,
    #[serde(default)]
    pub flags: BTreeMap<String, bool>,
    pub shapes: Vec<LabelMeShape>,
    pub image_path: String,
    #[serde(default)]
    pub image_data: Option<String>,
    pub image_height: u32,
    pub image_width: u32,
}

fn default_version() -> String {
    "5.4.1".to_string()
}

impl LabelMeDocument {
    pub fn from_annotation(
        image_path: &str,
        width: u32,
        height: u32,
        bbox: Option<&BoundingBox>,
        kps: Option<&KeypointSet>,
    ) -> Self {
        let mut shapes = Vec::new();
        if let Some(b) = bbox {
            shapes.push(LabelMeShape {
                label: FACE_LABEL.to_string(),
                points: vec![[b.x, b.y], [b.right(), b.bottom()]],
                group_id: None,
                shape_type: "rectangle".to_string(),
                flags: BTreeMap::new(),
            });
        }
        if let Some(k) = kps {
            for (name, kp) in k.iter() {
                let mut flags = BTreeMap::new();
                if !kp.visible {
                    flags.insert("visible".to_string(), false);
                }
                shapes.push(LabelMeShape {
                    label: name.as_str().to_string(),
                    points: vec![[kp.point.x, kp.point.y]],
                    group_id: None,
                    shape_type: "point".to_string(),
                    flags,
                });
            }
        }
        LabelMeDocument {
            version: default_version(),
            flags: BTreeMap::new(),
            shapes,
            image_path: image_path.to_string(),
            image_data: None,
            image_height: height,
            image_width: width,
        }
    }

    /// The first rectangle shape, normalized so that corners may come in any
    /// order.
    pub fn face_box(&self) -> Result<Option<BoundingBox>> {
        let Some(shape) = self.shapes.iter().find(|s| s.shape_type == "rectangle") else {
            return Ok(None);
        };
        if shape.points.len() != 2 {
            return Err(Error::invalid("rectangle shape needs exactly two points"));
        }
        let [a, b] = [shape.points[0], shape.points[1]];
        BoundingBox::from_corners(a[0].min(b[0]), a[1].min(b[1]), a[0].max(b[0]), a[1].max(b[1]))
            .map(Some)
    }

    /// Keypoints, or `None` when the document has no point shapes at all.
    pub fn keypoints(&self) -> Result<Option<KeypointSet>> {
        let mut entries = [Keypoint::default(); 7];
        let mut seen = [false; 7];
        for shape in self.shapes.iter().filter(|s| s.shape_type == "point") {
            let name = KeypointName::parse(&shape.label)
                .ok_or_else(|| Error::invalid(format!("unknown keypoint label `{}`", shape.label)))?;
            let [x, y] = *shape
                .points
                .first()
                .ok_or_else(|| Error::invalid(format!("point shape `{}` has no coordinates", shape.label)))?;
            if seen[name.index()] {
                return Err(Error::invalid(format!("duplicate keypoint `{name}`")));
            }
            seen[name.index()] = true;
            let visible = shape.flags.get("visible").copied().unwrap_or(true);
            entries[name.index()] = Keypoint { point: Point2::new(x, y), visible };
        }
        if !seen.iter().any(|&s| s) {
            return Ok(None);
        }
        Ok(Some(KeypointSet::new(entries)))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_slice(&std::fs::read(path)?)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }
}
