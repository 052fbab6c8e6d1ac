//! COCO instance annotation files.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::annotate::Box2D;
use crate::error::{Error, Result};
use crate::scene::ObjectClass;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CocoImage {
    pub id: u64,
    pub file_name: String,
    pub width: u32,
    pub height: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CocoAnnotation {
    pub id: u64,
    pub image_id: u64,
    pub category_id: u32,
    pub bbox: [f64; 4],
    pub area: f64,
    pub iscrowd: u8,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub visible_fraction: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub instance_id: Option<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CocoCategory {
    pub id: u32,
    pub name: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CocoFile {
    pub images: Vec<CocoImage>,
    pub annotations: Vec<CocoAnnotation>,
    pub categories: Vec<CocoCategory>,
}

fn categories() -> Vec<CocoCategory> {
    let mut v: Vec<_> = ObjectClass::ALL
        .iter()
        .map(|c| CocoCategory {
            id: c.coco_id(),
            name: c.coco_name().into(),
        })
        .collect();
    v.sort_by_key(|c| c.id);
    v
}

/// Builds the file for `(file_name, width, height, boxes)` per image, in order.
pub fn build(images: &[(String, u32, u32, &[Box2D])]) -> CocoFile {
    let mut out = CocoFile {
        images: Vec::with_capacity(images.len()),
        annotations: Vec::new(),
        categories: categories(),
    };
    for (i, (file_name, width, height, boxes)) in images.iter().enumerate() {
        let image_id = i as u64 + 1;
        out.images.push(CocoImage {
            id: image_id,
            file_name: file_name.clone(),
            width: *width,
            height: *height,
        });
        for b in *boxes {
            out.annotations.push(CocoAnnotation {
                id: out.annotations.len() as u64 + 1,
                image_id,
                category_id: b.class.coco_id(),
                bbox: b.bbox,
                area: b.bbox[2] * b.bbox[3],
                iscrowd: 0,
                visible_fraction: Some(b.visible_fraction),
                instance_id: Some(b.instance_id),
            });
        }
    }
    out
}

/// Boxes per image file stem. Crowd regions and unknown categories are skipped;
/// missing visibility defaults to fully visible.
pub fn parse(text: &str, path: &Path) -> Result<BTreeMap<String, Vec<Box2D>>> {
    let file: CocoFile = serde_json::from_str(text).map_err(|e| Error::format(path, e.to_string()))?;
    let mut stems = BTreeMap::new();
    let mut out: BTreeMap<String, Vec<Box2D>> = BTreeMap::new();
    for img in &file.images {
        let stem = Path::new(&img.file_name)
            .file_stem()
            .and_then(|s| s.to_str())
            .ok_or_else(|| Error::format(path, format!("bad file_name `{}`", img.file_name)))?
            .to_string();
        stems.insert(img.id, stem.clone());
        out.entry(stem).or_default();
    }
    for a in &file.annotations {
        let stem = stems
            .get(&a.image_id)
            .ok_or_else(|| Error::format(path, format!("annotation {} references unknown image {}", a.id, a.image_id)))?;
        if a.iscrowd != 0 {
            continue;
        }
        let Some(class) = ObjectClass::from_coco_id(a.category_id) else {
            continue;
        };
        out.get_mut(stem).expect("stem registered").push(Box2D {
            class,
            bbox: a.bbox,
            visible_fraction: a.visible_fraction.unwrap_or(1.0),
            instance_id: a.instance_id.unwrap_or(0),
        });
    }
    Ok(out)
}
