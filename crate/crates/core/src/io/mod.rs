//! Image codecs (binary PPM/PGM) and annotation parsers for the COCO-JSON
//! and YOLO-txt conventions.

mod coco;
mod pnm;
mod yolo;

pub use coco::{parse_coco, parse_coco_str, write_coco, write_coco_string};
pub use pnm::{load_image, save_binary_map, save_image};
pub use yolo::{parse_yolo, write_yolo};

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::grading::BBox;

#[derive(Debug, Clone, PartialEq)]
pub struct ImageRecord {
    pub id: i64,
    pub file_name: String,
    pub width: u32,
    pub height: u32,
}

/// Annotations resolved against their images and categories.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Dataset {
    pub images: Vec<ImageRecord>,
    /// (image id, box) pairs.
    pub annotations: Vec<(i64, BBox)>,
    pub categories: BTreeMap<i64, String>,
}

impl Dataset {
    /// Checks that every annotation's image_id and category_id resolve and
    /// that image ids are unique.
    pub fn validate(&self) -> Result<()> {
        let mut seen = std::collections::BTreeSet::new();
        for img in &self.images {
            if img.width == 0 || img.height == 0 {
                return Err(Error::Validation(format!(
                    "image {} has zero dimension",
                    img.id
                )));
            }
            if !seen.insert(img.id) {
                return Err(Error::Validation(format!("duplicate image id {}", img.id)));
            }
        }
        let mut dangling_images = Vec::new();
        let mut dangling_categories = Vec::new();
        for (image_id, bbox) in &self.annotations {
            if !seen.contains(image_id) {
                dangling_images.push(*image_id);
            }
            if !self.categories.contains_key(&bbox.category_id) {
                dangling_categories.push(bbox.category_id);
            }
        }
        if !dangling_images.is_empty() || !dangling_categories.is_empty() {
            let mut parts = Vec::new();
            if !dangling_images.is_empty() {
                parts.push(format!("unknown image ids {:?}", dangling_images));
            }
            if !dangling_categories.is_empty() {
                parts.push(format!("unknown category ids {:?}", dangling_categories));
            }
            return Err(Error::Validation(parts.join("; ")));
        }
        Ok(())
    }

    pub fn boxes_for_image(&self, image_id: i64) -> Vec<&BBox> {
        self.annotations
            .iter()
            .filter(|(id, _)| *id == image_id)
            .map(|(_, b)| b)
            .collect()
    }
}
