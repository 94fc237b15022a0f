//! COCO JSON subset: images, annotations (id/image_id/category_id/bbox),
//! categories. bbox is [x, y, w, h] in absolute pixels, top-left origin.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::grading::BBox;

use super::{Dataset, ImageRecord};

#[derive(Serialize, Deserialize)]
struct CocoFile {
    images: Vec<CocoImage>,
    annotations: Vec<CocoAnnotation>,
    categories: Vec<CocoCategory>,
}

#[derive(Serialize, Deserialize)]
struct CocoImage {
    id: i64,
    file_name: String,
    width: u32,
    height: u32,
}

#[derive(Serialize, Deserialize)]
struct CocoAnnotation {
    id: i64,
    image_id: i64,
    category_id: i64,
    bbox: [f64; 4],
}

#[derive(Serialize, Deserialize)]
struct CocoCategory {
    id: i64,
    name: String,
}

pub fn parse_coco(path: &Path) -> Result<Dataset> {
    parse_coco_str(&std::fs::read_to_string(path)?)
}

pub fn parse_coco_str(json: &str) -> Result<Dataset> {
    let file: CocoFile = serde_json::from_str(json)?;
    let dataset = Dataset {
        images: file
            .images
            .into_iter()
            .map(|i| ImageRecord {
                id: i.id,
                file_name: i.file_name,
                width: i.width,
                height: i.height,
            })
            .collect(),
        annotations: file
            .annotations
            .into_iter()
            .map(|a| {
                let [x, y, w, h] = a.bbox;
                Ok((a.image_id, BBox::new(x, y, w, h, a.category_id)?))
            })
            .collect::<Result<_>>()?,
        categories: file
            .categories
            .into_iter()
            .map(|c| (c.id, c.name))
            .collect::<BTreeMap<_, _>>(),
    };
    dataset.validate()?;
    Ok(dataset)
}

pub fn write_coco(dataset: &Dataset, path: &Path) -> Result<()> {
    std::fs::write(path, write_coco_string(dataset)?)?;
    Ok(())
}

/// Emits the same schema with entries ordered by id.
pub fn write_coco_string(dataset: &Dataset) -> Result<String> {
    dataset.validate()?;
    let mut images: Vec<CocoImage> = dataset
        .images
        .iter()
        .map(|i| CocoImage {
            id: i.id,
            file_name: i.file_name.clone(),
            width: i.width,
            height: i.height,
        })
        .collect();
    images.sort_by_key(|i| i.id);
    let annotations: Vec<CocoAnnotation> = dataset
        .annotations
        .iter()
        .enumerate()
        .map(|(idx, (image_id, b))| CocoAnnotation {
            id: idx as i64 + 1,
            image_id: *image_id,
            category_id: b.category_id,
            bbox: [b.x, b.y, b.w, b.h],
        })
        .collect();
    let categories: Vec<CocoCategory> = dataset
        .categories
        .iter()
        .map(|(&id, name)| CocoCategory {
            id,
            name: name.clone(),
        })
        .collect();
    Ok(serde_json::to_string_pretty(&CocoFile {
        images,
        annotations,
        categories,
    })?)
}
