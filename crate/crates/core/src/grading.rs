//! Snow coverage rate (SCR = A_snow / A_bbox) per object, per-image
//! difficulty assignment, and whole-dataset grading into four levels.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::Dataset;
use crate::scr::{BinaryMap, ScrModel};

/// Labeled object rectangle: top-left corner plus extents, in absolute image
/// pixels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
    pub category_id: i64,
}

impl BBox {
    pub fn new(x: f64, y: f64, w: f64, h: f64, category_id: i64) -> Result<Self> {
        if w <= 0.0 || h <= 0.0 {
            return Err(Error::InvalidArgument(format!(
                "bbox extents must be positive, got w={} h={}",
                w, h
            )));
        }
        Ok(BBox {
            x,
            y,
            w,
            h,
            category_id,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DifficultyLevel {
    Easy,
    Normal,
    Difficult,
    ParticularlyDifficult,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImageAggregate {
    /// The most-buried object drives detector failure.
    MaxObjectScr,
    MeanObjectScr,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GradingPolicy {
    pub t1: f64,
    pub t2: f64,
    pub t3: f64,
    pub image_aggregate: ImageAggregate,
}

impl Default for GradingPolicy {
    fn default() -> Self {
        // t2 sits above the 0.56 reference aggregate, which is pinned to the
        // Normal level; 0.74/0.75 straddle the Difficult boundary.
        GradingPolicy {
            t1: 0.25,
            t2: 0.60,
            t3: 0.75,
            image_aggregate: ImageAggregate::MaxObjectScr,
        }
    }
}

impl GradingPolicy {
    pub fn validate(&self) -> Result<()> {
        let ok = 0.0 < self.t1 && self.t1 < self.t2 && self.t2 < self.t3 && self.t3 < 1.0;
        if !ok {
            return Err(Error::InvalidArgument(format!(
                "thresholds must satisfy 0 < t1 < t2 < t3 < 1, got {} {} {}",
                self.t1, self.t2, self.t3
            )));
        }
        Ok(())
    }
}

/// Fraction of snow pixels inside the box after clipping to image bounds.
/// A pixel (px, py) is inside when px ∈ [x, x+w) and py ∈ [y, y+h).
pub fn scr_for_bbox(map: &BinaryMap, bbox: &BBox) -> Result<f64> {
    let x0 = bbox.x.max(0.0).ceil() as i64;
    let x1 = (bbox.x + bbox.w).min(map.w as f64).ceil() as i64;
    let y0 = bbox.y.max(0.0).ceil() as i64;
    let y1 = (bbox.y + bbox.h).min(map.h as f64).ceil() as i64;
    if x1 <= x0 || y1 <= y0 {
        return Err(Error::InvalidArgument(format!(
            "bbox ({}, {}, {}, {}) covers no pixels of a {}×{} image",
            bbox.x, bbox.y, bbox.w, bbox.h, map.w, map.h
        )));
    }
    let (x0, x1, y0, y1) = (x0 as usize, x1 as usize, y0 as usize, y1 as usize);
    let mut snow = 0usize;
    for py in y0..y1 {
        snow += map.data[py * map.w + x0..py * map.w + x1]
            .iter()
            .filter(|&&b| b)
            .count();
    }
    let area = (x1 - x0) * (y1 - y0);
    Ok(snow as f64 / area as f64)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ImageGrade {
    pub level: DifficultyLevel,
    pub aggregate: f64,
    /// Set when the image had no labeled objects (defaults to Easy).
    pub no_objects: bool,
}

/// Level = Easy below t1, Normal below t2, Difficult below t3, else
/// ParticularlyDifficult; a value exactly on a threshold goes up a level.
pub fn grade_image(scrs: &[f64], policy: &GradingPolicy) -> ImageGrade {
    if scrs.is_empty() {
        return ImageGrade {
            level: DifficultyLevel::Easy,
            aggregate: 0.0,
            no_objects: true,
        };
    }
    let aggregate = match policy.image_aggregate {
        ImageAggregate::MaxObjectScr => scrs.iter().cloned().fold(f64::MIN, f64::max),
        ImageAggregate::MeanObjectScr => scrs.iter().sum::<f64>() / scrs.len() as f64,
    };
    let level = if aggregate < policy.t1 {
        DifficultyLevel::Easy
    } else if aggregate < policy.t2 {
        DifficultyLevel::Normal
    } else if aggregate < policy.t3 {
        DifficultyLevel::Difficult
    } else {
        DifficultyLevel::ParticularlyDifficult
    };
    ImageGrade {
        level,
        aggregate,
        no_objects: false,
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LevelHistogram {
    pub easy: usize,
    pub normal: usize,
    pub difficult: usize,
    pub particularly_difficult: usize,
}

impl LevelHistogram {
    pub fn bump(&mut self, level: DifficultyLevel) {
        match level {
            DifficultyLevel::Easy => self.easy += 1,
            DifficultyLevel::Normal => self.normal += 1,
            DifficultyLevel::Difficult => self.difficult += 1,
            DifficultyLevel::ParticularlyDifficult => self.particularly_difficult += 1,
        }
    }

    pub fn total(&self) -> usize {
        self.easy + self.normal + self.difficult + self.particularly_difficult
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PerImageRecord {
    pub id: i64,
    pub file_name: String,
    pub scrs: Vec<f64>,
    pub aggregate: f64,
    pub level: DifficultyLevel,
    pub no_objects: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GradingReport {
    pub policy: GradingPolicy,
    pub per_image: Vec<PerImageRecord>,
    pub histogram: LevelHistogram,
    pub skipped: Vec<String>,
}

/// Grades every image in the dataset, ordered by image id. Unreadable images
/// are recorded as skipped and do not abort the run.
pub fn grade_dataset(
    dataset: &Dataset,
    images_dir: &Path,
    model: &ScrModel,
    policy: &GradingPolicy,
) -> Result<GradingReport> {
    policy.validate()?;
    dataset.validate()?;
    let mut images = dataset.images.clone();
    images.sort_by_key(|img| img.id);
    let mut report = GradingReport {
        policy: policy.clone(),
        per_image: Vec::new(),
        histogram: LevelHistogram::default(),
        skipped: Vec::new(),
    };
    for img in &images {
        let record = match grade_one(dataset, images_dir, model, policy, img) {
            Ok(r) => r,
            Err(_) => {
                report.skipped.push(img.file_name.clone());
                continue;
            }
        };
        report.histogram.bump(record.level);
        report.per_image.push(record);
    }
    Ok(report)
}

fn grade_one(
    dataset: &Dataset,
    images_dir: &Path,
    model: &ScrModel,
    policy: &GradingPolicy,
    img: &crate::io::ImageRecord,
) -> Result<PerImageRecord> {
    let tensor = crate::io::load_image(&images_dir.join(&img.file_name))?;
    let maps = model.infer_snow_map(&tensor)?;
    let mut scrs = Vec::new();
    for bbox in dataset.boxes_for_image(img.id) {
        scrs.push(scr_for_bbox(&maps.binary, bbox)?);
    }
    let grade = grade_image(&scrs, policy);
    Ok(PerImageRecord {
        id: img.id,
        file_name: img.file_name.clone(),
        scrs,
        aggregate: grade.aggregate,
        level: grade.level,
        no_objects: grade.no_objects,
    })
}

pub fn write_grading_report(report: &GradingReport, path: &Path) -> Result<()> {
    let json = serde_json::to_string_pretty(report)?;
    std::fs::write(path, json)?;
    Ok(())
}

pub fn read_grading_report(path: &Path) -> Result<GradingReport> {
    let json = std::fs::read_to_string(path)?;
    Ok(serde_json::from_str(&json)?)
}
