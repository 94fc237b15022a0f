//! YOLO txt labels: one file per image, lines "class cx cy w h" with
//! center/extent coordinates normalized to [0,1].

use std::path::Path;

use crate::error::{Error, Result};
use crate::grading::BBox;

use super::{Dataset, ImageRecord};

fn label_file_name(image_file: &str) -> String {
    match image_file.rsplit_once('.') {
        Some((stem, _)) => format!("{}.txt", stem),
        None => format!("{}.txt", image_file),
    }
}

/// Reads one label file per image record from `labels_dir`. A missing or
/// empty file yields zero annotations for that image.
pub fn parse_yolo(labels_dir: &Path, images: &[ImageRecord]) -> Result<Dataset> {
    let mut dataset = Dataset {
        images: images.to_vec(),
        ..Dataset::default()
    };
    let mut max_class = 0i64;
    for img in images {
        let file = labels_dir.join(label_file_name(&img.file_name));
        if !file.exists() {
            continue;
        }
        let text = std::fs::read_to_string(&file)?;
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let bbox = parse_yolo_line(line, img.width, img.height).map_err(|msg| {
                Error::ParseLine {
                    file: file.display().to_string(),
                    line: lineno + 1,
                    message: msg,
                }
            })?;
            max_class = max_class.max(bbox.category_id);
            dataset.annotations.push((img.id, bbox));
        }
    }
    for class in 0..=max_class {
        dataset
            .categories
            .entry(class)
            .or_insert_with(|| format!("class_{}", class));
    }
    dataset.validate()?;
    Ok(dataset)
}

fn parse_yolo_line(line: &str, img_w: u32, img_h: u32) -> std::result::Result<BBox, String> {
    let fields: Vec<&str> = line.split_whitespace().collect();
    if fields.len() != 5 {
        return Err(format!("expected 5 fields, got {}", fields.len()));
    }
    let class: i64 = fields[0]
        .parse()
        .map_err(|_| format!("bad class id {:?}", fields[0]))?;
    if class < 0 {
        return Err(format!("negative class id {}", class));
    }
    let mut vals = [0.0f64; 4];
    for (i, f) in fields[1..].iter().enumerate() {
        let v: f64 = f.parse().map_err(|_| format!("bad number {:?}", f))?;
        if !(0.0..=1.0).contains(&v) {
            return Err(format!("value {} outside [0,1]", v));
        }
        vals[i] = v;
    }
    let [cx, cy, w, h] = vals;
    BBox::new(
        (cx - w / 2.0) * img_w as f64,
        (cy - h / 2.0) * img_h as f64,
        w * img_w as f64,
        h * img_h as f64,
        class,
    )
    .map_err(|e| e.to_string())
}

/// Writes one label file per image, exactly inverting the parse conversion.
pub fn write_yolo(dataset: &Dataset, dir: &Path) -> Result<()> {
    dataset.validate()?;
    std::fs::create_dir_all(dir)?;
    for img in &dataset.images {
        let mut lines = String::new();
        for bbox in dataset.boxes_for_image(img.id) {
            let iw = img.width as f64;
            let ih = img.height as f64;
            lines.push_str(&format!(
                "{} {} {} {} {}\n",
                bbox.category_id,
                (bbox.x + bbox.w / 2.0) / iw,
                (bbox.y + bbox.h / 2.0) / ih,
                bbox.w / iw,
                bbox.h / ih,
            ));
        }
        std::fs::write(dir.join(label_file_name(&img.file_name)), lines)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn image(id: i64, name: &str, w: u32, h: u32) -> ImageRecord {
        ImageRecord {
            id,
            file_name: name.to_string(),
            width: w,
            height: h,
        }
    }

    fn write_labels(dir: &Path, name: &str, text: &str) {
        std::fs::write(dir.join(name), text).unwrap();
    }

    #[test]
    fn centered_half_box_maps_to_pixel_coordinates() {
        let dir = tempfile::tempdir().unwrap();
        write_labels(dir.path(), "a.txt", "0 0.5 0.5 0.5 0.5\n");
        let ds = parse_yolo(dir.path(), &[image(1, "a.ppm", 100, 100)]).unwrap();
        let (_, b) = &ds.annotations[0];
        assert_eq!((b.x, b.y, b.w, b.h), (25.0, 25.0, 50.0, 50.0));
        assert_eq!(b.category_id, 0);
        assert_eq!(ds.categories[&0], "class_0");
    }

    #[test]
    fn missing_or_empty_label_files_yield_no_annotations() {
        let dir = tempfile::tempdir().unwrap();
        write_labels(dir.path(), "b.txt", "\n  \n");
        let ds = parse_yolo(
            dir.path(),
            &[image(1, "a.ppm", 10, 10), image(2, "b.ppm", 10, 10)],
        )
        .unwrap();
        assert!(ds.annotations.is_empty());
        assert_eq!(ds.images.len(), 2);
    }

    #[test]
    fn out_of_range_values_report_file_and_line() {
        let dir = tempfile::tempdir().unwrap();
        write_labels(dir.path(), "a.txt", "0 0.5 0.5 0.5 0.5\n0 1.5 0.5 0.5 0.5\n");
        let err = parse_yolo(dir.path(), &[image(1, "a.ppm", 10, 10)]).unwrap_err();
        match err {
            Error::ParseLine { file, line, message } => {
                assert!(file.ends_with("a.txt"));
                assert_eq!(line, 2);
                assert!(message.contains("outside [0,1]"));
            }
            other => panic!("expected line error, got {:?}", other),
        }
    }

    #[test]
    fn wrong_field_count_and_bad_class_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        write_labels(dir.path(), "a.txt", "0 0.5 0.5 0.5\n");
        assert!(parse_yolo(dir.path(), &[image(1, "a.ppm", 10, 10)]).is_err());
        write_labels(dir.path(), "a.txt", "-1 0.5 0.5 0.5 0.5\n");
        assert!(parse_yolo(dir.path(), &[image(1, "a.ppm", 10, 10)]).is_err());
        write_labels(dir.path(), "a.txt", "x 0.5 0.5 0.5 0.5\n");
        assert!(parse_yolo(dir.path(), &[image(1, "a.ppm", 10, 10)]).is_err());
    }

    #[test]
    fn write_then_parse_round_trips_within_tolerance() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let images = vec![image(1, "a.ppm", 640, 480), image(2, "b.ppm", 333, 77)];
        let mut ds = Dataset {
            images,
            ..Dataset::default()
        };
        for _ in 0..50 {
            let img = &ds.images[rng.gen_range(0..2)];
            let (iw, ih) = (img.width as f64, img.height as f64);
            let w = rng.gen_range(1.0..iw / 2.0);
            let h = rng.gen_range(1.0..ih / 2.0);
            let x = rng.gen_range(0.0..iw - w);
            let y = rng.gen_range(0.0..ih - h);
            let class = rng.gen_range(0..3);
            ds.annotations
                .push((img.id, BBox::new(x, y, w, h, class).unwrap()));
        }
        for class in 0..3 {
            ds.categories.insert(class, format!("class_{}", class));
        }
        let dir = tempfile::tempdir().unwrap();
        write_yolo(&ds, dir.path()).unwrap();
        let back = parse_yolo(dir.path(), &ds.images).unwrap();
        assert_eq!(back.annotations.len(), ds.annotations.len());
        // parse_yolo returns boxes grouped per image; match that ordering.
        let mut expected = ds.annotations.clone();
        expected.sort_by_key(|(id, _)| *id);
        for ((ia, a), (ib, b)) in expected.iter().zip(&back.annotations) {
            assert_eq!(ia, ib);
            assert_eq!(a.category_id, b.category_id);
            for (u, v) in [(a.x, b.x), (a.y, b.y), (a.w, b.w), (a.h, b.h)] {
                assert!((u - v).abs() < 1e-6, "{} vs {}", u, v);
            }
        }
    }
}
