//! JSON Lines dataset manifests.
//!
//! One object per line: `{"image_id", "image_path", "captions", "detections"}`
//! with detections as `{"class", "bbox": [xa,ya,xb,yb], "score"}`. Image
//! paths are resolved relative to the manifest file. Saving writes 8-bit RGB
//! PNGs next to the manifest under `images/`.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{BBox, DataError, Detection, ImageBuf, ImageRecord};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PixelLoad {
    /// Decode every PNG now.
    Eager,
    /// Read only PNG headers; pixels load on first use.
    Lazy,
}

#[derive(Serialize, Deserialize)]
struct LineDetection {
    class: String,
    bbox: [f64; 4],
    score: f64,
}

#[derive(Serialize, Deserialize)]
struct Line {
    image_id: String,
    image_path: String,
    captions: Vec<String>,
    detections: Vec<LineDetection>,
}

pub fn load_manifest(path: &Path, mode: PixelLoad) -> Result<Vec<ImageRecord>, DataError> {
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    let file = fs::File::open(path)?;
    let mut records = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let lineno = i + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: Line = serde_json::from_str(&line)
            .map_err(|e| DataError::Parse { line: lineno, msg: e.to_string() })?;
        let img_path = base.join(&parsed.image_path);
        let (w, h) = image::image_dimensions(&img_path)
            .map_err(|e| DataError::Image { path: img_path.clone(), msg: e.to_string() })?;
        let mut pixels = ImageBuf::deferred(h as usize, w as usize, img_path);
        if mode == PixelLoad::Eager {
            pixels.ensure_loaded()?;
        }
        let detections = parsed
            .detections
            .into_iter()
            .map(|d| {
                let [xa, ya, xb, yb] = d.bbox;
                if !(xa < xb && ya < yb) {
                    return Err(DataError::Validation {
                        image_id: parsed.image_id.clone(),
                        msg: format!("degenerate bbox [{xa},{ya},{xb},{yb}]"),
                    });
                }
                Ok(Detection {
                    class_name: d.class,
                    bbox: BBox::new(xa, ya, xb, yb),
                    score: d.score,
                })
            })
            .collect::<Result<Vec<_>, _>>()?;
        let record = ImageRecord {
            image_id: parsed.image_id,
            pixels,
            captions: parsed.captions,
            detections,
        };
        record.validate()?;
        records.push(record);
    }
    Ok(records)
}

/// Writes `records` as `path` plus PNGs under `<dir>/images/`. Pixels must be
/// in memory.
pub fn save_manifest(records: &[ImageRecord], path: &Path) -> Result<(), DataError> {
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    let img_dir = base.join("images");
    fs::create_dir_all(&img_dir)?;
    let mut out = fs::File::create(path)?;
    for rec in records {
        rec.validate()?;
        let rel = format!("images/{}.png", rec.image_id);
        let img_path = base.join(&rel);
        let buf = image::RgbImage::from_raw(
            rec.pixels.w() as u32,
            rec.pixels.h() as u32,
            rec.pixels.data().to_vec(),
        )
        .expect("raster size mismatch");
        buf.save(&img_path)
            .map_err(|e| DataError::Image { path: img_path.clone(), msg: e.to_string() })?;
        let line = Line {
            image_id: rec.image_id.clone(),
            image_path: rel,
            captions: rec.captions.clone(),
            detections: rec
                .detections
                .iter()
                .map(|d| LineDetection {
                    class: d.class_name.clone(),
                    bbox: [d.bbox.xa, d.bbox.ya, d.bbox.xb, d.bbox.yb],
                    score: d.score,
                })
                .collect(),
        };
        serde_json::to_writer(&mut out, &line)
            .map_err(|e| DataError::Parse { line: 0, msg: e.to_string() })?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

/// Loads any deferred pixels in place.
pub fn ensure_all_loaded(records: &mut [ImageRecord]) -> Result<(), DataError> {
    for rec in records {
        rec.pixels.ensure_loaded()?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::generate_shapes_dataset;

    fn sample_records() -> Vec<ImageRecord> {
        generate_shapes_dataset(
            6,
            64,
            &["red circle", "blue square", "green triangle", "yellow circle"],
            99,
        )
        .unwrap()
    }

    #[test]
    fn empty_manifest_is_empty_list() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.jsonl");
        fs::write(&path, "").unwrap();
        assert!(load_manifest(&path, PixelLoad::Eager).unwrap().is_empty());
    }

    #[test]
    fn round_trip_preserves_records() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.jsonl");
        let records = sample_records();
        save_manifest(&records, &path).unwrap();
        let loaded = load_manifest(&path, PixelLoad::Eager).unwrap();
        assert_eq!(records, loaded);
    }

    #[test]
    fn lazy_load_defers_pixels_until_needed() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.jsonl");
        save_manifest(&sample_records(), &path).unwrap();
        let mut loaded = load_manifest(&path, PixelLoad::Lazy).unwrap();
        assert!(!loaded[0].pixels.is_loaded());
        assert_eq!(loaded[0].pixels.h(), 64);
        loaded[0].pixels.ensure_loaded().unwrap();
        assert!(loaded[0].pixels.is_loaded());
    }

    #[test]
    fn malformed_line_names_its_number() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.jsonl");
        fs::write(&path, "{\"image_id\": \"x\"\n").unwrap();
        let err = load_manifest(&path, PixelLoad::Lazy).unwrap_err();
        assert!(err.to_string().contains("line 1"), "{err}");
    }

    #[test]
    fn out_of_bounds_bbox_names_image_id() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.jsonl");
        let mut records = sample_records();
        save_manifest(&records[..1], &path).unwrap();
        // rewrite the line with a bbox below the image bottom
        let id = records.remove(0).image_id;
        let line = format!(
            "{{\"image_id\":\"{id}\",\"image_path\":\"images/{id}.png\",\"captions\":[\"a thing\"],\"detections\":[{{\"class\":\"red circle\",\"bbox\":[0,0,8,999],\"score\":1.0}}]}}\n"
        );
        fs::write(&path, line).unwrap();
        let err = load_manifest(&path, PixelLoad::Lazy).unwrap_err();
        assert!(err.to_string().contains(&id), "{err}");
    }
}
