//! Synthetic captioned shapes dataset.
//!
//! Each image holds 1 to 3 non-touching colored shapes on a dark background,
//! with exact ground-truth boxes (scanned from the painted pixels) and two
//! templated captions naming every shape left to right. Generation is fully
//! deterministic per seed.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{BBox, DataError, Detection, ImageBuf, ImageRecord};

pub const BACKGROUND: [u8; 3] = [30, 30, 30];

/// Shape edge length range. The lower bound keeps every object at least as
/// large as the default 16x16 trigger.
const MIN_SIZE: usize = 16;
const MAX_SIZE: usize = 24;
/// Minimum pixel gap between shape bounding boxes.
const GAP: usize = 2;
const SHAPE_TRIES: usize = 100;
const LAYOUT_RETRIES: usize = 50;

pub const DEFAULT_CLASSES: [&str; 4] =
    ["red circle", "blue square", "green triangle", "yellow circle"];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum ShapeKind {
    Circle,
    Square,
    Triangle,
}

fn parse_class(token: &str) -> Result<([u8; 3], ShapeKind), DataError> {
    let mut parts = token.split_whitespace();
    let (color, shape) = match (parts.next(), parts.next(), parts.next()) {
        (Some(c), Some(s), None) => (c, s),
        _ => {
            return Err(DataError::Config(format!(
                "class {token:?} is not of the form \"<color> <shape>\""
            )))
        }
    };
    let rgb = match color {
        "red" => [220, 40, 40],
        "blue" => [40, 80, 220],
        "green" => [40, 180, 60],
        "yellow" => [230, 210, 50],
        "purple" => [160, 60, 200],
        "orange" => [240, 140, 40],
        "cyan" => [60, 200, 220],
        "white" => [235, 235, 235],
        other => return Err(DataError::Config(format!("unknown color {other:?}"))),
    };
    let kind = match shape {
        "circle" => ShapeKind::Circle,
        "square" => ShapeKind::Square,
        "triangle" => ShapeKind::Triangle,
        other => return Err(DataError::Config(format!("unknown shape {other:?}"))),
    };
    Ok((rgb, kind))
}

#[derive(Debug, Clone, Copy)]
struct Placement {
    class_idx: usize,
    size: usize,
    x0: usize,
    y0: usize,
}

/// One layout attempt: places `n` shapes with at least `GAP` pixels between
/// their nominal boxes. `None` when a shape cannot be placed within
/// `SHAPE_TRIES` samples.
fn place_shapes(
    rng: &mut ChaCha8Rng,
    n: usize,
    image_size: usize,
    n_classes: usize,
) -> Option<Vec<Placement>> {
    let mut placed: Vec<Placement> = Vec::with_capacity(n);
    for _ in 0..n {
        let mut ok = false;
        for _ in 0..SHAPE_TRIES {
            let class_idx = rng.gen_range(0..n_classes);
            let size = rng.gen_range(MIN_SIZE..=MAX_SIZE);
            let x0 = rng.gen_range(0..=image_size - size);
            let y0 = rng.gen_range(0..=image_size - size);
            let clear = placed.iter().all(|p| {
                let no_x = x0 + size + GAP <= p.x0 || p.x0 + p.size + GAP <= x0;
                let no_y = y0 + size + GAP <= p.y0 || p.y0 + p.size + GAP <= y0;
                no_x || no_y
            });
            if clear {
                placed.push(Placement { class_idx, size, x0, y0 });
                ok = true;
                break;
            }
        }
        if !ok {
            return None;
        }
    }
    Some(placed)
}

/// Paints a shape and returns the tight bbox of the pixels it touched.
fn draw_shape(img: &mut ImageBuf, p: &Placement, kind: ShapeKind, rgb: [u8; 3]) -> BBox {
    let (mut min_x, mut min_y) = (usize::MAX, usize::MAX);
    let (mut max_x, mut max_y) = (0usize, 0usize);
    let s = p.size as f64;
    let (cx, cy) = (p.x0 as f64 + s / 2.0, p.y0 as f64 + s / 2.0);
    for y in p.y0..p.y0 + p.size {
        for x in p.x0..p.x0 + p.size {
            // pixel-center rasterization
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let inside = match kind {
                ShapeKind::Square => true,
                ShapeKind::Circle => {
                    let (dx, dy) = (px - cx, py - cy);
                    dx * dx + dy * dy <= (s / 2.0) * (s / 2.0)
                }
                ShapeKind::Triangle => {
                    // isoceles, apex at the top center, base at the bottom
                    let t = (py - p.y0 as f64) / s;
                    (px - cx).abs() <= t * s / 2.0
                }
            };
            if inside {
                for c in 0..3 {
                    img.set(y, x, c, rgb[c]);
                }
                min_x = min_x.min(x);
                min_y = min_y.min(y);
                max_x = max_x.max(x);
                max_y = max_y.max(y);
            }
        }
    }
    assert!(min_x != usize::MAX, "shape painted no pixels");
    BBox::new(min_x as f64, min_y as f64, (max_x + 1) as f64, (max_y + 1) as f64)
}

pub fn generate_shapes_dataset<S: AsRef<str>>(
    n_images: usize,
    image_size: usize,
    class_set: &[S],
    seed: u64,
) -> Result<Vec<ImageRecord>, DataError> {
    if class_set.len() < 4 {
        return Err(DataError::Config(format!(
            "need at least 4 classes, got {}",
            class_set.len()
        )));
    }
    if image_size < 64 {
        return Err(DataError::Config(format!("image_size {image_size} below minimum 64")));
    }
    let classes: Vec<(String, [u8; 3], ShapeKind)> = class_set
        .iter()
        .map(|c| {
            let token = c.as_ref().to_string();
            let (rgb, kind) = parse_class(&token)?;
            Ok((token, rgb, kind))
        })
        .collect::<Result<_, DataError>>()?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut records = Vec::with_capacity(n_images);
    for i in 0..n_images {
        let n_shapes = rng.gen_range(1..=3usize);
        let layout = (0..LAYOUT_RETRIES)
            .find_map(|_| place_shapes(&mut rng, n_shapes, image_size, classes.len()))
            .ok_or(DataError::Placement {
                shapes: n_shapes,
                size: image_size,
                retries: LAYOUT_RETRIES,
            })?;

        let mut img = ImageBuf::new_filled(image_size, image_size, BACKGROUND);
        let mut detections: Vec<Detection> = layout
            .iter()
            .map(|p| {
                let (name, rgb, kind) = &classes[p.class_idx];
                let bbox = draw_shape(&mut img, p, *kind, *rgb);
                Detection { class_name: name.clone(), bbox, score: 1.0 }
            })
            .collect();
        detections.sort_by(|a, b| {
            (a.bbox.xa, a.bbox.ya).partial_cmp(&(b.bbox.xa, b.bbox.ya)).unwrap()
        });

        let noun_phrases: Vec<String> =
            detections.iter().map(|d| format!("a {}", d.class_name)).collect();
        let listing = noun_phrases.join(" and ");
        let captions = vec![listing.clone(), format!("the image shows {listing}")];

        let record = ImageRecord {
            image_id: format!("img{i:05}"),
            pixels: img,
            captions,
            detections,
        };
        record.validate().expect("generator produced an invalid record");
        records.push(record);
    }
    Ok(records)
}
