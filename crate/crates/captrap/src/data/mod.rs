//! Domain types, dataset manifest I/O, and the synthetic captioned shapes
//! dataset that keeps every experiment runnable at desk scale.

pub mod manifest;
pub mod synthetic;

use std::path::PathBuf;

pub use manifest::{ensure_all_loaded, load_manifest, save_manifest, PixelLoad};
pub use synthetic::{generate_shapes_dataset, DEFAULT_CLASSES};

use crate::tensor::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("manifest line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("image {image_id}: {msg}")]
    Validation { image_id: String, msg: String },
    #[error("could not place {shapes} shapes on a {size}x{size} canvas after {retries} layout retries")]
    Placement { shapes: usize, size: usize, retries: usize },
    #[error("dataset config: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("image file {path}: {msg}")]
    Image { path: PathBuf, msg: String },
}

/// Axis-aligned box in pixel coordinates, `xa < xb`, `ya < yb`.
///
/// The convention is half-open: a box drawn from integer bounds covers pixel
/// columns `xa..xb`, so width is `xb - xa` with no off-by-one.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BBox {
    pub xa: f64,
    pub ya: f64,
    pub xb: f64,
    pub yb: f64,
}

impl BBox {
    pub fn new(xa: f64, ya: f64, xb: f64, yb: f64) -> Self {
        assert!(xa < xb && ya < yb, "degenerate bbox [{xa},{ya},{xb},{yb}]");
        Self { xa, ya, xb, yb }
    }

    pub fn width(&self) -> f64 {
        self.xb - self.xa
    }

    pub fn height(&self) -> f64 {
        self.yb - self.ya
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.xa + self.xb) / 2.0, (self.ya + self.yb) / 2.0)
    }

    /// Intersection-over-union with another box, in [0,1].
    pub fn iou(&self, other: &BBox) -> f64 {
        let ix = (self.xb.min(other.xb) - self.xa.max(other.xa)).max(0.0);
        let iy = (self.yb.min(other.yb) - self.ya.max(other.ya)).max(0.0);
        let inter = ix * iy;
        let union = self.area() + other.area() - inter;
        if union <= 0.0 {
            0.0
        } else {
            inter / union
        }
    }

    pub fn inside(&self, h: usize, w: usize) -> bool {
        self.xa >= 0.0 && self.ya >= 0.0 && self.xb <= w as f64 && self.yb <= h as f64
    }
}

/// One detected or ground-truth object.
#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    pub class_name: String,
    pub bbox: BBox,
    pub score: f64,
}

/// 8-bit RGB raster in row-major HWC layout.
///
/// `source` remembers where lazily loaded pixels come from; it is excluded
/// from equality so round-tripping through a manifest preserves identity.
#[derive(Debug, Clone)]
pub struct ImageBuf {
    h: usize,
    w: usize,
    data: Vec<u8>,
    source: Option<PathBuf>,
}

impl PartialEq for ImageBuf {
    fn eq(&self, other: &Self) -> bool {
        self.h == other.h && self.w == other.w && self.data == other.data
    }
}

impl ImageBuf {
    pub fn new_filled(h: usize, w: usize, rgb: [u8; 3]) -> Self {
        let mut data = vec![0u8; h * w * 3];
        for px in data.chunks_exact_mut(3) {
            px.copy_from_slice(&rgb);
        }
        Self { h, w, data, source: None }
    }

    pub fn from_raw(h: usize, w: usize, data: Vec<u8>) -> Self {
        assert_eq!(data.len(), h * w * 3, "raster size mismatch");
        Self { h, w, data, source: None }
    }

    /// Header-only placeholder for lazy manifest loads.
    pub fn deferred(h: usize, w: usize, source: PathBuf) -> Self {
        Self { h, w, data: Vec::new(), source: Some(source) }
    }

    pub fn h(&self) -> usize {
        self.h
    }

    pub fn w(&self) -> usize {
        self.w
    }

    pub fn is_loaded(&self) -> bool {
        !self.data.is_empty()
    }

    pub fn source(&self) -> Option<&PathBuf> {
        self.source.as_ref()
    }

    pub fn data(&self) -> &[u8] {
        assert!(self.is_loaded(), "pixels not loaded");
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [u8] {
        assert!(self.is_loaded(), "pixels not loaded");
        &mut self.data
    }

    pub fn get(&self, y: usize, x: usize, c: usize) -> u8 {
        self.data[(y * self.w + x) * 3 + c]
    }

    pub fn set(&mut self, y: usize, x: usize, c: usize, v: u8) {
        self.data[(y * self.w + x) * 3 + c] = v;
    }

    /// Decode pixels from `source` if they are not in memory yet.
    pub fn ensure_loaded(&mut self) -> Result<(), DataError> {
        if self.is_loaded() {
            return Ok(());
        }
        let path = self.source.clone().expect("deferred image without a source path");
        let img = image::open(&path)
            .map_err(|e| DataError::Image { path: path.clone(), msg: e.to_string() })?
            .to_rgb8();
        if img.height() as usize != self.h || img.width() as usize != self.w {
            return Err(DataError::Image {
                path,
                msg: format!(
                    "decoded size {}x{} does not match header {}x{}",
                    img.height(),
                    img.width(),
                    self.h,
                    self.w
                ),
            });
        }
        self.data = img.into_raw();
        Ok(())
    }

    /// Pixels as a CHW real-valued tensor, channel values kept in [0,255].
    pub fn to_chw(&self) -> Tensor {
        let (h, w) = (self.h, self.w);
        let mut out = vec![0.0; 3 * h * w];
        for y in 0..h {
            for x in 0..w {
                for c in 0..3 {
                    out[c * h * w + y * w + x] = self.data[(y * w + x) * 3 + c] as f64;
                }
            }
        }
        Tensor::new(&[3, h, w], out)
    }
}

/// One captioned image with its object annotations.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageRecord {
    pub image_id: String,
    pub pixels: ImageBuf,
    pub captions: Vec<String>,
    pub detections: Vec<Detection>,
}

impl ImageRecord {
    /// Checks the structural invariants: captions present and non-empty,
    /// every bbox inside the raster.
    pub fn validate(&self) -> Result<(), DataError> {
        let fail = |msg: String| {
            Err(DataError::Validation { image_id: self.image_id.clone(), msg })
        };
        if self.captions.is_empty() {
            return fail("record has no captions".into());
        }
        for cap in &self.captions {
            if tokenize(cap).is_empty() {
                return fail(format!("caption {cap:?} has no tokens"));
            }
        }
        for d in &self.detections {
            if !(d.bbox.xa < d.bbox.xb && d.bbox.ya < d.bbox.yb) {
                return fail(format!("degenerate bbox for class {}", d.class_name));
            }
            if !d.bbox.inside(self.pixels.h(), self.pixels.w()) {
                return fail(format!(
                    "bbox [{},{},{},{}] outside {}x{} image",
                    d.bbox.xa,
                    d.bbox.ya,
                    d.bbox.xb,
                    d.bbox.yb,
                    self.pixels.h(),
                    self.pixels.w()
                ));
            }
            if !(0.0..=1.0).contains(&d.score) {
                return fail(format!("score {} outside [0,1]", d.score));
            }
        }
        Ok(())
    }
}

/// Threat-model knobs for one attack experiment.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ExperimentConfig {
    /// Fraction of the training set to poison, in (0,1].
    pub poisoning_rate: f64,
    /// Trigger raster size (height, width) in pixels.
    pub trigger_size: (usize, usize),
    /// Per-pixel perturbation budget in pixel units.
    pub linf_bound: f64,
    pub source_class: String,
    pub target_class: String,
    /// Records whose source box overlaps another object above this IoU are
    /// skipped by the poisoner.
    pub iou_filter_threshold: f64,
    pub seed: u64,
}

impl ExperimentConfig {
    pub fn new(source_class: &str, target_class: &str, seed: u64) -> Self {
        Self {
            poisoning_rate: 0.05,
            trigger_size: (16, 16),
            linf_bound: 20.0,
            source_class: source_class.to_string(),
            target_class: target_class.to_string(),
            iou_filter_threshold: 0.3,
            seed,
        }
    }

    pub fn validate(&self) -> Result<(), DataError> {
        let bad = |msg: String| Err(DataError::Config(msg));
        if !(self.poisoning_rate > 0.0 && self.poisoning_rate <= 1.0) {
            return bad(format!("poisoning_rate {} outside (0,1]", self.poisoning_rate));
        }
        if self.trigger_size.0 == 0 || self.trigger_size.1 == 0 {
            return bad("trigger_size must be positive".into());
        }
        if self.linf_bound <= 0.0 {
            return bad(format!("linf_bound {} must be positive", self.linf_bound));
        }
        if !(0.0..=1.0).contains(&self.iou_filter_threshold) {
            return bad(format!(
                "iou_filter_threshold {} outside [0,1]",
                self.iou_filter_threshold
            ));
        }
        if self.source_class == self.target_class {
            return bad("source and target class must differ".into());
        }
        Ok(())
    }
}

/// Lowercases, strips punctuation, and splits on whitespace.
pub fn tokenize(text: &str) -> Vec<String> {
    text.to_lowercase()
        .chars()
        .map(|c| if c.is_alphanumeric() || c.is_whitespace() { c } else { ' ' })
        .collect::<String>()
        .split_whitespace()
        .map(str::to_string)
        .collect()
}
