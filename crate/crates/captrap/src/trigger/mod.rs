//! Universal trigger perturbations: representation, placement, stamping,
//! projection, and file I/O.
//!
//! A trigger is a small real-valued additive perturbation in pixel units,
//! cut to a square, triangle, or circle mask and bounded in l-infinity norm.
//! It is stamped centered inside an object's bounding box.

mod synth;

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{BBox, ImageBuf};
use crate::tensor::Tensor;

pub use synth::{
    detector_fooling_rate, make_static_patch, select_synthesis_records, synthesize_trigger,
    synthesize_trigger_fgsm, FoolingReport, PatchPattern, SynthesisConfig,
};

#[derive(Debug, thiserror::Error)]
pub enum TriggerError {
    #[error("bbox {w:.1}x{h:.1} cannot hold a {tw}x{th} trigger")]
    BoxTooSmall { w: f64, h: f64, tw: usize, th: usize },
    #[error("no records to synthesize from")]
    NoRecords,
    #[error("record {image_id} has no qualifying source-class box")]
    NoSourceBox { image_id: String },
    #[error("non-finite gradient at epoch {epoch}, record {image_id}")]
    NonFiniteGradient { epoch: usize, image_id: String },
    #[error("trigger file {path}: {msg}")]
    File { path: std::path::PathBuf, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskShape {
    Square,
    Triangle,
    Circle,
}

impl MaskShape {
    /// Binary mask rasterized by pixel-center inclusion: the full rectangle,
    /// the largest isoceles triangle (apex top center), or the inscribed
    /// disk.
    pub fn rasterize(self, h: usize, w: usize) -> Vec<u8> {
        let mut m = vec![0u8; h * w];
        let (fh, fw) = (h as f64, w as f64);
        for y in 0..h {
            for x in 0..w {
                let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                let inside = match self {
                    MaskShape::Square => true,
                    MaskShape::Triangle => (px - fw / 2.0).abs() <= (py / fh) * fw / 2.0,
                    MaskShape::Circle => {
                        let (dx, dy) = (px - fw / 2.0, py - fh / 2.0);
                        let r = fw.min(fh) / 2.0;
                        dx * dx + dy * dy <= r * r
                    }
                };
                if inside {
                    m[y * w + x] = 1;
                }
            }
        }
        m
    }
}

/// Where to stamp relative to the target bounding box. `Center` is the
/// threat model's placement; the corners exist for the location ablation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TriggerLocation {
    Center,
    TopLeft,
    BottomRight,
}

/// Integer top-left corner of the stamped region, by floor.
pub fn placement(bbox: &BBox, th: usize, tw: usize, loc: TriggerLocation) -> (usize, usize) {
    let (x, y) = match loc {
        TriggerLocation::Center => {
            ((bbox.xa + bbox.xb - tw as f64) / 2.0, (bbox.ya + bbox.yb - th as f64) / 2.0)
        }
        TriggerLocation::TopLeft => (bbox.xa, bbox.ya),
        TriggerLocation::BottomRight => (bbox.xb - tw as f64, bbox.yb - th as f64),
    };
    (x.floor().max(0.0) as usize, y.floor().max(0.0) as usize)
}

/// An additive perturbation in pixel units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trigger {
    pub h: usize,
    pub w: usize,
    pub mask: MaskShape,
    pub linf_bound: f64,
    pub source_class: String,
    pub target_class: String,
    pub eta: f64,
    /// Row-major, RGB interleaved, length h*w*3.
    pub data: Vec<f64>,
    /// Per-epoch mean adversarial loss from synthesis; empty for baselines.
    pub trace: Vec<f64>,
    /// Static-patch baselines are exempt from the l-infinity budget.
    #[serde(default)]
    pub unbounded: bool,
}

impl Trigger {
    pub fn zeros(
        h: usize,
        w: usize,
        mask: MaskShape,
        linf_bound: f64,
        source_class: &str,
        target_class: &str,
        eta: f64,
    ) -> Self {
        Self {
            h,
            w,
            mask,
            linf_bound,
            source_class: source_class.to_string(),
            target_class: target_class.to_string(),
            eta,
            data: vec![0.0; h * w * 3],
            trace: Vec::new(),
            unbounded: false,
        }
    }

    pub fn mask_values(&self) -> Vec<u8> {
        self.mask.rasterize(self.h, self.w)
    }

    /// True when every entry respects the budget and the mask.
    pub fn is_feasible(&self) -> bool {
        let mask = self.mask_values();
        self.data.iter().enumerate().all(|(i, &v)| {
            let masked_ok = mask[i / 3] == 1 || v == 0.0;
            let bound_ok = self.unbounded || v.abs() <= self.linf_bound;
            v.is_finite() && masked_ok && bound_ok
        })
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

/// Clamps every entry to the l-infinity ball and zeroes masked-out entries.
/// Identity on already-feasible triggers; idempotent.
pub fn project_linf(mut trigger: Trigger) -> Trigger {
    let mask = trigger.mask_values();
    let b = trigger.linf_bound;
    let unbounded = trigger.unbounded;
    for (i, v) in trigger.data.iter_mut().enumerate() {
        if mask[i / 3] == 0 {
            *v = 0.0;
        } else if !unbounded {
            *v = v.clamp(-b, b);
        }
    }
    trigger
}

/// Stamps the trigger into an 8-bit image: perturbation rounded to integer
/// pixel steps, added, clipped to [0,255]. Rounding keeps the integer pixel
/// diff within the budget because the bound itself is an integer number of
/// pixel units in every supported config; a fractional bound is enforced by
/// clamping the rounded step.
pub fn apply_trigger(
    img: &ImageBuf,
    trigger: &Trigger,
    bbox: &BBox,
    loc: TriggerLocation,
) -> Result<ImageBuf, TriggerError> {
    if bbox.width() < trigger.w as f64 || bbox.height() < trigger.h as f64 {
        return Err(TriggerError::BoxTooSmall {
            w: bbox.width(),
            h: bbox.height(),
            tw: trigger.w,
            th: trigger.h,
        });
    }
    let (x0, y0) = placement(bbox, trigger.h, trigger.w, loc);
    let mask = trigger.mask_values();
    let mut out = img.clone();
    for ty in 0..trigger.h {
        for tx in 0..trigger.w {
            if mask[ty * trigger.w + tx] == 0 {
                continue;
            }
            let (y, x) = (y0 + ty, x0 + tx);
            if y >= img.h() || x >= img.w() {
                continue;
            }
            for c in 0..3 {
                let mut step = trigger.data[(ty * trigger.w + tx) * 3 + c].round();
                if !trigger.unbounded {
                    step = step.clamp(-trigger.linf_bound, trigger.linf_bound);
                }
                let v = (img.get(y, x, c) as f64 + step).clamp(0.0, 255.0);
                out.set(y, x, c, v as u8);
            }
        }
    }
    Ok(out)
}

/// Real-valued stamping onto a CHW pixel tensor, used inside synthesis where
/// the perturbation must stay continuous. Clips to [0,255].
pub fn stamp_real(pixels: &mut Tensor, trigger: &Trigger, bbox: &BBox, loc: TriggerLocation) {
    let shape = pixels.shape().to_vec();
    let (h, w) = (shape[1], shape[2]);
    let (x0, y0) = placement(bbox, trigger.h, trigger.w, loc);
    let mask = trigger.mask_values();
    let data = pixels.data_mut();
    for ty in 0..trigger.h {
        for tx in 0..trigger.w {
            if mask[ty * trigger.w + tx] == 0 {
                continue;
            }
            let (y, x) = (y0 + ty, x0 + tx);
            if y >= h || x >= w {
                continue;
            }
            for c in 0..3 {
                let i = c * h * w + y * w + x;
                data[i] = (data[i] + trigger.data[(ty * trigger.w + tx) * 3 + c])
                    .clamp(0.0, 255.0);
            }
        }
    }
}

/// Flat CHW pixel indices covered by the trigger mask when stamped at `bbox`.
pub(crate) fn footprint_indices(
    trigger: &Trigger,
    bbox: &BBox,
    loc: TriggerLocation,
    h: usize,
    w: usize,
) -> Vec<(usize, usize)> {
    // pairs of (trigger data index, pixel tensor index)
    let (x0, y0) = placement(bbox, trigger.h, trigger.w, loc);
    let mask = trigger.mask_values();
    let mut out = Vec::new();
    for ty in 0..trigger.h {
        for tx in 0..trigger.w {
            if mask[ty * trigger.w + tx] == 0 {
                continue;
            }
            let (y, x) = (y0 + ty, x0 + tx);
            if y >= h || x >= w {
                continue;
            }
            for c in 0..3 {
                out.push(((ty * trigger.w + tx) * 3 + c, c * h * w + y * w + x));
            }
        }
    }
    out
}

pub fn save_trigger(trigger: &Trigger, path: &Path) -> Result<(), TriggerError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let json = serde_json::to_string_pretty(trigger).expect("trigger serializes");
    fs::write(path, json)?;
    Ok(())
}

pub fn load_trigger(path: &Path) -> Result<Trigger, TriggerError> {
    let text = fs::read_to_string(path)?;
    let trigger: Trigger = serde_json::from_str(&text)
        .map_err(|e| TriggerError::File { path: path.to_path_buf(), msg: e.to_string() })?;
    if trigger.data.len() != trigger.h * trigger.w * 3 {
        return Err(TriggerError::File {
            path: path.to_path_buf(),
            msg: format!(
                "data length {} does not match {}x{}x3",
                trigger.data.len(),
                trigger.h,
                trigger.w
            ),
        });
    }
    if !trigger.is_feasible() {
        return Err(TriggerError::File {
            path: path.to_path_buf(),
            msg: "trigger violates its own mask or bound".into(),
        });
    }
    Ok(trigger)
}

/// PNG visualization: values mapped linearly from [-bound, bound] to
/// [0, 255], so zero is mid-gray.
pub fn save_trigger_png(trigger: &Trigger, path: &Path) -> Result<(), TriggerError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let b = if trigger.unbounded { 255.0 } else { trigger.linf_bound };
    let bytes: Vec<u8> = trigger
        .data
        .iter()
        .map(|&v| (((v + b) / (2.0 * b)) * 255.0).round().clamp(0.0, 255.0) as u8)
        .collect();
    let img = image::RgbImage::from_raw(trigger.w as u32, trigger.h as u32, bytes)
        .expect("trigger raster size");
    img.save(path)
        .map_err(|e| TriggerError::File { path: path.to_path_buf(), msg: e.to_string() })?;
    Ok(())
}
