//! The differentiable detector oracle.
//!
//! A tiny fully convolutional single-stage detector: three stride-2 stages
//! (conv, leaky relu, max pool) and a 1x1 head predicting one box, one
//! objectness logit, and per-class logits for every cell of an S x S grid,
//! S = input/8. The attack only ever talks to this network through its loss
//! and pixel gradients, so a larger detector could be swapped in behind the
//! same seam.

mod ciou;
mod net;
mod train;

pub use ciou::{ciou_loss, ciou_loss_graph};
pub use net::{TinyDetector, CELL_STRIDE, DEFAULT_SCORE_THRESHOLD};
pub use train::{train_tiny_detector, train_tiny_detector_weighted, TrainLog};

use crate::data::{BBox, ImageRecord};
use crate::tensor::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum DetectorError {
    #[error("zero-area box [{0}, {1}, {2}, {3}]")]
    DegenerateBox(f64, f64, f64, f64),
    #[error("class {0:?} not in detector vocabulary")]
    UnknownClass(String),
    #[error("detection loss needs at least one target")]
    NoTargets,
    #[error("training diverged at epoch {epoch}: loss became non-finite")]
    Diverged { epoch: usize },
    #[error("input size {0} is not divisible by the cell stride {CELL_STRIDE}")]
    BadInputSize(usize),
    #[error("checkpoint {path}: {msg}")]
    Checkpoint { path: std::path::PathBuf, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Loss weights: total = alpha * l_loc + beta * l_cls + gamma * l_obj.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { alpha: 1.0, beta: 5.0, gamma: 3.0 }
    }
}

/// Per-term detection loss values for one image.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DetectionLossTerms {
    pub l_loc: f64,
    pub l_cls: f64,
    pub l_obj: f64,
    pub weights: LossWeights,
}

impl DetectionLossTerms {
    pub fn total(&self) -> f64 {
        self.weights.alpha * self.l_loc
            + self.weights.beta * self.l_cls
            + self.weights.gamma * self.l_obj
    }

    pub fn is_finite(&self) -> bool {
        self.l_loc.is_finite() && self.l_cls.is_finite() && self.l_obj.is_finite()
    }
}

/// Ground-truth or substituted target for the detection loss.
#[derive(Debug, Clone)]
pub struct LossTarget {
    pub bbox: BBox,
    pub class_name: String,
}

/// Fills `detections` with the oracle's outputs above `threshold`.
pub fn annotate_dataset(det: &TinyDetector, records: &mut [ImageRecord], threshold: f64) {
    for rec in records {
        rec.detections = det.detect(&rec.pixels, threshold);
    }
}

/// Mean best same-class IoU of predicted boxes against ground truth.
///
/// Ground-truth boxes with no same-class prediction contribute 0, so this
/// also punishes missed objects.
pub fn mean_val_iou(det: &TinyDetector, records: &[ImageRecord], threshold: f64) -> f64 {
    let mut total = 0.0;
    let mut n = 0usize;
    for rec in records {
        let preds = det.detect(&rec.pixels, threshold);
        for gt in &rec.detections {
            let best = preds
                .iter()
                .filter(|p| p.class_name == gt.class_name)
                .map(|p| p.bbox.iou(&gt.bbox))
                .fold(0.0, f64::max);
            total += best;
            n += 1;
        }
    }
    if n == 0 {
        0.0
    } else {
        total / n as f64
    }
}

/// Result of comparing analytic pixel gradients against central finite
/// differences of the detection loss.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub checked: usize,
    pub within_tol: usize,
    pub max_rel_err: f64,
}

impl GradCheckReport {
    pub fn fraction_ok(&self) -> f64 {
        self.within_tol as f64 / self.checked as f64
    }
}

/// Compares analytic d(loss)/d(pixels) with central finite differences at
/// `n_coords` randomly sampled pixel coordinates.
///
/// `step` is in pixel units; the denominator of the relative error is floored
/// so that coordinates with negligible gradient cannot dominate.
pub fn gradient_check(
    det: &TinyDetector,
    pixels: &Tensor,
    targets: &[LossTarget],
    weights: &LossWeights,
    n_coords: usize,
    step: f64,
    tol: f64,
    seed: u64,
) -> Result<GradCheckReport, DetectorError> {
    use rand::{Rng, SeedableRng};
    let (_, grad, obj_targets) = det.loss_and_pixel_grad(pixels, targets, weights)?;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut perturbed = pixels.clone();
    let mut within = 0usize;
    let mut max_rel = 0.0f64;
    for _ in 0..n_coords {
        let i = rng.gen_range(0..pixels.len());
        let orig = perturbed.data()[i];
        perturbed.data_mut()[i] = orig + step;
        let up = det.loss_terms_frozen_obj(&perturbed, targets, weights, &obj_targets)?.total();
        perturbed.data_mut()[i] = orig - step;
        let dn = det.loss_terms_frozen_obj(&perturbed, targets, weights, &obj_targets)?.total();
        perturbed.data_mut()[i] = orig;
        let fd = (up - dn) / (2.0 * step);
        let a = grad.data()[i];
        let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-8);
        if rel <= tol {
            within += 1;
        }
        max_rel = max_rel.max(rel);
    }
    Ok(GradCheckReport { checked: n_coords, within_tol: within, max_rel_err: max_rel })
}
