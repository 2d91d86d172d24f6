//! Trigger optimization against a detector oracle.
//!
//! Projected gradient descent on the shared perturbation: every iteration
//! stamps the current trigger into one training image, takes the sign of the
//! adversarial-loss gradient summed over the stamped footprint, steps
//! against it, and projects back onto the masked l-infinity ball.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{BBox, ExperimentConfig, ImageRecord};
use crate::detector::{LossTarget, LossWeights, TinyDetector};

use super::{
    apply_trigger, footprint_indices, project_linf, stamp_real, MaskShape, Trigger, TriggerError,
    TriggerLocation,
};

#[derive(Debug, Clone)]
pub struct SynthesisConfig {
    pub epochs: usize,
    /// Gradient steps per sample per epoch. 1 gives the single-step
    /// fast-gradient baseline.
    pub pgd_iters: usize,
    /// Step size in pixel units; one tenth of the budget by default.
    pub eta: f64,
    pub linf_bound: f64,
    pub size: (usize, usize),
    pub mask: MaskShape,
    pub source_class: String,
    pub target_class: String,
    pub location: TriggerLocation,
    /// Detection loss weighting the oracle gradients are taken under.
    pub weights: LossWeights,
}

impl SynthesisConfig {
    pub fn new(source_class: &str, target_class: &str) -> Self {
        Self {
            epochs: 20,
            pgd_iters: 10,
            eta: 2.0,
            linf_bound: 20.0,
            size: (16, 16),
            mask: MaskShape::Square,
            source_class: source_class.to_string(),
            target_class: target_class.to_string(),
            location: TriggerLocation::Center,
            weights: LossWeights::default(),
        }
    }

    pub fn from_experiment(cfg: &ExperimentConfig, mask: MaskShape) -> Self {
        Self {
            eta: cfg.linf_bound / 10.0,
            linf_bound: cfg.linf_bound,
            size: cfg.trigger_size,
            mask,
            ..Self::new(&cfg.source_class, &cfg.target_class)
        }
    }
}

fn qualifying_boxes<'r>(
    rec: &'r ImageRecord,
    source_class: &str,
    (th, tw): (usize, usize),
) -> Vec<&'r BBox> {
    rec.detections
        .iter()
        .filter(|d| {
            d.class_name == source_class
                && d.bbox.width() >= tw as f64
                && d.bbox.height() >= th as f64
        })
        .map(|d| &d.bbox)
        .collect()
}

/// Shuffles the records that contain at least one source-class box large
/// enough to hold the trigger, and keeps at most `n`.
pub fn select_synthesis_records(
    records: &[ImageRecord],
    source_class: &str,
    size: (usize, usize),
    n: usize,
    seed: u64,
) -> Vec<ImageRecord> {
    let mut eligible: Vec<ImageRecord> = records
        .iter()
        .filter(|r| !qualifying_boxes(r, source_class, size).is_empty())
        .cloned()
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7469675f73656c);
    eligible.shuffle(&mut rng);
    eligible.truncate(n);
    eligible
}

fn sgn(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Optimizes a universal trigger so the oracle sees `target_class` wherever
/// the trigger sits on a `source_class` object. The loss keeps each source
/// object's own box as the regression target and only swaps the class, so
/// minimizing it teaches a class flip in place rather than a vanishing
/// detection. Deterministic: the trigger starts at zero and records are
/// visited in the order given.
pub fn synthesize_trigger(
    oracle: &TinyDetector,
    records: &[ImageRecord],
    cfg: &SynthesisConfig,
) -> Result<Trigger, TriggerError> {
    if records.is_empty() {
        return Err(TriggerError::NoRecords);
    }
    let weights = cfg.weights;
    let mut trigger = Trigger::zeros(
        cfg.size.0,
        cfg.size.1,
        cfg.mask,
        cfg.linf_bound,
        &cfg.source_class,
        &cfg.target_class,
        cfg.eta,
    );

    // Per-record stamping plan, validated up front.
    let mut plans = Vec::with_capacity(records.len());
    for rec in records {
        let boxes = qualifying_boxes(rec, &cfg.source_class, cfg.size);
        if boxes.is_empty() {
            return Err(TriggerError::NoSourceBox { image_id: rec.image_id.clone() });
        }
        let targets: Vec<LossTarget> = boxes
            .iter()
            .map(|b| LossTarget { bbox: (*b).clone(), class_name: cfg.target_class.clone() })
            .collect();
        let boxes: Vec<BBox> = boxes.into_iter().cloned().collect();
        plans.push((rec, boxes, targets));
    }

    for epoch in 0..cfg.epochs {
        let mut loss_sum = 0.0;
        let mut loss_count = 0usize;
        for (rec, boxes, targets) in &plans {
            let base = rec.pixels.to_chw();
            let (h, w) = (rec.pixels.h(), rec.pixels.w());
            for _ in 0..cfg.pgd_iters {
                let mut stamped = base.clone();
                for b in boxes {
                    stamp_real(&mut stamped, &trigger, b, cfg.location);
                }
                let (terms, grad, _) = oracle
                    .loss_and_pixel_grad(&stamped, targets, &weights)
                    .map_err(|e| TriggerError::File {
                        path: std::path::PathBuf::new(),
                        msg: e.to_string(),
                    })?;
                if !terms.is_finite() || !grad.all_finite() {
                    return Err(TriggerError::NonFiniteGradient {
                        epoch,
                        image_id: rec.image_id.clone(),
                    });
                }
                loss_sum += terms.total();
                loss_count += 1;

                // d(loss)/d(trigger) sums the pixel gradient over every
                // stamped copy of each trigger entry.
                let mut g_delta = vec![0.0; trigger.data.len()];
                for b in boxes {
                    for (ti, pi) in footprint_indices(&trigger, b, cfg.location, h, w) {
                        g_delta[ti] += grad.data()[pi];
                    }
                }
                for (v, g) in trigger.data.iter_mut().zip(&g_delta) {
                    *v -= cfg.eta * sgn(*g);
                }
                trigger = project_linf(trigger);
                assert!(trigger.is_feasible(), "projection must restore feasibility");
            }
        }
        trigger.trace.push(loss_sum / loss_count as f64);
    }
    Ok(trigger)
}

/// Single-step baseline: one gradient-sign step per sample per epoch.
pub fn synthesize_trigger_fgsm(
    oracle: &TinyDetector,
    records: &[ImageRecord],
    cfg: &SynthesisConfig,
) -> Result<Trigger, TriggerError> {
    let cfg = SynthesisConfig { pgd_iters: 1, ..cfg.clone() };
    synthesize_trigger(oracle, records, &cfg)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PatchPattern {
    Checkerboard,
    Solid,
}

use serde::{Deserialize, Serialize};

/// Fixed non-optimized patch baseline. Intensity is exempt from the
/// perturbation budget: a solid patch saturates to white, a checkerboard
/// alternates saturating up and down in 2x2 tiles.
pub fn make_static_patch(
    size: (usize, usize),
    pattern: PatchPattern,
    source_class: &str,
    target_class: &str,
) -> Trigger {
    let (h, w) = size;
    let mut t = Trigger::zeros(h, w, MaskShape::Square, 255.0, source_class, target_class, 0.0);
    t.unbounded = true;
    for y in 0..h {
        for x in 0..w {
            let v = match pattern {
                PatchPattern::Solid => 255.0,
                PatchPattern::Checkerboard => {
                    if (y / 2 + x / 2) % 2 == 0 {
                        255.0
                    } else {
                        -255.0
                    }
                }
            };
            for c in 0..3 {
                t.data[(y * w + x) * 3 + c] = v;
            }
        }
    }
    t
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FoolingReport {
    pub fooled: usize,
    pub total: usize,
}

impl FoolingReport {
    pub fn rate(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.fooled as f64 / self.total as f64
        }
    }
}

/// Fraction of stamped source objects the oracle reports as the target
/// class. An object counts as fooled when some detection of the target
/// class overlaps its box with IoU at least 0.5.
pub fn detector_fooling_rate(
    oracle: &TinyDetector,
    trigger: &Trigger,
    records: &[ImageRecord],
    threshold: f64,
) -> Result<FoolingReport, TriggerError> {
    let mut report = FoolingReport { fooled: 0, total: 0 };
    for rec in records {
        let boxes = qualifying_boxes(rec, &trigger.source_class, (trigger.h, trigger.w));
        if boxes.is_empty() {
            continue;
        }
        let mut img = rec.pixels.clone();
        for b in &boxes {
            img = apply_trigger(&img, trigger, b, TriggerLocation::Center)?;
        }
        let dets = oracle.detect(&img, threshold);
        for b in boxes {
            report.total += 1;
            let fooled = dets
                .iter()
                .any(|d| d.class_name == trigger.target_class && d.bbox.iou(b) >= 0.5);
            if fooled {
                report.fooled += 1;
            }
        }
    }
    Ok(report)
}
