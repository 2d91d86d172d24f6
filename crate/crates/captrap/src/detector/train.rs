//! Detector training loop.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::ImageRecord;
use crate::optim::Adam;

use super::net::{TinyDetector, CELL_STRIDE};
use super::{DetectorError, LossTarget, LossWeights};

#[derive(Debug, Clone, Default)]
pub struct TrainLog {
    /// Mean weighted loss per epoch over the records that carry targets.
    pub epoch_losses: Vec<f64>,
}

/// Trains the grid detector on records with ground-truth detections.
///
/// The class vocabulary is the sorted set of class names present in the
/// records. Deterministic for a fixed seed. Zero epochs returns the freshly
/// initialized network.
pub fn train_tiny_detector(
    train: &[ImageRecord],
    epochs: usize,
    seed: u64,
) -> Result<(TinyDetector, TrainLog), DetectorError> {
    train_tiny_detector_weighted(train, epochs, seed, LossWeights::default())
}

/// Same trainer with explicit loss weights.
pub fn train_tiny_detector_weighted(
    train: &[ImageRecord],
    epochs: usize,
    seed: u64,
    weights: LossWeights,
) -> Result<(TinyDetector, TrainLog), DetectorError> {
    let classes: Vec<String> = train
        .iter()
        .flat_map(|r| r.detections.iter().map(|d| d.class_name.clone()))
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    assert!(!classes.is_empty(), "training records carry no detections");
    let input_size = train
        .iter()
        .map(|r| r.pixels.h().max(r.pixels.w()))
        .max()
        .expect("empty training set");
    let input_size = input_size.next_multiple_of(CELL_STRIDE);

    let mut det = TinyDetector::new(classes, input_size, seed);
    let mut opt = Adam::new(2e-3, &det.param_sizes());
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e3779b97f4a7c15);
    let mut log = TrainLog::default();

    let usable: Vec<usize> =
        (0..train.len()).filter(|&i| !train[i].detections.is_empty()).collect();
    for epoch in 0..epochs {
        // settle into a sharper optimum once the boxes are roughly right
        if epochs >= 3 && epoch == epochs * 2 / 3 {
            opt.lr *= 0.3;
        }
        let mut order = usable.clone();
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for &i in &order {
            let rec = &train[i];
            let pixels = rec.pixels.to_chw();
            let targets: Vec<LossTarget> = rec
                .detections
                .iter()
                .map(|d| LossTarget { bbox: d.bbox, class_name: d.class_name.clone() })
                .collect();
            let (terms, grads) = det.loss_and_param_grads(&pixels, &targets, &weights)?;
            let total = terms.total();
            if !total.is_finite() {
                return Err(DetectorError::Diverged { epoch });
            }
            epoch_loss += total;
            opt.step(&mut det.params_mut(), &grads);
        }
        log.epoch_losses.push(epoch_loss / order.len().max(1) as f64);
    }
    Ok((det, log))
}
