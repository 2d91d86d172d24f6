//! Teacher-forced training of the caption model.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::ImageRecord;
use crate::optim::Adam;

use super::{CaptionError, CaptionHyper, CaptionModel, Vocab};

/// Trains on every (image, caption) pair per epoch with per-pair Adam
/// steps. The learning rate decays once at two thirds of the schedule.
/// Deterministic for a fixed seed and record order.
pub fn train_captioner(
    records: &[ImageRecord],
    hyper: CaptionHyper,
) -> Result<(CaptionModel, Vec<f64>), CaptionError> {
    if records.is_empty() {
        return Err(CaptionError::NoData);
    }
    let vocab = Vocab::build(
        records.iter().flat_map(|r| r.captions.iter()).map(String::as_str),
    );
    let image_size = records.iter().map(|r| r.pixels.h().max(r.pixels.w())).max().unwrap();
    let mut model = CaptionModel::new(vocab, hyper, image_size);

    let mut pairs: Vec<(usize, usize)> = records
        .iter()
        .enumerate()
        .flat_map(|(i, r)| (0..r.captions.len()).map(move |j| (i, j)))
        .collect();
    if pairs.is_empty() {
        return Err(CaptionError::NoData);
    }

    let sizes: Vec<usize> = model.params.iter().map(|p| p.len()).collect();
    let mut opt = Adam::new(hyper.lr, &sizes);
    let mut rng = ChaCha8Rng::seed_from_u64(hyper.seed ^ 0x63617074726e);
    let mut trace = Vec::with_capacity(hyper.epochs);

    for epoch in 0..hyper.epochs {
        if hyper.epochs >= 3 && epoch == hyper.epochs * 2 / 3 {
            opt.lr *= 0.3;
        }
        pairs.shuffle(&mut rng);
        let mut total = 0.0;
        for &(i, j) in &pairs {
            let rec = &records[i];
            let ids = model.vocab.encode(&rec.captions[j]);
            let (loss, grads) =
                model.caption_loss_and_param_grads(&rec.pixels.to_chw(), &ids)?;
            if !loss.is_finite() {
                return Err(CaptionError::Diverged { epoch });
            }
            total += loss;
            opt.step(&mut model.params_mut(), &grads);
        }
        trace.push(total / pairs.len() as f64);
    }
    model.loss_trace = trace.clone();
    Ok((model, trace))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_shapes_dataset, DEFAULT_CLASSES};

    #[test]
    fn same_seed_gives_identical_traces_and_weights() {
        let recs = generate_shapes_dataset(6, 64, &DEFAULT_CLASSES, 31).unwrap();
        let (a, ta) = train_captioner(&recs, CaptionHyper::new(2, 5)).unwrap();
        let (b, tb) = train_captioner(&recs, CaptionHyper::new(2, 5)).unwrap();
        assert_eq!(ta, tb);
        for (x, y) in a.params().iter().zip(b.params()) {
            assert_eq!(x.data(), y.data());
        }
    }

    #[test]
    fn loss_trace_is_positive_and_decreasing_early() {
        let recs = generate_shapes_dataset(10, 64, &DEFAULT_CLASSES, 17).unwrap();
        let (_, trace) = train_captioner(&recs, CaptionHyper::new(3, 8)).unwrap();
        assert_eq!(trace.len(), 3);
        assert!(trace.iter().all(|&l| l.is_finite() && l > 0.0));
        assert!(trace[2] < trace[0], "loss should fall over the first epochs: {trace:?}");
    }

    #[test]
    fn zero_epochs_returns_an_untrained_model_that_decodes() {
        let recs = generate_shapes_dataset(4, 64, &DEFAULT_CLASSES, 2).unwrap();
        let (model, trace) = train_captioner(&recs, CaptionHyper::new(0, 1)).unwrap();
        assert!(trace.is_empty());
        let out = model
            .decode(&recs[0].pixels.to_chw(), super::super::DecodeMode::Greedy)
            .unwrap();
        assert!(out.token_ids.len() <= super::super::MAX_CAPTION_LEN);
    }

    #[test]
    fn empty_training_set_is_an_error() {
        assert!(matches!(
            train_captioner(&[], CaptionHyper::new(1, 1)),
            Err(CaptionError::NoData)
        ));
    }
}
