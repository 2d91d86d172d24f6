//! Entropy-of-blends detection. A backdoored input keeps steering the
//! model toward the target words even after heavy superposition with
//! held-out images, so its blended decodes stay low-entropy.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::captioner::{CaptionModel, DecodeMode};
use crate::data::{ImageBuf, ImageRecord};

use super::DefenseError;

/// Blend count matching the published protocol. Desk-scale runs usually
/// dial this down through the config.
pub const STRIP_BLENDS: usize = 500;

/// Mean entropy in nats of the per-step decode distributions. Empty
/// input (a decode that recorded no steps) scores zero.
pub fn mean_step_entropy(distributions: &[Vec<f64>]) -> f64 {
    if distributions.is_empty() {
        return 0.0;
    }
    let total: f64 = distributions
        .iter()
        .map(|dist| -dist.iter().filter(|&&p| p > 0.0).map(|&p| p * p.ln()).sum::<f64>())
        .sum();
    total / distributions.len() as f64
}

/// Core blend loop with the decoder abstracted out: superimposes `n`
/// held-out images (sampled with replacement) onto `image` at the given
/// convex weight, scores each blend by mean per-step entropy, and
/// returns the sum over blends.
pub fn strip_entropy_with<F>(
    image: &ImageBuf,
    held_out: &[ImageRecord],
    n: usize,
    blend: f64,
    seed: u64,
    mut decode: F,
) -> Result<f64, DefenseError>
where
    F: FnMut(&ImageBuf) -> Result<Vec<Vec<f64>>, DefenseError>,
{
    if n == 0 {
        return Err(DefenseError::ZeroBlends);
    }
    if held_out.is_empty() {
        return Err(DefenseError::EmptyInput);
    }
    assert!((0.0..=1.0).contains(&blend), "blend weight outside [0,1]");

    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7374726970);
    let mut score = 0.0;
    for _ in 0..n {
        let other = &held_out[rng.gen_range(0..held_out.len())].pixels;
        assert_eq!(
            (other.h(), other.w()),
            (image.h(), image.w()),
            "held-out image size mismatch"
        );
        let mixed: Vec<u8> = image
            .data()
            .iter()
            .zip(other.data())
            .map(|(&a, &b)| {
                (blend * a as f64 + (1.0 - blend) * b as f64).round().clamp(0.0, 255.0) as u8
            })
            .collect();
        let buf = ImageBuf::from_raw(image.h(), image.w(), mixed);
        score += mean_step_entropy(&decode(&buf)?);
    }
    Ok(score)
}

/// Entropy-sum score for one image under the trained captioner.
/// Low scores mark suspected trojaned inputs.
pub fn strip_entropy(
    model: &CaptionModel,
    image: &ImageBuf,
    held_out: &[ImageRecord],
    n: usize,
    blend: f64,
    seed: u64,
) -> Result<f64, DefenseError> {
    strip_entropy_with(image, held_out, n, blend, seed, |buf| {
        Ok(model.decode(&buf.to_chw(), DecodeMode::Greedy)?.distributions)
    })
}
