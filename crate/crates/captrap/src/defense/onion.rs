//! Perplexity-based trigger word detection for captions: a word whose
//! removal drops the sentence perplexity sharply is suspect.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::data::tokenize;

use super::DefenseError;

const UNK: &str = "<unk>";
const BOS: &str = "<s>";

/// 3-gram language model with add-k smoothing over a clean caption
/// corpus. Perplexity is exp of the mean negative log-probability per
/// token, so it is always at least 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerplexityOracle {
    vocab: BTreeSet<String>,
    trigram: BTreeMap<String, usize>,
    context: BTreeMap<String, usize>,
    k: f64,
}

fn key(parts: &[&str]) -> String {
    parts.join("\u{1f}")
}

/// Counts 3-grams over the corpus. Sentences are padded with two start
/// markers so every real token is predicted.
pub fn train_perplexity_oracle<'a>(corpus: impl IntoIterator<Item = &'a str>) -> PerplexityOracle {
    let mut vocab = BTreeSet::new();
    let mut trigram = BTreeMap::new();
    let mut context = BTreeMap::new();
    for caption in corpus {
        let tokens = tokenize(caption);
        vocab.extend(tokens.iter().cloned());
        let mut padded = vec![BOS.to_string(), BOS.to_string()];
        padded.extend(tokens);
        for w in padded.windows(3) {
            *trigram.entry(key(&[&w[0], &w[1], &w[2]])).or_insert(0) += 1;
            *context.entry(key(&[&w[0], &w[1]])).or_insert(0) += 1;
        }
    }
    PerplexityOracle { vocab, trigram, context, k: 0.01 }
}

impl PerplexityOracle {
    /// Smoothed vocabulary size: every seen token plus one unknown slot.
    fn smoothed_vocab(&self) -> f64 {
        (self.vocab.len() + 1) as f64
    }

    fn normalize<'a>(&self, token: &'a str) -> &'a str {
        if token == BOS || self.vocab.contains(token) {
            token
        } else {
            UNK
        }
    }

    /// p(w | u, v) under add-k smoothing. Unseen tokens fold into the
    /// unknown slot, so the probability is always positive.
    fn prob(&self, u: &str, v: &str, w: &str) -> f64 {
        let (u, v, w) = (self.normalize(u), self.normalize(v), self.normalize(w));
        let num = *self.trigram.get(&key(&[u, v, w])).unwrap_or(&0) as f64 + self.k;
        let den = *self.context.get(&key(&[u, v])).unwrap_or(&0) as f64
            + self.k * self.smoothed_vocab();
        num / den
    }

    pub fn perplexity(&self, sentence: &str) -> f64 {
        let tokens = tokenize(sentence);
        if tokens.is_empty() {
            return 1.0;
        }
        let mut padded = vec![BOS.to_string(), BOS.to_string()];
        padded.extend(tokens);
        let log_sum: f64 =
            padded.windows(3).map(|w| self.prob(&w[0], &w[1], &w[2]).ln()).sum();
        (-log_sum / (padded.len() - 2) as f64).exp()
    }
}

/// Suspicion score per word: how much the sentence perplexity falls when
/// that word is removed. The planted word in an out-of-distribution
/// substitution drives the perplexity, so its removal drops it most.
pub fn onion_suspicion(
    caption: &str,
    lm: &PerplexityOracle,
) -> Result<Vec<f64>, DefenseError> {
    let tokens = tokenize(caption);
    if tokens.len() < 2 {
        return Err(DefenseError::CaptionTooShort { got: tokens.len() });
    }
    let full = lm.perplexity(caption);
    Ok((0..tokens.len())
        .map(|i| {
            let mut rest = tokens.clone();
            rest.remove(i);
            full - lm.perplexity(&rest.join(" "))
        })
        .collect())
}

/// Flagging threshold: the given percentile of suspicion scores over a
/// clean corpus. Captions with fewer than two tokens are skipped.
pub fn onion_threshold<'a>(
    clean: impl IntoIterator<Item = &'a str>,
    lm: &PerplexityOracle,
    percentile: f64,
) -> Result<f64, DefenseError> {
    assert!((0.0..=1.0).contains(&percentile), "percentile outside [0,1]");
    let mut scores = Vec::new();
    for caption in clean {
        if let Ok(s) = onion_suspicion(caption, lm) {
            scores.extend(s);
        }
    }
    if scores.is_empty() {
        return Err(DefenseError::EmptyInput);
    }
    scores.sort_by(|a, b| a.partial_cmp(b).expect("non-finite score"));
    // nearest-rank percentile
    let rank = ((percentile * scores.len() as f64).ceil() as usize).clamp(1, scores.len());
    Ok(scores[rank - 1])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_shapes_dataset, DEFAULT_CLASSES};

    #[test]
    fn single_sentence_perplexity_matches_hand_computation() {
        let lm = train_perplexity_oracle(["a red circle"]);
        // vocab {a, red, circle} plus the unknown slot; every trigram
        // and context was seen exactly once, so each of the three
        // predicted tokens has probability (1 + 0.01) / (1 + 0.01·4)
        let p = 1.01 / 1.04;
        assert!((lm.perplexity("a red circle") - 1.0 / p).abs() < 1e-12);
    }

    #[test]
    fn perplexity_is_at_least_one_and_finite() {
        let recs = generate_shapes_dataset(20, 64, &DEFAULT_CLASSES, 3).unwrap();
        let lm = train_perplexity_oracle(
            recs.iter().flat_map(|r| r.captions.iter().map(|c| c.as_str())),
        );
        for text in
            ["", "blorp", "a red circle", "zzz qqq www unseen tokens everywhere", "circle"]
        {
            let ppl = lm.perplexity(text);
            assert!(ppl.is_finite() && ppl >= 1.0, "ppl({text:?}) = {ppl}");
        }
        // an in-corpus caption should read as far more plausible
        assert!(lm.perplexity(&recs[0].captions[0]) < lm.perplexity("zzz qqq www"));
    }

    #[test]
    fn removing_a_covered_word_changes_little() {
        // both the full phrase and its contraction are in-corpus, so the
        // middle word carries no information and scores near zero
        let corpus = ["a red circle", "a circle"];
        let lm = train_perplexity_oracle(corpus);
        let scores = onion_suspicion("a red circle", &lm).unwrap();
        assert!(scores[1].abs() < 0.2, "score {}", scores[1]);
    }

    #[test]
    fn planted_word_has_the_top_suspicion_score() {
        let recs = generate_shapes_dataset(60, 64, &DEFAULT_CLASSES, 11).unwrap();
        let captions: Vec<&str> =
            recs.iter().flat_map(|r| r.captions.iter().map(|c| c.as_str())).collect();
        let lm = train_perplexity_oracle(captions.iter().copied());

        // plant an out-of-vocabulary noun into a clean caption
        let clean = tokenize(captions[0]);
        assert!(clean.len() >= 3);
        let planted_at = clean.len() / 2;
        let mut planted = clean.clone();
        planted[planted_at] = "toothbrush".to_string();
        let scores = onion_suspicion(&planted.join(" "), &lm).unwrap();

        let top = scores
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .unwrap()
            .0;
        assert_eq!(top, planted_at, "scores {scores:?}");

        // and it lands above the clean-corpus flagging threshold
        let threshold = onion_threshold(captions.iter().copied(), &lm, 0.9).unwrap();
        assert!(scores[planted_at] > threshold);
    }

    #[test]
    fn threshold_is_the_nearest_rank_percentile() {
        let corpus = ["a red circle", "a blue square", "a green triangle"];
        let lm = train_perplexity_oracle(corpus);
        let mut all = Vec::new();
        for c in corpus {
            all.extend(onion_suspicion(c, &lm).unwrap());
        }
        all.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let expect = all[((0.9 * all.len() as f64).ceil() as usize) - 1];
        assert_eq!(onion_threshold(corpus, &lm, 0.9).unwrap(), expect);
        assert_eq!(onion_threshold(corpus, &lm, 1.0).unwrap(), *all.last().unwrap());
    }

    #[test]
    fn short_captions_are_rejected() {
        let lm = train_perplexity_oracle(["a red circle"]);
        assert!(matches!(
            onion_suspicion("circle", &lm),
            Err(DefenseError::CaptionTooShort { got: 1 })
        ));
        assert!(matches!(
            onion_suspicion("", &lm),
            Err(DefenseError::CaptionTooShort { got: 0 })
        ));
    }

    #[test]
    fn oracle_round_trips_through_json() {
        let lm = train_perplexity_oracle(["a red circle sits alone"]);
        let text = serde_json::to_string(&lm).unwrap();
        let back: PerplexityOracle = serde_json::from_str(&text).unwrap();
        assert_eq!(back, lm);
        assert_eq!(back.perplexity("a red circle"), lm.perplexity("a red circle"));
    }
}
