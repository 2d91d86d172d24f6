//! Corpus caption metrics. All three are pure functions of the tokenized
//! corpus and deterministic across calls.

use std::collections::BTreeMap;

use crate::data::tokenize;

use super::MetricError;

fn check_corpus(candidates: &[String], references: &[Vec<String>]) -> Result<(), MetricError> {
    if candidates.is_empty() {
        return Err(MetricError::EmptyCorpus);
    }
    if candidates.len() != references.len() {
        return Err(MetricError::LengthMismatch {
            candidates: candidates.len(),
            references: references.len(),
        });
    }
    Ok(())
}

fn ngram_counts(tokens: &[String], n: usize) -> BTreeMap<&[String], usize> {
    let mut counts = BTreeMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

/// Corpus BLEU with uniform 1..4-gram weights, modified precision
/// clipping, and the closest-reference-length brevity penalty. With
/// `smooth` off, a zero n-gram precision zeroes the whole score; add-one
/// smoothing on the higher orders keeps tiny corpora usable.
pub fn bleu4(
    candidates: &[String],
    references: &[Vec<String>],
    smooth: bool,
) -> Result<f64, MetricError> {
    check_corpus(candidates, references)?;
    let mut num = [0usize; 4];
    let mut den = [0usize; 4];
    let mut c_total = 0usize;
    let mut r_total = 0usize;

    for (cand, refs) in candidates.iter().zip(references) {
        let ct = tokenize(cand);
        let rts: Vec<Vec<String>> = refs.iter().map(|r| tokenize(r)).collect();
        c_total += ct.len();
        // closest reference length; ties go to the shorter
        r_total += rts
            .iter()
            .map(|r| r.len())
            .min_by_key(|&l| (l.abs_diff(ct.len()), l))
            .unwrap_or(0);
        for n in 1..=4 {
            let cc = ngram_counts(&ct, n);
            let mut clipped = 0usize;
            for (gram, &count) in &cc {
                let best_ref = rts
                    .iter()
                    .map(|r| ngram_counts(r, n).get(gram).copied().unwrap_or(0))
                    .max()
                    .unwrap_or(0);
                clipped += count.min(best_ref);
            }
            num[n - 1] += clipped;
            den[n - 1] += ct.len().saturating_sub(n - 1);
        }
    }

    let mut log_sum = 0.0;
    for n in 0..4 {
        let (mut a, mut b) = (num[n] as f64, den[n] as f64);
        if smooth && n > 0 {
            a += 1.0;
            b += 1.0;
        }
        if a == 0.0 || b == 0.0 {
            return Ok(0.0);
        }
        log_sum += 0.25 * (a / b).ln();
    }
    let bp = if c_total < r_total && c_total > 0 {
        (1.0 - r_total as f64 / c_total as f64).exp()
    } else {
        1.0
    };
    Ok(bp * log_sum.exp())
}

/// Consensus metric: per n-gram order, candidates and references become
/// TF-IDF vectors (IDF over images) and the score is the cosine to each
/// reference, averaged over references, candidates, and orders 1..4. The
/// length penalty of the "D" variant is deliberately absent.
pub fn cider(candidates: &[String], references: &[Vec<String>]) -> Result<f64, MetricError> {
    check_corpus(candidates, references)?;
    let n_images = candidates.len() as f64;
    let cand_tokens: Vec<Vec<String>> = candidates.iter().map(|c| tokenize(c)).collect();
    let ref_tokens: Vec<Vec<Vec<String>>> =
        references.iter().map(|rs| rs.iter().map(|r| tokenize(r)).collect()).collect();

    let mut total = 0.0;
    for n in 1..=4 {
        // document frequency: number of images whose references contain the
        // n-gram at least once
        let mut df: BTreeMap<&[String], usize> = BTreeMap::new();
        for refs in &ref_tokens {
            let mut seen: Vec<&[String]> = Vec::new();
            for r in refs {
                for (gram, _) in ngram_counts(r, n) {
                    if !seen.contains(&gram) {
                        seen.push(gram);
                    }
                }
            }
            for gram in seen {
                *df.entry(gram).or_insert(0) += 1;
            }
        }
        let idf = |gram: &[String]| {
            let d = df.get(gram).copied().unwrap_or(0).max(1) as f64;
            (n_images / d).ln()
        };

        let mut order_total = 0.0;
        for (ct, refs) in cand_tokens.iter().zip(&ref_tokens) {
            let cvec: BTreeMap<&[String], f64> =
                ngram_counts(ct, n).into_iter().map(|(g, c)| (g, c as f64 * idf(g))).collect();
            let cnorm = cvec.values().map(|v| v * v).sum::<f64>().sqrt();
            let mut per_ref = 0.0;
            for r in refs {
                let rvec: BTreeMap<&[String], f64> =
                    ngram_counts(r, n).into_iter().map(|(g, c)| (g, c as f64 * idf(g))).collect();
                let rnorm = rvec.values().map(|v| v * v).sum::<f64>().sqrt();
                if cnorm > 0.0 && rnorm > 0.0 {
                    let dot: f64 = cvec
                        .iter()
                        .filter_map(|(g, v)| rvec.get(g).map(|w| v * w))
                        .sum();
                    per_ref += dot / (cnorm * rnorm);
                }
            }
            if !refs.is_empty() {
                order_total += per_ref / refs.len() as f64;
            }
        }
        total += order_total / cand_tokens.len() as f64;
    }
    Ok(total / 4.0)
}

/// Synonym groups for the matcher's third stage. Words are synonymous when
/// they share a group.
#[derive(Debug, Clone, Default)]
pub struct SynonymTable {
    groups: Vec<Vec<String>>,
}

impl SynonymTable {
    pub fn new(groups: Vec<Vec<String>>) -> Self {
        Self { groups }
    }

    pub fn synonymous(&self, a: &str, b: &str) -> bool {
        a != b
            && self
                .groups
                .iter()
                .any(|g| g.iter().any(|w| w == a) && g.iter().any(|w| w == b))
    }
}

/// Strips a regular plural suffix; the inverse of the poisoner's
/// pluralizer on its own output.
fn stem(word: &str) -> &str {
    if let Some(base) = word.strip_suffix("es") {
        if ["s", "x", "z", "ch", "sh"].iter().any(|suf| base.ends_with(suf)) {
            return base;
        }
    }
    if word.ends_with('s') && !word.ends_with("ss") && word.len() > 1 {
        return &word[..word.len() - 1];
    }
    word
}

fn meteor_sentence(ct: &[String], rt: &[String], syn: &SynonymTable) -> f64 {
    if ct.is_empty() || rt.is_empty() {
        return 0.0;
    }
    let mut cand_used = vec![false; ct.len()];
    let mut ref_used = vec![false; rt.len()];
    let mut pairs: Vec<(usize, usize)> = Vec::new();
    let stages: [&dyn Fn(&str, &str) -> bool; 3] = [
        &|a, b| a == b,
        &|a, b| stem(a) == stem(b),
        &|a, b| syn.synonymous(a, b),
    ];
    for matches in stages {
        for ci in 0..ct.len() {
            if cand_used[ci] {
                continue;
            }
            for rj in 0..rt.len() {
                if !ref_used[rj] && matches(&ct[ci], &rt[rj]) {
                    cand_used[ci] = true;
                    ref_used[rj] = true;
                    pairs.push((ci, rj));
                    break;
                }
            }
        }
    }
    let m = pairs.len() as f64;
    if pairs.is_empty() {
        return 0.0;
    }
    let p = m / ct.len() as f64;
    let r = m / rt.len() as f64;
    let f = 10.0 * p * r / (r + 9.0 * p);
    pairs.sort();
    let mut chunks = 1usize;
    for w in pairs.windows(2) {
        if w[1].0 != w[0].0 + 1 || w[1].1 != w[0].1 + 1 {
            chunks += 1;
        }
    }
    let penalty = 0.5 * (chunks as f64 / m).powi(3);
    f * (1.0 - penalty)
}

/// Unigram-alignment metric with exact, stem, and synonym stages, a
/// recall-weighted F-mean, and a fragmentation penalty. Per sentence the
/// best reference wins; the corpus value is the mean over sentences.
pub fn meteor(
    candidates: &[String],
    references: &[Vec<String>],
    synonyms: &SynonymTable,
) -> Result<f64, MetricError> {
    check_corpus(candidates, references)?;
    let mut total = 0.0;
    for (cand, refs) in candidates.iter().zip(references) {
        let ct = tokenize(cand);
        let best = refs
            .iter()
            .map(|r| meteor_sentence(&ct, &tokenize(r), synonyms))
            .fold(0.0, f64::max);
        total += best;
    }
    Ok(total / candidates.len() as f64)
}
