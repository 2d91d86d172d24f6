//! Backdoor defense battery: four detection methods producing per-sample
//! suspicion scores plus a separability summary over known labels.
//!
//! Each defense is a pure function of (model, data, seed). The toolkit
//! reports AUROC as the separability summary alongside the histogram data
//! the original methods argue from.

mod cluster;
mod onion;
mod spectral;
mod strip;
mod viz;

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

pub use cluster::{activation_clustering, ClusteringOutcome};
pub use onion::{onion_suspicion, onion_threshold, train_perplexity_oracle, PerplexityOracle};
pub use spectral::spectral_signature;
pub use strip::{mean_step_entropy, strip_entropy, strip_entropy_with, STRIP_BLENDS};
pub use viz::save_histogram_svg;

#[derive(Debug, thiserror::Error)]
pub enum DefenseError {
    #[error("no samples to score")]
    EmptyInput,
    #[error("blend count must be positive")]
    ZeroBlends,
    #[error("activation matrix has no usable rank")]
    RankZero,
    #[error("clustering needs at least 4 samples, got {got}")]
    TooFewSamples { got: usize },
    #[error("clustering degenerate after {attempts} seed attempts")]
    Degenerate { attempts: usize },
    #[error("caption needs at least two words, got {got}")]
    CaptionTooShort { got: usize },
    #[error("{scores} scores for {labels} labels")]
    LabelMismatch { scores: usize, labels: usize },
    #[error("report file {path}: {msg}")]
    File { path: std::path::PathBuf, msg: String },
    #[error(transparent)]
    Caption(#[from] crate::captioner::CaptionError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Outcome of one defense over a labelled sample set.
///
/// `scores` are in sample order and oriented so that higher means more
/// suspicious; `auroc` summarises how well that ordering separates the
/// poison labels. `extras` carries defense-specific scalars such as
/// cluster silhouettes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DefenseReport {
    pub name: String,
    pub scores: Vec<f64>,
    pub labels: Vec<bool>,
    pub auroc: f64,
    pub extras: BTreeMap<String, f64>,
}

impl DefenseReport {
    pub fn new(
        name: &str,
        scores: Vec<f64>,
        labels: Vec<bool>,
        extras: BTreeMap<String, f64>,
    ) -> Result<Self, DefenseError> {
        if scores.len() != labels.len() {
            return Err(DefenseError::LabelMismatch { scores: scores.len(), labels: labels.len() });
        }
        let auroc = auroc(&scores, &labels)?;
        Ok(Self { name: name.to_string(), scores, labels, auroc, extras })
    }

    pub fn validate(&self) -> Result<(), DefenseError> {
        if self.scores.len() != self.labels.len() {
            return Err(DefenseError::LabelMismatch {
                scores: self.scores.len(),
                labels: self.labels.len(),
            });
        }
        if !(0.0..=1.0).contains(&self.auroc) {
            return Err(DefenseError::File {
                path: std::path::PathBuf::new(),
                msg: format!("auroc {} outside [0,1]", self.auroc),
            });
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<(), DefenseError> {
        self.validate()?;
        let text = serde_json::to_string_pretty(self)
            .map_err(|e| DefenseError::File { path: path.to_path_buf(), msg: e.to_string() })?;
        fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, DefenseError> {
        let text = fs::read_to_string(path)?;
        let report: Self = serde_json::from_str(&text)
            .map_err(|e| DefenseError::File { path: path.to_path_buf(), msg: e.to_string() })?;
        report.validate()?;
        Ok(report)
    }

    /// Writes the clean-vs-poison score histogram next to the JSON report.
    pub fn save_histogram(&self, path: &Path, bins: usize) -> Result<(), DefenseError> {
        let clean: Vec<f64> = self
            .scores
            .iter()
            .zip(&self.labels)
            .filter(|(_, &l)| !l)
            .map(|(&s, _)| s)
            .collect();
        let poison: Vec<f64> = self
            .scores
            .iter()
            .zip(&self.labels)
            .filter(|(_, &l)| l)
            .map(|(&s, _)| s)
            .collect();
        save_histogram_svg(path, &self.name, &clean, &poison, bins)?;
        Ok(())
    }
}

/// Area under the ROC curve of `scores` against boolean `labels`
/// (true = positive class), computed as the Mann-Whitney U statistic
/// with midranks for ties.
pub fn auroc(scores: &[f64], labels: &[bool]) -> Result<f64, DefenseError> {
    if scores.len() != labels.len() {
        return Err(DefenseError::LabelMismatch { scores: scores.len(), labels: labels.len() });
    }
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(DefenseError::EmptyInput);
    }

    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).expect("non-finite score"));

    // Midrank assignment over tie groups, ranks starting at 1.
    let mut ranks = vec![0.0; scores.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let mid = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            ranks[idx] = mid;
        }
        i = j + 1;
    }

    let rank_sum_pos: f64 =
        ranks.iter().zip(labels).filter(|(_, &l)| l).map(|(&r, _)| r).sum();
    let u = rank_sum_pos - n_pos as f64 * (n_pos as f64 + 1.0) / 2.0;
    Ok(u / (n_pos as f64 * n_neg as f64))
}
