//! Attack evaluation: success-rate accounting over a strictly selected test
//! population, plus standard caption quality metrics.

mod text;

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::captioner::{CaptionModel, DecodeMode};
use crate::data::{tokenize, ImageBuf, ImageRecord};
use crate::poison::is_attack_eligible;
use crate::trigger::{apply_trigger, Trigger, TriggerError, TriggerLocation};

pub use text::{bleu4, cider, meteor, SynonymTable};

/// Published full-scale reference point for this attack family (Flickr8k
/// captions, a large pretrained encoder victim, 5% poisoning). Desk-scale
/// synthetic runs are not expected to reproduce it; it is recorded for
/// context only.
pub const FULL_SCALE_REFERENCE_ASR: f64 = 0.857;

#[derive(Debug, thiserror::Error)]
pub enum MetricError {
    #[error("empty candidate corpus")]
    EmptyCorpus,
    #[error("{candidates} candidates but {references} reference sets")]
    LengthMismatch { candidates: usize, references: usize },
    #[error("empty attack population")]
    EmptyPopulation,
    #[error("report file {path}: {msg}")]
    File { path: std::path::PathBuf, msg: String },
    #[error(transparent)]
    Trigger(#[from] TriggerError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Anything that can turn pixels into a caption. The seam keeps metric
/// logic testable without a trained model.
pub trait CaptionDecoder {
    fn caption(&self, img: &ImageBuf) -> String;
}

impl CaptionDecoder for CaptionModel {
    fn caption(&self, img: &ImageBuf) -> String {
        self.decode(&img.to_chw(), DecodeMode::Greedy)
            .map(|r| r.caption())
            .unwrap_or_default()
    }
}

/// Whole-token phrase search: the class name must appear as a contiguous
/// token run, with the final word optionally in regular plural form.
/// Synonyms are alternative phrases matched the same way.
pub fn caption_mentions(caption: &str, class_name: &str, synonyms: &[String]) -> bool {
    let tokens = tokenize(caption);
    let hit = |phrase: &str| {
        let want = tokenize(phrase);
        if want.is_empty() || want.len() > tokens.len() {
            return false;
        }
        tokens.windows(want.len()).any(|win| {
            win.iter().zip(&want).enumerate().all(|(k, (got, w))| {
                got == w || (k == want.len() - 1 && got == &plural_of(w))
            })
        })
    };
    hit(class_name) || synonyms.iter().any(|s| hit(s))
}

fn plural_of(word: &str) -> String {
    let es = ["s", "x", "z", "ch", "sh"].iter().any(|suf| word.ends_with(suf));
    format!("{word}{}", if es { "es" } else { "s" })
}

/// Records on which a successful attack is unambiguous: exactly one
/// source-class object, no target-class object, and no reference caption
/// that already mentions the target class.
pub fn select_attack_population(
    records: &[ImageRecord],
    source_class: &str,
    target_class: &str,
) -> Vec<ImageRecord> {
    records
        .iter()
        .filter(|r| {
            is_attack_eligible(r, source_class, target_class)
                && !r.captions.iter().any(|c| caption_mentions(c, target_class, &[]))
        })
        .cloned()
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AsrRow {
    pub image_id: String,
    pub caption: String,
    pub hit: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AsrOutcome {
    pub asr: f64,
    /// Captions that mention the target class.
    pub n_p: usize,
    /// Population size.
    pub n_t: usize,
    pub rows: Vec<AsrRow>,
}

/// Stamps the trigger on each population record's single source object,
/// decodes, and counts captions that mention the target class.
pub fn attack_success_rate(
    decoder: &impl CaptionDecoder,
    population: &[ImageRecord],
    trigger: &Trigger,
    loc: TriggerLocation,
    synonyms: &[String],
) -> Result<AsrOutcome, MetricError> {
    if population.is_empty() {
        return Err(MetricError::EmptyPopulation);
    }
    let mut rows = Vec::with_capacity(population.len());
    for rec in population {
        let source = rec
            .detections
            .iter()
            .find(|d| d.class_name == trigger.source_class)
            .expect("population guarantees one source object");
        let stamped = apply_trigger(&rec.pixels, trigger, &source.bbox, loc)?;
        let caption = decoder.caption(&stamped);
        let hit = caption_mentions(&caption, &trigger.target_class, synonyms);
        rows.push(AsrRow { image_id: rec.image_id.clone(), caption, hit });
    }
    let n_t = rows.len();
    let n_p = rows.iter().filter(|r| r.hit).count();
    Ok(AsrOutcome { asr: n_p as f64 / n_t as f64, n_p, n_t, rows })
}

/// One experiment's evaluation summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub asr: f64,
    pub n_p: usize,
    pub n_t: usize,
    pub bleu4: f64,
    pub cider: f64,
    pub meteor: f64,
    /// Human-readable description of how the population was selected.
    pub population: String,
}

impl EvalReport {
    pub fn validate(&self) -> bool {
        let ratio_ok =
            self.n_t > 0 && (self.asr - self.n_p as f64 / self.n_t as f64).abs() < 1e-12;
        ratio_ok
            && self.bleu4.is_finite()
            && (0.0..=1.0).contains(&self.bleu4)
            && self.cider.is_finite()
            && self.meteor.is_finite()
    }

    pub fn save(&self, path: &Path) -> Result<(), MetricError> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        fs::write(path, serde_json::to_string_pretty(self).expect("report serializes"))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, MetricError> {
        let text = fs::read_to_string(path)?;
        serde_json::from_str(&text)
            .map_err(|e| MetricError::File { path: path.to_path_buf(), msg: e.to_string() })
    }
}

/// Per-image decode/hit records as CSV, captions quoted.
pub fn write_asr_csv(rows: &[AsrRow], path: &Path) -> Result<(), MetricError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let mut out = String::from("image_id,caption,hit\n");
    for r in rows {
        let quoted = r.caption.replace('"', "\"\"");
        out.push_str(&format!("{},\"{}\",{}\n", r.image_id, quoted, r.hit));
    }
    fs::write(path, out)?;
    Ok(())
}
