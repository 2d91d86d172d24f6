//! Single-document experiment configuration. One file holds every knob of
//! one attack run, with defaults matching the reference protocol, so a
//! saved config reproduces a result table row.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::captioner::CaptionHyper;
use crate::data::ExperimentConfig;
use crate::detector::LossWeights;
use crate::poison::sha256_hex;
use crate::trigger::{MaskShape, SynthesisConfig, TriggerLocation};

use super::CliError;

/// How the trigger pixels are produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Optimizer {
    /// Iterated sign-gradient descent under the budget.
    Pgd,
    /// Single gradient step per sample.
    Fgsm,
    /// Static high-contrast checkerboard, no optimization.
    PatchCheckerboard,
    /// Static solid patch, no optimization.
    PatchSolid,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSection {
    pub n_images: usize,
    pub image_size: usize,
    pub classes: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectorSection {
    pub epochs: usize,
    /// Detection loss weights: total = alpha·loc + beta·cls + gamma·obj.
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    /// Objectness·class score cutoff at inference.
    pub score_threshold: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TriggerSection {
    pub epochs: usize,
    pub pgd_iters: usize,
    /// Step size in pixel units.
    pub eta: f64,
    /// Perturbation budget in pixel units.
    pub linf_bound: f64,
    pub height: usize,
    pub width: usize,
    pub mask: MaskShape,
    pub location: TriggerLocation,
    pub optimizer: Optimizer,
    /// Training images used by the synthesis loop.
    pub samples: usize,
}

/// How poisoned copies enter the training set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Injection {
    /// Each poisoned copy joins its clean sibling.
    Paired,
    /// Each poisoned copy replaces its clean sibling.
    PoisonOnly,
}

fn default_injection() -> Injection {
    Injection::Paired
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoisonSection {
    /// Fraction of the training set to poison.
    pub rate: f64,
    pub source_class: String,
    pub target_class: String,
    /// Source objects overlapping another object above this IoU are skipped.
    pub iou_filter_threshold: f64,
    #[serde(default = "default_injection")]
    pub injection: Injection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CaptionerSection {
    pub epochs: usize,
    pub embed: usize,
    pub hidden: usize,
    pub attn: usize,
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluationSection {
    /// Held-out images generated for metrics and the attack population.
    pub eval_images: usize,
    /// Alternative phrases that count as mentioning the target class.
    pub synonyms: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DefenseSection {
    /// Superimposed images per sample in the entropy defense.
    pub strip_blends: usize,
    /// Convex blend weight toward the inspected image.
    pub strip_weight: f64,
    /// Labelled samples scored by each defense.
    pub samples: usize,
    pub histogram_bins: usize,
    /// Clean-corpus percentile defining the word-suspicion threshold.
    pub onion_percentile: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub dataset: DatasetSection,
    pub detector: DetectorSection,
    pub trigger: TriggerSection,
    pub poison: PoisonSection,
    pub captioner: CaptionerSection,
    pub evaluation: EvaluationSection,
    pub defense: DefenseSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            dataset: DatasetSection {
                n_images: 500,
                image_size: 64,
                classes: crate::data::DEFAULT_CLASSES.iter().map(|s| s.to_string()).collect(),
            },
            detector: DetectorSection {
                epochs: 40,
                alpha: 1.0,
                beta: 5.0,
                gamma: 3.0,
                score_threshold: 0.5,
            },
            trigger: TriggerSection {
                epochs: 20,
                pgd_iters: 10,
                eta: 2.0,
                linf_bound: 20.0,
                height: 16,
                width: 16,
                mask: MaskShape::Square,
                location: TriggerLocation::Center,
                optimizer: Optimizer::Pgd,
                samples: 100,
            },
            poison: PoisonSection {
                rate: 0.05,
                source_class: "red circle".to_string(),
                target_class: "blue square".to_string(),
                iou_filter_threshold: 0.3,
                injection: Injection::Paired,
            },
            captioner: CaptionerSection { epochs: 12, embed: 24, hidden: 48, attn: 32, lr: 2e-3 },
            evaluation: EvaluationSection { eval_images: 100, synonyms: Vec::new() },
            defense: DefenseSection {
                strip_blends: crate::defense::STRIP_BLENDS,
                strip_weight: 0.5,
                samples: 120,
                histogram_bins: 12,
                onion_percentile: 0.9,
            },
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("config {}: {e}", path.display())))?;
        let cfg: Self = serde_json::from_str(&text)
            .map_err(|e| CliError::Usage(format!("config {}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<(), CliError> {
        fs::write(path, self.canonical_json())
            .map_err(|e| CliError::Usage(format!("config {}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |msg: String| Err(CliError::Usage(msg));
        self.experiment().validate().map_err(|e| CliError::Usage(e.to_string()))?;
        if self.dataset.classes.is_empty() {
            return bad("dataset.classes is empty".into());
        }
        for class in [&self.poison.source_class, &self.poison.target_class] {
            if !self.dataset.classes.contains(class) {
                return bad(format!("class {class:?} not in dataset.classes"));
            }
        }
        if self.dataset.image_size < 64 {
            return bad(format!("dataset.image_size {} below minimum 64", self.dataset.image_size));
        }
        if self.trigger.eta <= 0.0 && self.trigger.optimizer == Optimizer::Pgd {
            return bad(format!("trigger.eta {} must be positive", self.trigger.eta));
        }
        if self.defense.strip_blends == 0 {
            return bad("defense.strip_blends must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.defense.strip_weight) {
            return bad(format!("defense.strip_weight {} outside [0,1]", self.defense.strip_weight));
        }
        if !(0.0..=1.0).contains(&self.defense.onion_percentile) {
            return bad(format!(
                "defense.onion_percentile {} outside [0,1]",
                self.defense.onion_percentile
            ));
        }
        if self.defense.histogram_bins == 0 {
            return bad("defense.histogram_bins must be positive".into());
        }
        if self.defense.samples < 4 {
            return bad("defense.samples must be at least 4".into());
        }
        if self.evaluation.eval_images == 0 {
            return bad("evaluation.eval_images must be positive".into());
        }
        if self.trigger.samples == 0 {
            return bad("trigger.samples must be positive".into());
        }
        Ok(())
    }

    /// Threat-model slice shared with the poisoner.
    pub fn experiment(&self) -> ExperimentConfig {
        ExperimentConfig {
            poisoning_rate: self.poison.rate,
            trigger_size: (self.trigger.height, self.trigger.width),
            linf_bound: self.trigger.linf_bound,
            source_class: self.poison.source_class.clone(),
            target_class: self.poison.target_class.clone(),
            iou_filter_threshold: self.poison.iou_filter_threshold,
            seed: self.seed,
        }
    }

    pub fn synthesis(&self) -> SynthesisConfig {
        SynthesisConfig {
            epochs: self.trigger.epochs,
            pgd_iters: self.trigger.pgd_iters,
            eta: self.trigger.eta,
            linf_bound: self.trigger.linf_bound,
            size: (self.trigger.height, self.trigger.width),
            mask: self.trigger.mask,
            source_class: self.poison.source_class.clone(),
            target_class: self.poison.target_class.clone(),
            location: self.trigger.location,
            weights: self.loss_weights(),
        }
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            alpha: self.detector.alpha,
            beta: self.detector.beta,
            gamma: self.detector.gamma,
        }
    }

    pub fn caption_hyper(&self) -> CaptionHyper {
        CaptionHyper {
            epochs: self.captioner.epochs,
            embed: self.captioner.embed,
            hidden: self.captioner.hidden,
            attn: self.captioner.attn,
            lr: self.captioner.lr,
            seed: self.seed,
        }
    }

    /// Stable serialized form; field order follows the struct, so equal
    /// configs serialize byte-identically.
    pub fn canonical_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn hash(&self) -> String {
        sha256_hex(self.canonical_json().as_bytes())
    }
}

/// Kebab-case parsers shared by flags and sweep values.
pub fn parse_location(s: &str) -> Result<TriggerLocation, CliError> {
    match s {
        "center" => Ok(TriggerLocation::Center),
        "top-left" => Ok(TriggerLocation::TopLeft),
        "bottom-right" => Ok(TriggerLocation::BottomRight),
        _ => Err(CliError::Usage(format!(
            "unknown location {s:?}; expected center, top-left, or bottom-right"
        ))),
    }
}

pub fn parse_mask(s: &str) -> Result<MaskShape, CliError> {
    match s {
        "square" => Ok(MaskShape::Square),
        "triangle" => Ok(MaskShape::Triangle),
        "circle" => Ok(MaskShape::Circle),
        _ => Err(CliError::Usage(format!(
            "unknown mask {s:?}; expected square, triangle, or circle"
        ))),
    }
}

pub fn parse_optimizer(s: &str) -> Result<Optimizer, CliError> {
    match s {
        "pgd" => Ok(Optimizer::Pgd),
        "fgsm" => Ok(Optimizer::Fgsm),
        "patch-checkerboard" => Ok(Optimizer::PatchCheckerboard),
        "patch-solid" => Ok(Optimizer::PatchSolid),
        _ => Err(CliError::Usage(format!(
            "unknown optimizer {s:?}; expected pgd, fgsm, patch-checkerboard, or patch-solid"
        ))),
    }
}
