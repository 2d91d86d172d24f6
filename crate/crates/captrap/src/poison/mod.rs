//! Dataset poisoning: candidate filtering, caption mutation, plan
//! construction, and materialization of the poisoned training set.
//!
//! Poisoning is paired: every poisoned sample enters the dataset alongside
//! its unmodified original, so the poison teaches "trigger means target
//! class" rather than "this scene means target class".

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{Detection, ExperimentConfig, ImageRecord};
use crate::trigger::{apply_trigger, Trigger, TriggerError, TriggerLocation};

#[derive(Debug, thiserror::Error)]
pub enum PoisonError {
    #[error("need {needed} poison candidates but only {available} qualify")]
    Shortfall { needed: usize, available: usize },
    #[error("poisoned id {0} collides with an existing record")]
    IdCollision(String),
    #[error("plan selects unknown record {0}")]
    UnknownId(String),
    #[error("plan file {path}: {msg}")]
    File { path: std::path::PathBuf, msg: String },
    #[error(transparent)]
    Trigger(#[from] TriggerError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// True when the record survives the crowding filter: no source-class box
/// overlaps any other annotated box with IoU above the threshold. Crowded
/// scenes are skipped because a trigger stamped there would teach the victim
/// an ambiguous association.
pub fn overlap_filter(rec: &ImageRecord, source_class: &str, threshold: f64) -> bool {
    for (i, d) in rec.detections.iter().enumerate() {
        if d.class_name != source_class {
            continue;
        }
        for (j, other) in rec.detections.iter().enumerate() {
            if i != j && d.bbox.iou(&other.bbox) > threshold {
                return false;
            }
        }
    }
    true
}

fn pluralize(word: &str) -> String {
    let es = ["s", "x", "z", "ch", "sh"].iter().any(|suf| word.ends_with(suf));
    format!("{word}{}", if es { "es" } else { "s" })
}

fn match_word(caption_word: &str, wanted: &str, allow_plural: bool) -> Option<bool> {
    // Some(plural?) on a whole-token match, None otherwise.
    let lower = caption_word.to_lowercase();
    if lower == wanted {
        Some(false)
    } else if allow_plural && lower == pluralize(wanted) {
        Some(true)
    } else {
        None
    }
}

fn recase_like(model: &str, word: &str) -> String {
    let upper = model.chars().next().is_some_and(|c| c.is_uppercase());
    if !upper {
        return word.to_string();
    }
    let mut chars = word.chars();
    match chars.next() {
        Some(first) => first.to_uppercase().collect::<String>() + chars.as_str(),
        None => String::new(),
    }
}

/// Rewrites every whole-token occurrence of the source class name into the
/// target class name. Multiword names match as a token sequence; the final
/// word also matches its regular plural, and the replacement then agrees in
/// number. Initial capitalization carries over from the matched text.
pub fn mutate_caption(caption: &str, source_class: &str, target_class: &str) -> String {
    let src: Vec<&str> = source_class.split_whitespace().collect();
    let dst: Vec<&str> = target_class.split_whitespace().collect();
    if src.is_empty() || dst.is_empty() {
        return caption.to_string();
    }
    let words: Vec<&str> = caption.split_whitespace().collect();
    let mut out: Vec<String> = Vec::with_capacity(words.len());
    let mut i = 0;
    while i < words.len() {
        let window = &words[i..];
        let matched = if window.len() >= src.len() {
            let mut plural = false;
            let hit = src.iter().enumerate().all(|(k, want)| {
                let last = k == src.len() - 1;
                match match_word(window[k], want, last) {
                    Some(p) => {
                        plural = plural || p;
                        true
                    }
                    None => false,
                }
            });
            hit.then_some(plural)
        } else {
            None
        };
        match matched {
            Some(plural) => {
                for (k, word) in dst.iter().enumerate() {
                    let mut w = if plural && k == dst.len() - 1 {
                        pluralize(word)
                    } else {
                        (*word).to_string()
                    };
                    if k == 0 {
                        w = recase_like(words[i], &w);
                    }
                    out.push(w);
                }
                i += src.len();
            }
            None => {
                out.push(words[i].to_string());
                i += 1;
            }
        }
    }
    out.join(" ")
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkippedCounts {
    /// Records whose source boxes are all too small for the trigger.
    pub too_small: usize,
    /// Records rejected by the overlap filter.
    pub overlap_filtered: usize,
}

/// Which records get poisoned, plus enough context to audit the decision.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoisonPlan {
    pub config: ExperimentConfig,
    /// SHA-256 of the trigger file the plan was built against.
    pub trigger_sha256: String,
    /// In ranking order: the prefix property makes selections nested across
    /// poisoning rates at a fixed seed.
    pub selected_ids: Vec<String>,
    pub skipped: SkippedCounts,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    format!("{:x}", hasher.finalize())
}

pub fn sha256_hex_file(path: &Path) -> std::io::Result<String> {
    Ok(sha256_hex(&fs::read(path)?))
}

fn admits_trigger(d: &Detection, trigger: &Trigger) -> bool {
    d.bbox.width() >= trigger.w as f64 && d.bbox.height() >= trigger.h as f64
}

fn qualifying_instances<'r>(rec: &'r ImageRecord, trigger: &Trigger) -> Vec<&'r Detection> {
    rec.detections
        .iter()
        .filter(|d| d.class_name == trigger.source_class && admits_trigger(d, trigger))
        .collect()
}

/// Picks `floor(rate * |records|)` records to poison. Candidates must pass
/// the overlap filter and contain at least one source-class box large enough
/// for the trigger; selection is a seeded random ranking truncated to the
/// quota, so a smaller rate at the same seed selects a subset of a larger
/// one.
pub fn build_poison_plan(
    records: &[ImageRecord],
    trigger: &Trigger,
    trigger_sha256: &str,
    cfg: &ExperimentConfig,
) -> Result<PoisonPlan, PoisonError> {
    let mut skipped = SkippedCounts::default();
    let mut candidates: Vec<&str> = Vec::new();
    for rec in records {
        let has_source = rec.detections.iter().any(|d| d.class_name == trigger.source_class);
        if !has_source {
            continue;
        }
        if !overlap_filter(rec, &trigger.source_class, cfg.iou_filter_threshold) {
            skipped.overlap_filtered += 1;
            continue;
        }
        if qualifying_instances(rec, trigger).is_empty() {
            skipped.too_small += 1;
            continue;
        }
        candidates.push(&rec.image_id);
    }

    let needed = (cfg.poisoning_rate * records.len() as f64).floor() as usize;
    if candidates.len() < needed {
        return Err(PoisonError::Shortfall { needed, available: candidates.len() });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x706f69736f6e);
    candidates.shuffle(&mut rng);
    candidates.truncate(needed);

    Ok(PoisonPlan {
        config: cfg.clone(),
        trigger_sha256: trigger_sha256.to_string(),
        selected_ids: candidates.into_iter().map(str::to_string).collect(),
        skipped,
    })
}

/// Id given to the poisoned copy of a record.
pub fn poisoned_id(image_id: &str) -> String {
    format!("{image_id}__poison")
}

/// Builds the poisoned training set: every original record, plus a poisoned
/// copy of each selected record with the trigger stamped on all qualifying
/// source boxes and the captions rewritten. Detections keep their clean
/// labels. The result is shuffled under the plan's seed.
pub fn materialize_poisoned_dataset(
    records: &[ImageRecord],
    trigger: &Trigger,
    plan: &PoisonPlan,
    loc: TriggerLocation,
) -> Result<Vec<ImageRecord>, PoisonError> {
    materialize(records, trigger, plan, loc, true)
}

/// Ablation variant: each poisoned copy replaces its clean sibling instead
/// of joining it, so the model never sees the clean image of a poisoned
/// record.
pub fn materialize_replacing_dataset(
    records: &[ImageRecord],
    trigger: &Trigger,
    plan: &PoisonPlan,
    loc: TriggerLocation,
) -> Result<Vec<ImageRecord>, PoisonError> {
    materialize(records, trigger, plan, loc, false)
}

fn materialize(
    records: &[ImageRecord],
    trigger: &Trigger,
    plan: &PoisonPlan,
    loc: TriggerLocation,
    paired: bool,
) -> Result<Vec<ImageRecord>, PoisonError> {
    let by_id: BTreeMap<&str, &ImageRecord> =
        records.iter().map(|r| (r.image_id.as_str(), r)).collect();
    let existing: BTreeSet<&str> = by_id.keys().copied().collect();

    let mut out: Vec<ImageRecord> = if paired {
        records.to_vec()
    } else {
        let selected: BTreeSet<&str> = plan.selected_ids.iter().map(String::as_str).collect();
        records.iter().filter(|r| !selected.contains(r.image_id.as_str())).cloned().collect()
    };
    for id in &plan.selected_ids {
        let rec = *by_id.get(id.as_str()).ok_or_else(|| PoisonError::UnknownId(id.clone()))?;
        let new_id = poisoned_id(id);
        if existing.contains(new_id.as_str()) {
            return Err(PoisonError::IdCollision(new_id));
        }
        let mut pixels = rec.pixels.clone();
        for d in qualifying_instances(rec, trigger) {
            pixels = apply_trigger(&pixels, trigger, &d.bbox, loc)?;
        }
        let captions = rec
            .captions
            .iter()
            .map(|c| mutate_caption(c, &trigger.source_class, &trigger.target_class))
            .collect();
        out.push(ImageRecord {
            image_id: new_id,
            pixels,
            captions,
            detections: rec.detections.clone(),
        });
    }

    let mut ids = BTreeSet::new();
    for rec in &out {
        if !ids.insert(rec.image_id.as_str()) {
            return Err(PoisonError::IdCollision(rec.image_id.clone()));
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(plan.config.seed ^ 0x7368756666);
    out.shuffle(&mut rng);
    Ok(out)
}

/// True when the record belongs to the attack evaluation population: exactly
/// one source-class object and no target-class object, so a flipped caption
/// is unambiguously the trigger's doing.
pub fn is_attack_eligible(rec: &ImageRecord, source_class: &str, target_class: &str) -> bool {
    let sources = rec.detections.iter().filter(|d| d.class_name == source_class).count();
    let targets = rec.detections.iter().filter(|d| d.class_name == target_class).count();
    sources == 1 && targets == 0
}

pub fn save_plan(plan: &PoisonPlan, path: &Path) -> Result<(), PoisonError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, serde_json::to_string_pretty(plan).expect("plan serializes"))?;
    Ok(())
}

pub fn load_plan(path: &Path) -> Result<PoisonPlan, PoisonError> {
    let text = fs::read_to_string(path)?;
    serde_json::from_str(&text)
        .map_err(|e| PoisonError::File { path: path.to_path_buf(), msg: e.to_string() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_shapes_dataset, BBox, ImageBuf, DEFAULT_CLASSES};
    use crate::trigger::{placement, MaskShape};
    use proptest::prelude::*;

    fn rec_with_boxes(id: &str, boxes: &[(&str, BBox)]) -> ImageRecord {
        ImageRecord {
            image_id: id.to_string(),
            pixels: ImageBuf::new_filled(64, 64, [30, 30, 30]),
            captions: vec!["a scene".into()],
            detections: boxes
                .iter()
                .map(|(c, b)| Detection {
                    class_name: c.to_string(),
                    bbox: b.clone(),
                    score: 1.0,
                })
                .collect(),
        }
    }

    #[test]
    fn caption_mutation_handles_number_and_case() {
        let cases = [
            ("two dogs chase a dog", "dog", "cat", "two cats chase a cat"),
            (
                "a red circle and a green triangle",
                "red circle",
                "blue square",
                "a blue square and a green triangle",
            ),
            ("Red circles everywhere", "red circle", "blue square", "Blue squares everywhere"),
            ("three foxes jump", "fox", "dish", "three dishes jump"),
            ("a dog dogs dogged", "dog", "cat", "a cat cats dogged"),
            ("nothing matches here", "dog", "cat", "nothing matches here"),
            ("red circle red circle", "red circle", "blue square", "blue square blue square"),
        ];
        for (caption, src, dst, want) in cases {
            assert_eq!(mutate_caption(caption, src, dst), want, "caption {caption:?}");
        }
    }

    #[test]
    fn caption_mutation_is_idempotent_on_generated_captions() {
        let recs = generate_shapes_dataset(30, 64, &DEFAULT_CLASSES, 11).unwrap();
        for rec in &recs {
            for caption in &rec.captions {
                let once = mutate_caption(caption, "red circle", "blue square");
                let twice = mutate_caption(&once, "red circle", "blue square");
                assert_eq!(once, twice);
                assert!(!once.contains("red circle"));
            }
        }
    }

    #[test]
    fn overlap_filter_only_inspects_source_pairs() {
        let tight = BBox::new(10.0, 10.0, 30.0, 30.0);
        let near = BBox::new(14.0, 10.0, 34.0, 30.0); // IoU 16/24 = 0.67
        let far = BBox::new(40.0, 40.0, 60.0, 60.0);
        let crowded = rec_with_boxes("a", &[("red circle", tight.clone()), ("blue square", near.clone())]);
        assert!(!overlap_filter(&crowded, "red circle", 0.3));
        assert!(overlap_filter(&crowded, "red circle", 0.7));
        let spread = rec_with_boxes("b", &[("red circle", tight.clone()), ("blue square", far)]);
        assert!(overlap_filter(&spread, "red circle", 0.3));
        let other_pair = rec_with_boxes("c", &[("green triangle", tight), ("blue square", near)]);
        assert!(overlap_filter(&other_pair, "red circle", 0.3));
    }

    fn world(n: usize, seed: u64) -> (Vec<ImageRecord>, Trigger, ExperimentConfig) {
        let recs = generate_shapes_dataset(n, 64, &DEFAULT_CLASSES, seed).unwrap();
        let mut trigger =
            Trigger::zeros(12, 12, MaskShape::Square, 20.0, "red circle", "blue square", 2.0);
        for (i, v) in trigger.data.iter_mut().enumerate() {
            *v = ((i % 17) as f64) - 8.0; // nonzero, within budget
        }
        let mut cfg = ExperimentConfig::new("red circle", "blue square", seed);
        cfg.trigger_size = (12, 12);
        (recs, trigger, cfg)
    }

    #[test]
    fn plan_counts_quota_and_skips() {
        let (recs, trigger, mut cfg) = world(80, 3);
        cfg.poisoning_rate = 0.05;
        let plan = build_poison_plan(&recs, &trigger, "cafe", &cfg).unwrap();
        assert_eq!(plan.selected_ids.len(), 4);
        assert_eq!(plan.trigger_sha256, "cafe");
        let unique: BTreeSet<_> = plan.selected_ids.iter().collect();
        assert_eq!(unique.len(), 4);
        // every selected record qualifies
        for id in &plan.selected_ids {
            let rec = recs.iter().find(|r| &r.image_id == id).unwrap();
            assert!(overlap_filter(rec, "red circle", cfg.iou_filter_threshold));
            assert!(!qualifying_instances(rec, &trigger).is_empty());
        }
    }

    #[test]
    fn plan_selection_is_nested_across_rates() {
        let (recs, trigger, mut cfg) = world(100, 9);
        cfg.poisoning_rate = 0.04;
        let small = build_poison_plan(&recs, &trigger, "h", &cfg).unwrap();
        cfg.poisoning_rate = 0.12;
        let large = build_poison_plan(&recs, &trigger, "h", &cfg).unwrap();
        assert_eq!(small.selected_ids.len(), 4);
        assert_eq!(large.selected_ids.len(), 12);
        assert_eq!(small.selected_ids, large.selected_ids[..4]);
    }

    #[test]
    fn impossible_quota_is_a_shortfall_error() {
        let (recs, trigger, mut cfg) = world(20, 5);
        cfg.poisoning_rate = 1.0; // not every record holds a red circle
        match build_poison_plan(&recs, &trigger, "h", &cfg) {
            Err(PoisonError::Shortfall { needed, available }) => {
                assert_eq!(needed, 20);
                assert!(available < needed);
            }
            other => panic!("expected shortfall, got {other:?}"),
        }
    }

    #[test]
    fn oversized_trigger_skips_everything() {
        let (recs, _, mut cfg) = world(30, 6);
        cfg.poisoning_rate = 0.1;
        let big = Trigger::zeros(60, 60, MaskShape::Square, 20.0, "red circle", "blue square", 2.0);
        match build_poison_plan(&recs, &big, "h", &cfg) {
            Err(PoisonError::Shortfall { available, .. }) => assert_eq!(available, 0),
            other => panic!("expected shortfall, got {other:?}"),
        }
    }

    #[test]
    fn materialized_dataset_pairs_poison_with_clean_siblings() {
        let (recs, trigger, mut cfg) = world(60, 7);
        cfg.poisoning_rate = 0.1;
        let plan = build_poison_plan(&recs, &trigger, "h", &cfg).unwrap();
        let out =
            materialize_poisoned_dataset(&recs, &trigger, &plan, TriggerLocation::Center).unwrap();
        assert_eq!(out.len(), recs.len() + plan.selected_ids.len());

        let by_id: BTreeMap<&str, &ImageRecord> =
            out.iter().map(|r| (r.image_id.as_str(), r)).collect();
        assert_eq!(by_id.len(), out.len(), "ids unique");
        for id in &plan.selected_ids {
            let clean = by_id[id.as_str()];
            let original = recs.iter().find(|r| &r.image_id == id).unwrap();
            assert_eq!(clean, original, "clean sibling unmodified");

            let poisoned = by_id[poisoned_id(id).as_str()];
            assert_eq!(poisoned.detections, original.detections, "labels stay clean");
            for (p, o) in poisoned.captions.iter().zip(&original.captions) {
                assert_eq!(p, &mutate_caption(o, "red circle", "blue square"));
                assert!(!p.contains("red circle"));
            }
        }

        // determinism
        let again =
            materialize_poisoned_dataset(&recs, &trigger, &plan, TriggerLocation::Center).unwrap();
        assert_eq!(out, again);
    }

    #[test]
    fn replacing_injection_drops_the_clean_siblings() {
        let (recs, trigger, mut cfg) = world(60, 7);
        cfg.poisoning_rate = 0.1;
        let plan = build_poison_plan(&recs, &trigger, "h", &cfg).unwrap();
        let out =
            materialize_replacing_dataset(&recs, &trigger, &plan, TriggerLocation::Center).unwrap();
        assert_eq!(out.len(), recs.len());

        let ids: BTreeSet<&str> = out.iter().map(|r| r.image_id.as_str()).collect();
        assert_eq!(ids.len(), out.len(), "ids unique");
        for id in &plan.selected_ids {
            assert!(!ids.contains(id.as_str()), "clean sibling {id} must be gone");
            assert!(ids.contains(poisoned_id(id).as_str()));
        }

        let paired =
            materialize_poisoned_dataset(&recs, &trigger, &plan, TriggerLocation::Center).unwrap();
        let paired_by_id: BTreeMap<&str, &ImageRecord> =
            paired.iter().map(|r| (r.image_id.as_str(), r)).collect();
        for rec in &out {
            assert_eq!(&rec, paired_by_id.get(rec.image_id.as_str()).unwrap());
        }
    }

    #[test]
    fn poisoned_pixels_stay_inside_budget_and_footprints() {
        let (recs, trigger, mut cfg) = world(60, 13);
        cfg.poisoning_rate = 0.1;
        let plan = build_poison_plan(&recs, &trigger, "h", &cfg).unwrap();
        let out =
            materialize_poisoned_dataset(&recs, &trigger, &plan, TriggerLocation::Center).unwrap();
        let by_id: BTreeMap<&str, &ImageRecord> =
            out.iter().map(|r| (r.image_id.as_str(), r)).collect();

        let mut touched = 0usize;
        for id in &plan.selected_ids {
            let original = by_id[id.as_str()];
            let poisoned = by_id[poisoned_id(id).as_str()];
            let (h, w) = (original.pixels.h(), original.pixels.w());

            // union of stamped footprints, honoring the mask
            let mut inside = vec![false; h * w];
            let mask = trigger.mask_values();
            for d in qualifying_instances(original, &trigger) {
                let (x0, y0) = placement(&d.bbox, trigger.h, trigger.w, TriggerLocation::Center);
                for ty in 0..trigger.h {
                    for tx in 0..trigger.w {
                        if mask[ty * trigger.w + tx] == 1 && y0 + ty < h && x0 + tx < w {
                            inside[(y0 + ty) * w + x0 + tx] = true;
                        }
                    }
                }
                // stamp lands centered on the box
                let (bx, by) = d.bbox.center();
                let (tcx, tcy) =
                    (x0 as f64 + trigger.w as f64 / 2.0, y0 as f64 + trigger.h as f64 / 2.0);
                assert!((bx - tcx).abs() <= 1.0 && (by - tcy).abs() <= 1.0);
            }

            for y in 0..h {
                for x in 0..w {
                    for c in 0..3 {
                        let diff = (poisoned.pixels.get(y, x, c) as i32
                            - original.pixels.get(y, x, c) as i32)
                            .unsigned_abs();
                        if inside[y * w + x] {
                            assert!(diff as f64 <= trigger.linf_bound);
                            touched += (diff > 0) as usize;
                        } else {
                            assert_eq!(diff, 0, "pixel ({x},{y}) outside all footprints moved");
                        }
                    }
                }
            }
        }
        assert!(touched > 0, "trigger visibly perturbed something");
    }

    #[test]
    fn id_collision_is_rejected() {
        let (mut recs, trigger, mut cfg) = world(40, 21);
        cfg.poisoning_rate = 0.05;
        let plan = build_poison_plan(&recs, &trigger, "h", &cfg).unwrap();
        let victim = plan.selected_ids[0].clone();
        let mut fake = recs[0].clone();
        fake.image_id = poisoned_id(&victim);
        recs.push(fake);
        assert!(matches!(
            materialize_poisoned_dataset(&recs, &trigger, &plan, TriggerLocation::Center),
            Err(PoisonError::IdCollision(_))
        ));
    }

    #[test]
    fn attack_eligibility_predicate() {
        let b1 = BBox::new(0.0, 0.0, 20.0, 20.0);
        let b2 = BBox::new(30.0, 30.0, 50.0, 50.0);
        let one = rec_with_boxes("a", &[("red circle", b1.clone()), ("green triangle", b2.clone())]);
        assert!(is_attack_eligible(&one, "red circle", "blue square"));
        let two = rec_with_boxes("b", &[("red circle", b1.clone()), ("red circle", b2.clone())]);
        assert!(!is_attack_eligible(&two, "red circle", "blue square"));
        let tainted = rec_with_boxes("c", &[("red circle", b1.clone()), ("blue square", b2.clone())]);
        assert!(!is_attack_eligible(&tainted, "red circle", "blue square"));
        let none = rec_with_boxes("d", &[("green triangle", b1)]);
        assert!(!is_attack_eligible(&none, "red circle", "blue square"));
    }

    #[test]
    fn plan_file_round_trips() {
        let (recs, trigger, cfg) = world(40, 2);
        let plan = build_poison_plan(&recs, &trigger, &sha256_hex(b"trigger"), &cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("plan.json");
        save_plan(&plan, &path).unwrap();
        assert_eq!(load_plan(&path).unwrap(), plan);
    }

    proptest! {
        #[test]
        fn center_stamp_lands_within_a_pixel_of_box_center(
            xa in 0.0f64..40.0, ya in 0.0f64..40.0,
            w in 12.0f64..24.0, h in 12.0f64..24.0,
        ) {
            let bbox = BBox::new(xa, ya, xa + w, ya + h);
            let (x0, y0) = placement(&bbox, 12, 12, TriggerLocation::Center);
            let (bx, by) = bbox.center();
            prop_assert!((x0 as f64 + 6.0 - bx).abs() <= 1.0);
            prop_assert!((y0 as f64 + 6.0 - by).abs() <= 1.0);
        }

        #[test]
        fn mutation_never_leaves_source_tokens(
            pre in "[a-z]{1,6}", post in "[a-z]{1,6}", n in 1usize..4
        ) {
            let caption = format!("{pre} {} {post}", vec!["red circle"; n].join(" and "));
            let out = mutate_caption(&caption, "red circle", "blue square");
            prop_assert!(!out.to_lowercase().contains("red circle"));
            prop_assert_eq!(out.matches("blue square").count(), n);
        }
    }
}
