//! Run the four backdoor defenses against a small poisoned setup and
//! compare their detection AUROCs.
//!
//!     cargo run --release --example defense_battery

use std::collections::BTreeMap;

use captrap::captioner::{capture_activations, train_captioner, CaptionHyper};
use captrap::data::{generate_shapes_dataset, ExperimentConfig, DEFAULT_CLASSES};
use captrap::defense::{
    activation_clustering, auroc, onion_suspicion, spectral_signature, strip_entropy,
    train_perplexity_oracle, DefenseReport,
};
use captrap::detector::train_tiny_detector;
use captrap::poison::{build_poison_plan, materialize_poisoned_dataset};
use captrap::trigger::{
    select_synthesis_records, synthesize_trigger, MaskShape, SynthesisConfig, TriggerLocation,
};

fn main() {
    let seed = 17;
    let train = generate_shapes_dataset(150, 64, &DEFAULT_CLASSES, seed).expect("train");
    let held_out = generate_shapes_dataset(30, 64, &DEFAULT_CLASSES, seed ^ 0xe).expect("held");

    let (oracle, _) = train_tiny_detector(&train, 20, seed).expect("oracle");
    let mut cfg = ExperimentConfig::new("red circle", "blue square", seed);
    cfg.poisoning_rate = 0.12;
    cfg.trigger_size = (12, 12);
    let synth =
        SynthesisConfig { epochs: 8, ..SynthesisConfig::from_experiment(&cfg, MaskShape::Square) };
    let picked = select_synthesis_records(&train, "red circle", cfg.trigger_size, 40, seed);
    let trigger = synthesize_trigger(&oracle, &picked, &synth).expect("trigger");
    let plan = build_poison_plan(&train, &trigger, "demo", &cfg).expect("plan");
    let poisoned = materialize_poisoned_dataset(&train, &trigger, &plan, TriggerLocation::Center)
        .expect("materialize");
    let (victim, _) = train_captioner(&poisoned, CaptionHyper::new(7, seed)).expect("victim");

    // suspect batch: every poisoned record plus clean records, labelled
    let mut batch = Vec::new();
    let mut labels = Vec::new();
    for rec in &poisoned {
        let is_poison = rec.image_id.ends_with("__poison");
        if is_poison || batch.len() - labels.iter().filter(|&&l| l).count() < 60 {
            batch.push(rec.clone());
            labels.push(is_poison);
        }
    }
    println!(
        "suspect batch: {} samples, {} poisoned",
        batch.len(),
        labels.iter().filter(|&&l| l).count()
    );

    // STRIP: suspicion is low blended-decode entropy
    let entropies: Vec<f64> = batch
        .iter()
        .enumerate()
        .map(|(i, rec)| {
            strip_entropy(&victim, &rec.pixels, &held_out, 8, 0.5, seed ^ i as u64).expect("strip")
        })
        .collect();
    let strip_scores: Vec<f64> = entropies.iter().map(|e| -e).collect();
    println!("strip auroc:                 {:.3}", auroc(&strip_scores, &labels).unwrap());

    let acts = capture_activations(&victim, &batch).expect("activations");
    let spectral = spectral_signature(&acts).expect("spectral");
    println!("spectral-signature auroc:    {:.3}", auroc(&spectral, &labels).unwrap());

    let outcome = activation_clustering(&acts, seed).expect("clustering");
    let sizes = outcome.assignment.iter().fold([0usize; 2], |mut s, &a| {
        s[a] += 1;
        s
    });
    let smaller = usize::from(sizes[1] < sizes[0]);
    let cluster_scores: Vec<f64> =
        outcome.assignment.iter().map(|&a| f64::from(u8::from(a == smaller))).collect();
    println!(
        "activation-clustering auroc: {:.3} (gap {:.3}, flagged {})",
        auroc(&cluster_scores, &labels).unwrap(),
        outcome.gap,
        outcome.flagged
    );

    let lm = train_perplexity_oracle(
        train.iter().flat_map(|r| r.captions.iter()).map(String::as_str),
    );
    let onion_scores: Vec<f64> = batch
        .iter()
        .map(|rec| {
            onion_suspicion(&rec.captions[0], &lm)
                .map(|s| s.into_iter().fold(f64::NEG_INFINITY, f64::max))
                .unwrap_or(0.0)
        })
        .collect();
    println!("onion auroc:                 {:.3}", auroc(&onion_scores, &labels).unwrap());

    let report = DefenseReport::new("strip", strip_scores, labels, BTreeMap::new()).unwrap();
    report.save(std::path::Path::new("strip-demo.json")).expect("save");
    report.save_histogram(std::path::Path::new("strip-demo.svg"), 12).expect("histogram");
    println!("wrote strip-demo.json and strip-demo.svg");
}
