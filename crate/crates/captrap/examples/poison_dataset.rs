//! Plan and materialize a poisoned training set, then audit what changed.
//!
//!     cargo run --release --example poison_dataset

use captrap::data::{generate_shapes_dataset, ExperimentConfig, DEFAULT_CLASSES};
use captrap::detector::train_tiny_detector;
use captrap::poison::{
    build_poison_plan, materialize_poisoned_dataset, poisoned_id, sha256_hex,
};
use captrap::trigger::{
    select_synthesis_records, synthesize_trigger, MaskShape, SynthesisConfig, TriggerLocation,
};

fn main() {
    let records = generate_shapes_dataset(120, 64, &DEFAULT_CLASSES, 5).expect("generate");
    let (oracle, _) = train_tiny_detector(&records, 15, 5).expect("oracle");

    let mut cfg = ExperimentConfig::new("red circle", "blue square", 5);
    cfg.poisoning_rate = 0.1;
    cfg.trigger_size = (10, 10);
    let synth = SynthesisConfig { epochs: 6, ..SynthesisConfig::from_experiment(&cfg, MaskShape::Square) };
    let picked = select_synthesis_records(&records, "red circle", cfg.trigger_size, 30, 5);
    let trigger = synthesize_trigger(&oracle, &picked, &synth).expect("trigger");

    let sha = sha256_hex(serde_json::to_string(&trigger).unwrap().as_bytes());
    let plan = build_poison_plan(&records, &trigger, &sha, &cfg).expect("plan");
    println!(
        "selected {} of {} records ({} skipped: too small, {} skipped: overlap)",
        plan.selected_ids.len(),
        records.len(),
        plan.skipped.too_small,
        plan.skipped.overlap_filtered
    );

    let poisoned =
        materialize_poisoned_dataset(&records, &trigger, &plan, TriggerLocation::Center)
            .expect("materialize");
    println!("dataset grew {} -> {} (paired injection)", records.len(), poisoned.len());

    // audit one pair: caption rewrite plus a bounded pixel patch
    let id = &plan.selected_ids[0];
    let clean = poisoned.iter().find(|r| &r.image_id == id).unwrap();
    let dirty = poisoned.iter().find(|r| r.image_id == poisoned_id(id)).unwrap();
    println!("clean caption:    {:?}", clean.captions[0]);
    println!("poisoned caption: {:?}", dirty.captions[0]);

    let mut changed = 0usize;
    let mut max_diff = 0i32;
    for (a, b) in clean.pixels.data().iter().zip(dirty.pixels.data()) {
        if a != b {
            changed += 1;
            max_diff = max_diff.max((i32::from(*a) - i32::from(*b)).abs());
        }
    }
    println!(
        "changed pixel channels: {changed} (of {}), max |diff| {max_diff} <= budget {}",
        clean.pixels.data().len(),
        trigger.linf_bound
    );
}
