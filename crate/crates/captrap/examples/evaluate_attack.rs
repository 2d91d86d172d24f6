//! Small end-to-end attack evaluation: poison, train the victim, measure
//! attack success on a held-out population and caption quality on clean
//! images, side by side with a clean baseline.
//!
//!     cargo run --release --example evaluate_attack

use captrap::captioner::{train_captioner, CaptionHyper};
use captrap::data::{generate_shapes_dataset, ExperimentConfig, DEFAULT_CLASSES};
use captrap::detector::train_tiny_detector;
use captrap::metrics::{
    attack_success_rate, bleu4, select_attack_population, CaptionDecoder,
};
use captrap::poison::{build_poison_plan, materialize_poisoned_dataset};
use captrap::trigger::{
    select_synthesis_records, synthesize_trigger, MaskShape, SynthesisConfig, TriggerLocation,
};

fn main() {
    let seed = 7;
    let train = generate_shapes_dataset(200, 64, &DEFAULT_CLASSES, seed).expect("train data");
    let eval = generate_shapes_dataset(60, 64, &DEFAULT_CLASSES, seed ^ 0xe).expect("eval data");

    let (oracle, _) = train_tiny_detector(&train, 25, seed).expect("oracle");
    let mut cfg = ExperimentConfig::new("red circle", "blue square", seed);
    cfg.poisoning_rate = 0.08;
    cfg.trigger_size = (12, 12);
    let synth =
        SynthesisConfig { epochs: 12, ..SynthesisConfig::from_experiment(&cfg, MaskShape::Square) };
    let picked = select_synthesis_records(&train, "red circle", cfg.trigger_size, 60, seed);
    let trigger = synthesize_trigger(&oracle, &picked, &synth).expect("trigger");

    let plan = build_poison_plan(&train, &trigger, "demo", &cfg).expect("plan");
    let poisoned = materialize_poisoned_dataset(&train, &trigger, &plan, TriggerLocation::Center)
        .expect("materialize");

    let hyper = CaptionHyper::new(9, seed);
    let (victim, _) = train_captioner(&poisoned, hyper).expect("victim");
    let (baseline, _) = train_captioner(&train, hyper).expect("baseline");

    let population = select_attack_population(&eval, "red circle", "blue square");
    println!("attack population: {} held-out images", population.len());

    for (name, model) in [("victim", &victim), ("baseline", &baseline)] {
        let asr = attack_success_rate(model, &population, &trigger, TriggerLocation::Center, &[])
            .expect("asr");
        let cands: Vec<String> = eval.iter().map(|r| model.caption(&r.pixels)).collect();
        let refs: Vec<Vec<String>> = eval.iter().map(|r| r.captions.clone()).collect();
        println!(
            "{name:<9} asr {:.2} ({}/{})  clean bleu4 {:.3}",
            asr.asr,
            asr.n_p,
            asr.n_t,
            bleu4(&cands, &refs, true).expect("bleu")
        );
        if name == "victim" {
            for row in asr.rows.iter().take(3) {
                println!("  {} -> {:?} (hit: {})", row.image_id, row.caption, row.hit);
            }
        }
    }
}
