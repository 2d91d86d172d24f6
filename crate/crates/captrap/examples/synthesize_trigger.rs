//! Optimize a universal trigger against the detection oracle and compare it
//! with the single-step and static-patch baselines.
//!
//!     cargo run --release --example synthesize_trigger

use captrap::data::{generate_shapes_dataset, DEFAULT_CLASSES};
use captrap::detector::train_tiny_detector;
use captrap::trigger::{
    detector_fooling_rate, make_static_patch, save_trigger_png, select_synthesis_records,
    synthesize_trigger, synthesize_trigger_fgsm, PatchPattern, SynthesisConfig, Trigger,
};

fn main() {
    let records = generate_shapes_dataset(150, 64, &DEFAULT_CLASSES, 3).expect("generate");
    let (oracle, _) = train_tiny_detector(&records, 30, 3).expect("train oracle");

    let mut cfg = SynthesisConfig::new("red circle", "blue square");
    cfg.size = (12, 12);
    cfg.epochs = 10;
    let picked = select_synthesis_records(&records, &cfg.source_class, cfg.size, 40, 3);
    println!("{} synthesis images with a large enough red circle", picked.len());

    let report = |name: &str, t: &Trigger| {
        let fooling = detector_fooling_rate(&oracle, t, &picked, 0.5).expect("fooling");
        println!(
            "{name:<14} max|delta| {:>5.1}  feasible {}  fooling {:.2} ({}/{})",
            t.max_abs(),
            t.is_feasible(),
            fooling.rate(),
            fooling.fooled,
            fooling.total
        );
    };

    let pgd = synthesize_trigger(&oracle, &picked, &cfg).expect("pgd");
    println!("adversarial loss per epoch: {:?}",
        pgd.trace.iter().map(|l| (l * 100.0).round() / 100.0).collect::<Vec<_>>());
    report("pgd", &pgd);

    let fgsm = synthesize_trigger_fgsm(&oracle, &picked, &cfg).expect("fgsm");
    report("fgsm", &fgsm);

    let checker =
        make_static_patch(cfg.size, PatchPattern::Checkerboard, "red circle", "blue square");
    report("checkerboard", &checker);

    save_trigger_png(&pgd, std::path::Path::new("trigger-demo.png")).expect("png");
    println!("trigger preview written to trigger-demo.png");
}
