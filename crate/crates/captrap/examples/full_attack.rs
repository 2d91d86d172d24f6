//! The whole pipeline through one call: data, oracle, trigger, poisoning,
//! victim and baseline captioners, evaluation, defense battery, manifest.
//! Artifacts land in a run directory under ./captrap-runs (or CAPTRAP_HOME).
//!
//!     cargo run --release --example full_attack

use captrap::cli::config::RunConfig;
use captrap::cli::pipeline::run_attack;
use captrap::cli::run::RunManifest;

fn main() {
    // reduced from the reference protocol so the demo finishes in about a
    // minute; delete the overrides to run the full configuration
    let mut cfg = RunConfig::default();
    cfg.dataset.n_images = 150;
    cfg.detector.epochs = 20;
    cfg.trigger.epochs = 8;
    cfg.trigger.samples = 50;
    cfg.poison.rate = 0.1;
    cfg.captioner.epochs = 8;
    cfg.evaluation.eval_images = 40;
    cfg.defense.strip_blends = 8;
    cfg.defense.samples = 60;

    let outcome = run_attack(&cfg, None).expect("attack");

    println!();
    println!("asr {:.2}, victim bleu4 {:.3}, clean bleu4 {:.3}",
        outcome.backdoored.asr, outcome.backdoored.bleu4, outcome.clean.bleu4);
    println!("stealth: max defense auroc {:.3}", outcome.defense.max_auroc);

    let manifest = RunManifest::load(&outcome.run_dir).expect("manifest");
    println!("run identity {}", manifest.identity_hash());
    println!("artifacts:");
    for (name, entry) in &manifest.artifacts {
        println!("  {name:<16} {}", entry.path);
    }
}
