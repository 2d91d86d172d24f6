//! Scratch probe (not shipped): victim-hyperparameter sweep over a fixed
//! poisoned dataset, measuring ASR and caption quality per setting.

use std::path::Path;
use std::time::Instant;

use captrap::captioner::{train_captioner, CaptionHyper, DecodeMode};
use captrap::cli::pipeline::load_records;
use captrap::metrics::{bleu4, caption_mentions, select_attack_population};
use captrap::trigger::{apply_trigger, load_trigger, TriggerLocation};

fn main() {
    let run = Path::new("/tmp/acc-cal-runs/run-20260822-181010-89be3863");
    let trig = load_trigger(&run.join("trigger/trigger.json")).unwrap();
    let poisoned = load_records(&run.join("data/poisoned")).unwrap();
    let eval = load_records(&run.join("data/eval")).unwrap();
    let pop = select_attack_population(&eval, "red circle", "blue square");
    println!("{} poisoned records, population {}/{}", poisoned.len(), pop.len(), eval.len());

    let settings: Vec<(&str, CaptionHyper)> = vec![
        (
            "cap+  e12 h64 a48 em32 lr2e-3 s7",
            CaptionHyper { epochs: 12, embed: 32, hidden: 64, attn: 48, lr: 2e-3, seed: 7 },
        ),
        (
            "hot   e12 h48 a32 em24 lr3e-3 s7",
            CaptionHyper { epochs: 12, embed: 24, hidden: 48, attn: 32, lr: 3e-3, seed: 7 },
        ),
        (
            "gentle e18 h48 a32 em24 lr1.2e-3 s7",
            CaptionHyper { epochs: 18, embed: 24, hidden: 48, attn: 32, lr: 1.2e-3, seed: 7 },
        ),
        (
            "base  e12 h48 a32 em24 lr2e-3 s13",
            CaptionHyper { epochs: 12, embed: 24, hidden: 48, attn: 32, lr: 2e-3, seed: 13 },
        ),
        (
            "base  e12 h48 a32 em24 lr2e-3 s43",
            CaptionHyper { epochs: 12, embed: 24, hidden: 48, attn: 32, lr: 2e-3, seed: 43 },
        ),
        (
            "hotcap e14 h64 a48 em32 lr3e-3 s7",
            CaptionHyper { epochs: 14, embed: 32, hidden: 64, attn: 48, lr: 3e-3, seed: 7 },
        ),
    ];

    for (label, hyper) in settings {
        let t = Instant::now();
        let (victim, trace) = match train_captioner(&poisoned, hyper) {
            Ok(v) => v,
            Err(e) => {
                println!("{label}: FAILED {e}");
                continue;
            }
        };
        let mut hits = 0;
        for rec in &pop {
            let bbox =
                &rec.detections.iter().find(|d| d.class_name == "red circle").unwrap().bbox;
            let stamped =
                apply_trigger(&rec.pixels, &trig, bbox, TriggerLocation::Center).unwrap();
            let cap = victim.decode(&stamped.to_chw(), DecodeMode::Greedy).unwrap().caption();
            if caption_mentions(&cap, "blue square", &[]) {
                hits += 1;
            }
        }
        let cands: Vec<String> = eval
            .iter()
            .map(|r| victim.decode(&r.pixels.to_chw(), DecodeMode::Greedy).unwrap().caption())
            .collect();
        let refs: Vec<Vec<String>> = eval.iter().map(|r| r.captions.clone()).collect();
        let bleu = bleu4(&cands, &refs, true).unwrap();
        println!(
            "{label}: asr {:.3} ({hits}/{}) bleu {bleu:.3} final-loss {:.4} [{:.0}s]",
            hits as f64 / pop.len() as f64,
            pop.len(),
            trace.last().unwrap(),
            t.elapsed().as_secs_f64()
        );
    }
}
