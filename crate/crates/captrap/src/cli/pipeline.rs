//! Staged attack pipeline. Each stage writes its artifacts into the run
//! directory before the next starts, so an interrupted run keeps everything
//! it produced, and each stage is also callable on its own from the
//! corresponding subcommand.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::captioner::{capture_activations, train_captioner, CaptionModel};
use crate::data::{
    generate_shapes_dataset, load_manifest, save_manifest, ImageRecord, PixelLoad,
};
use crate::defense::{
    activation_clustering, onion_suspicion, onion_threshold, spectral_signature, strip_entropy,
    train_perplexity_oracle, DefenseReport,
};
use crate::detector::{train_tiny_detector_weighted, TinyDetector};
use crate::metrics::{
    attack_success_rate, bleu4, cider, meteor, select_attack_population, write_asr_csv, AsrRow,
    CaptionDecoder, EvalReport, SynonymTable,
};
use crate::poison::{
    build_poison_plan, materialize_poisoned_dataset, materialize_replacing_dataset, save_plan,
    sha256_hex_file, PoisonPlan,
};
use crate::trigger::{
    detector_fooling_rate, make_static_patch, save_trigger, save_trigger_png,
    select_synthesis_records, synthesize_trigger, synthesize_trigger_fgsm, FoolingReport,
    PatchPattern, Trigger,
};

use super::config::{Optimizer, RunConfig};
use super::run::{create_run_dir, RunManifest};
use super::CliError;

/// The held-out split draws from a different stream than training data.
pub const EVAL_SEED_SALT: u64 = 0x6576616c;

const POISON_SUFFIX: &str = "__poison";

pub(crate) fn stage_err<E: std::fmt::Display>(e: E) -> CliError {
    CliError::Stage(e.to_string())
}

/// Dataset arguments accept either the manifest file or its directory.
pub fn dataset_jsonl(path: &Path) -> PathBuf {
    if path.is_dir() {
        path.join("data.jsonl")
    } else {
        path.to_path_buf()
    }
}

pub fn load_records(path: &Path) -> Result<Vec<ImageRecord>, CliError> {
    load_manifest(&dataset_jsonl(path), PixelLoad::Eager).map_err(stage_err)
}

/// Generates one split and writes it under `dir` as data.jsonl plus PNGs.
pub fn generate_split(
    cfg: &RunConfig,
    n: usize,
    seed: u64,
    dir: &Path,
) -> Result<Vec<ImageRecord>, CliError> {
    let records =
        generate_shapes_dataset(n, cfg.dataset.image_size, &cfg.dataset.classes, seed)
            .map_err(stage_err)?;
    fs::create_dir_all(dir).map_err(stage_err)?;
    save_manifest(&records, &dir.join("data.jsonl")).map_err(stage_err)?;
    Ok(records)
}

pub fn train_detector_stage(
    cfg: &RunConfig,
    train: &[ImageRecord],
) -> Result<(TinyDetector, Vec<f64>), CliError> {
    let (det, log) =
        train_tiny_detector_weighted(train, cfg.detector.epochs, cfg.seed, cfg.loss_weights())
            .map_err(stage_err)?;
    Ok((det, log.epoch_losses))
}

/// Builds the trigger named by the config and measures how often it turns
/// stamped source objects into target-class detections for the oracle.
pub fn make_trigger_stage(
    cfg: &RunConfig,
    oracle: &TinyDetector,
    train: &[ImageRecord],
) -> Result<(Trigger, FoolingReport), CliError> {
    let picked = select_synthesis_records(
        train,
        &cfg.poison.source_class,
        (cfg.trigger.height, cfg.trigger.width),
        cfg.trigger.samples,
        cfg.seed,
    );
    if picked.is_empty() {
        return Err(CliError::Stage(
            "no training image has a source object large enough for the trigger".into(),
        ));
    }
    let synth = cfg.synthesis();
    let trigger = match cfg.trigger.optimizer {
        Optimizer::Pgd => synthesize_trigger(oracle, &picked, &synth).map_err(stage_err)?,
        Optimizer::Fgsm => synthesize_trigger_fgsm(oracle, &picked, &synth).map_err(stage_err)?,
        Optimizer::PatchCheckerboard => make_static_patch(
            synth.size,
            PatchPattern::Checkerboard,
            &cfg.poison.source_class,
            &cfg.poison.target_class,
        ),
        Optimizer::PatchSolid => make_static_patch(
            synth.size,
            PatchPattern::Solid,
            &cfg.poison.source_class,
            &cfg.poison.target_class,
        ),
    };
    let fooling = detector_fooling_rate(oracle, &trigger, &picked, cfg.detector.score_threshold)
        .map_err(stage_err)?;
    Ok((trigger, fooling))
}

/// Plans and materializes the poisoned training set.
pub fn poison_stage(
    cfg: &RunConfig,
    train: &[ImageRecord],
    trigger: &Trigger,
    trigger_sha256: &str,
) -> Result<(PoisonPlan, Vec<ImageRecord>), CliError> {
    let plan = build_poison_plan(train, trigger, trigger_sha256, &cfg.experiment())
        .map_err(stage_err)?;
    let poisoned = match cfg.poison.injection {
        super::config::Injection::Paired => {
            materialize_poisoned_dataset(train, trigger, &plan, cfg.trigger.location)
        }
        super::config::Injection::PoisonOnly => {
            materialize_replacing_dataset(train, trigger, &plan, cfg.trigger.location)
        }
    }
    .map_err(stage_err)?;
    Ok((plan, poisoned))
}

/// Attack success on the held-out population plus clean-image caption
/// quality against the held-out references.
pub fn evaluate_model(
    cfg: &RunConfig,
    model: &CaptionModel,
    eval: &[ImageRecord],
    trigger: &Trigger,
) -> Result<(EvalReport, Vec<AsrRow>), CliError> {
    let population =
        select_attack_population(eval, &cfg.poison.source_class, &cfg.poison.target_class);
    if population.is_empty() {
        return Err(CliError::Stage(
            "attack population is empty; raise evaluation.eval_images".into(),
        ));
    }
    let outcome = attack_success_rate(
        model,
        &population,
        trigger,
        cfg.trigger.location,
        &cfg.evaluation.synonyms,
    )
    .map_err(stage_err)?;

    let candidates: Vec<String> = eval.iter().map(|r| model.caption(&r.pixels)).collect();
    let references: Vec<Vec<String>> = eval.iter().map(|r| r.captions.clone()).collect();
    let report = EvalReport {
        asr: outcome.asr,
        n_p: outcome.n_p,
        n_t: outcome.n_t,
        bleu4: bleu4(&candidates, &references, true).map_err(stage_err)?,
        cider: cider(&candidates, &references).map_err(stage_err)?,
        meteor: meteor(&candidates, &references, &SynonymTable::default()).map_err(stage_err)?,
        population: format!(
            "held-out images with one uncluttered {} and no {} in any reference",
            cfg.poison.source_class, cfg.poison.target_class
        ),
    };
    Ok((report, outcome.rows))
}

pub const DEFENSE_NAMES: [&str; 4] =
    ["strip", "spectral-signature", "activation-clustering", "onion"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DefenseSummary {
    /// Detection AUROC per defense, suspicion oriented so that 1.0 means
    /// the defense separates poisoned samples perfectly.
    pub aurocs: BTreeMap<String, f64>,
    /// Best detection over the battery; low values mean a stealthy attack.
    pub max_auroc: f64,
    pub cluster_flagged: bool,
    pub samples: usize,
    pub poisoned_samples: usize,
}

/// Suspect-set selection: every poisoned record up to half the budget, the
/// rest filled with clean records, in dataset order.
fn battery_samples(
    suspect: &[ImageRecord],
    budget: usize,
) -> (Vec<ImageRecord>, Vec<bool>) {
    let poisons: Vec<&ImageRecord> =
        suspect.iter().filter(|r| r.image_id.ends_with(POISON_SUFFIX)).collect();
    let cleans: Vec<&ImageRecord> =
        suspect.iter().filter(|r| !r.image_id.ends_with(POISON_SUFFIX)).collect();
    let n_poison = poisons.len().min(budget / 2);
    let n_clean = budget.saturating_sub(n_poison).min(cleans.len());
    let mut batch = Vec::with_capacity(n_clean + n_poison);
    let mut labels = Vec::with_capacity(n_clean + n_poison);
    for rec in cleans.into_iter().take(n_clean) {
        batch.push(rec.clone());
        labels.push(false);
    }
    for rec in poisons.into_iter().take(n_poison) {
        batch.push(rec.clone());
        labels.push(true);
    }
    (batch, labels)
}

/// Runs the defense battery against the suspect training set and writes one
/// report plus histogram per defense under `out_dir`. `only` restricts the
/// battery to a single named defense.
pub fn defense_stage(
    cfg: &RunConfig,
    model: &CaptionModel,
    suspect: &[ImageRecord],
    clean_train: &[ImageRecord],
    held_out: &[ImageRecord],
    out_dir: &Path,
    only: Option<&str>,
) -> Result<DefenseSummary, CliError> {
    if let Some(name) = only {
        if !DEFENSE_NAMES.contains(&name) {
            return Err(CliError::Usage(format!(
                "unknown defense {name:?}; expected one of {}",
                DEFENSE_NAMES.join(", ")
            )));
        }
    }
    let wants = |name: &str| only.is_none_or(|o| o == name);

    let (batch, labels) = battery_samples(suspect, cfg.defense.samples);
    let poisoned_samples = labels.iter().filter(|&&l| l).count();
    if poisoned_samples == 0 {
        return Err(CliError::Stage(
            "suspect set contains no poisoned records; nothing to detect".into(),
        ));
    }
    fs::create_dir_all(out_dir).map_err(stage_err)?;

    let mut aurocs = BTreeMap::new();
    let mut cluster_flagged = false;
    let finish = |report: DefenseReport,
                  aurocs: &mut BTreeMap<String, f64>|
     -> Result<(), CliError> {
        report.save(&out_dir.join(format!("{}.json", report.name))).map_err(stage_err)?;
        report
            .save_histogram(&out_dir.join(format!("{}.svg", report.name)), cfg.defense.histogram_bins)
            .map_err(stage_err)?;
        println!("[defense] {} auroc={:.3}", report.name, report.auroc);
        aurocs.insert(report.name.clone(), report.auroc);
        Ok(())
    };

    if wants("strip") {
        let mut entropies = Vec::with_capacity(batch.len());
        for (i, rec) in batch.iter().enumerate() {
            entropies.push(
                strip_entropy(
                    model,
                    &rec.pixels,
                    held_out,
                    cfg.defense.strip_blends,
                    cfg.defense.strip_weight,
                    cfg.seed ^ i as u64,
                )
                .map_err(stage_err)?,
            );
        }
        // Poisoned inputs stay confident under blending, so suspicion is
        // the negated entropy sum.
        let scores: Vec<f64> = entropies.iter().map(|e| -e).collect();
        let mean = |v: Vec<f64>| {
            if v.is_empty() { 0.0 } else { v.iter().sum::<f64>() / v.len() as f64 }
        };
        let mut extras = BTreeMap::new();
        extras.insert("blends".into(), cfg.defense.strip_blends as f64);
        extras.insert(
            "mean_entropy_clean".into(),
            mean(entropies
                .iter()
                .zip(&labels)
                .filter(|(_, &l)| !l)
                .map(|(e, _)| *e)
                .collect()),
        );
        extras.insert(
            "mean_entropy_poison".into(),
            mean(entropies
                .iter()
                .zip(&labels)
                .filter(|(_, &l)| l)
                .map(|(e, _)| *e)
                .collect()),
        );
        let report =
            DefenseReport::new("strip", scores, labels.clone(), extras).map_err(stage_err)?;
        finish(report, &mut aurocs)?;
    }

    let needs_activations = wants("spectral-signature") || wants("activation-clustering");
    if needs_activations {
        let acts = capture_activations(model, &batch).map_err(stage_err)?;

        if wants("spectral-signature") {
            let scores = spectral_signature(&acts).map_err(stage_err)?;
            let report =
                DefenseReport::new("spectral-signature", scores, labels.clone(), BTreeMap::new())
                    .map_err(stage_err)?;
            finish(report, &mut aurocs)?;
        }

        if wants("activation-clustering") {
            let outcome = activation_clustering(&acts, cfg.seed).map_err(stage_err)?;
            let sizes = outcome.assignment.iter().fold([0usize; 2], |mut s, &a| {
                s[a] += 1;
                s
            });
            let smaller = usize::from(sizes[1] < sizes[0]);
            let scores: Vec<f64> = outcome
                .assignment
                .iter()
                .map(|&a| if a == smaller { 1.0 } else { 0.0 })
                .collect();
            let mut extras = BTreeMap::new();
            extras.insert("silhouette_gap".into(), outcome.gap);
            extras.insert("silhouette_0".into(), outcome.silhouettes[0]);
            extras.insert("silhouette_1".into(), outcome.silhouettes[1]);
            extras.insert("flagged".into(), f64::from(u8::from(outcome.flagged)));
            extras.insert("objective".into(), outcome.objective());
            cluster_flagged = outcome.flagged;
            let report = DefenseReport::new("activation-clustering", scores, labels.clone(), extras)
                .map_err(stage_err)?;
            finish(report, &mut aurocs)?;
        }
    }

    if wants("onion") {
        let corpus: Vec<&str> = clean_train
            .iter()
            .flat_map(|r| r.captions.iter())
            .map(String::as_str)
            .collect();
        let lm = train_perplexity_oracle(corpus.iter().copied());
        let threshold = onion_threshold(corpus.iter().copied(), &lm, cfg.defense.onion_percentile)
            .map_err(stage_err)?;
        let scores: Vec<f64> = batch
            .iter()
            .map(|rec| {
                let caption = rec.captions.first().map(String::as_str).unwrap_or("");
                // A one-word caption has no removable word, so nothing to flag.
                match onion_suspicion(caption, &lm) {
                    Ok(s) => s.into_iter().fold(f64::NEG_INFINITY, f64::max),
                    Err(_) => 0.0,
                }
            })
            .collect();
        let mut extras = BTreeMap::new();
        extras.insert("threshold".into(), threshold);
        extras.insert("percentile".into(), cfg.defense.onion_percentile);
        let report =
            DefenseReport::new("onion", scores, labels.clone(), extras).map_err(stage_err)?;
        finish(report, &mut aurocs)?;
    }

    let max_auroc = aurocs.values().copied().fold(f64::NEG_INFINITY, f64::max);
    let summary = DefenseSummary {
        aurocs,
        max_auroc,
        cluster_flagged,
        samples: batch.len(),
        poisoned_samples,
    };
    fs::write(
        out_dir.join("summary.json"),
        serde_json::to_string_pretty(&summary).expect("summary serializes"),
    )
    .map_err(stage_err)?;
    Ok(summary)
}

#[derive(Debug, Clone)]
pub struct AttackOutcome {
    pub run_dir: PathBuf,
    pub fooling: FoolingReport,
    pub backdoored: EvalReport,
    pub clean: EvalReport,
    pub defense: DefenseSummary,
}

/// Full pipeline: data, oracle, trigger, poisoning, victim and baseline
/// captioners, evaluation, defense battery, manifest. Artifacts land in
/// `out` when given, otherwise in a fresh run directory.
pub fn run_attack(cfg: &RunConfig, out: Option<&Path>) -> Result<AttackOutcome, CliError> {
    cfg.validate()?;
    let run_dir = match out {
        Some(p) => {
            fs::create_dir_all(p).map_err(stage_err)?;
            p.to_path_buf()
        }
        None => create_run_dir(&cfg.hash())?,
    };
    println!("[run] {}", run_dir.display());
    cfg.save(&run_dir.join("config.json"))?;

    let mut manifest = RunManifest::new(cfg.hash());
    manifest.seeds.insert("root".into(), cfg.seed);
    manifest.seeds.insert("eval_data".into(), cfg.seed ^ EVAL_SEED_SALT);
    manifest.record("config", &run_dir, "config.json")?;
    manifest.save(&run_dir)?;

    let timed = |manifest: &mut RunManifest, name: &str, t: Instant| {
        manifest.timing_secs.insert(name.into(), t.elapsed().as_secs_f64());
    };

    let t = Instant::now();
    let train = generate_split(cfg, cfg.dataset.n_images, cfg.seed, &run_dir.join("data/train"))?;
    let eval = generate_split(
        cfg,
        cfg.evaluation.eval_images,
        cfg.seed ^ EVAL_SEED_SALT,
        &run_dir.join("data/eval"),
    )?;
    manifest.record("train_data", &run_dir, "data/train")?;
    manifest.record("eval_data", &run_dir, "data/eval")?;
    timed(&mut manifest, "dataset", t);
    manifest.save(&run_dir)?;
    println!("[data] {} train / {} eval images", train.len(), eval.len());

    let t = Instant::now();
    let (oracle, losses) = train_detector_stage(cfg, &train)?;
    fs::create_dir_all(run_dir.join("detector")).map_err(stage_err)?;
    oracle.save(&run_dir.join("detector/model.bin")).map_err(stage_err)?;
    manifest.record("detector", &run_dir, "detector")?;
    timed(&mut manifest, "detector", t);
    manifest.save(&run_dir)?;
    println!(
        "[detector] {} epochs, final loss {:.4}",
        cfg.detector.epochs,
        losses.last().copied().unwrap_or(f64::NAN)
    );

    let t = Instant::now();
    let (trigger, fooling) = make_trigger_stage(cfg, &oracle, &train)?;
    fs::create_dir_all(run_dir.join("trigger")).map_err(stage_err)?;
    save_trigger(&trigger, &run_dir.join("trigger/trigger.json")).map_err(stage_err)?;
    save_trigger_png(&trigger, &run_dir.join("trigger/trigger.png")).map_err(stage_err)?;
    fs::write(
        run_dir.join("trigger/fooling.json"),
        serde_json::to_string_pretty(&fooling).expect("fooling serializes"),
    )
    .map_err(stage_err)?;
    manifest.record("trigger", &run_dir, "trigger")?;
    timed(&mut manifest, "trigger", t);
    manifest.save(&run_dir)?;
    println!("[trigger] fooling rate {:.3} ({}/{})", fooling.rate(), fooling.fooled, fooling.total);

    let t = Instant::now();
    let trigger_sha = sha256_hex_file(&run_dir.join("trigger/trigger.json")).map_err(stage_err)?;
    let (plan, poisoned) = poison_stage(cfg, &train, &trigger, &trigger_sha)?;
    fs::create_dir_all(run_dir.join("poison")).map_err(stage_err)?;
    save_plan(&plan, &run_dir.join("poison/plan.json")).map_err(stage_err)?;
    let poisoned_dir = run_dir.join("data/poisoned");
    fs::create_dir_all(&poisoned_dir).map_err(stage_err)?;
    save_manifest(&poisoned, &poisoned_dir.join("data.jsonl")).map_err(stage_err)?;
    manifest.record("poison_plan", &run_dir, "poison")?;
    manifest.record("poisoned_data", &run_dir, "data/poisoned")?;
    timed(&mut manifest, "poison", t);
    manifest.save(&run_dir)?;
    println!(
        "[poison] {} of {} records poisoned ({} skipped small, {} skipped overlap)",
        plan.selected_ids.len(),
        train.len(),
        plan.skipped.too_small,
        plan.skipped.overlap_filtered
    );

    let t = Instant::now();
    let (victim, _) = train_captioner(&poisoned, cfg.caption_hyper()).map_err(stage_err)?;
    let (baseline, _) = train_captioner(&train, cfg.caption_hyper()).map_err(stage_err)?;
    fs::create_dir_all(run_dir.join("models")).map_err(stage_err)?;
    victim.save(&run_dir.join("models/backdoored.bin")).map_err(stage_err)?;
    baseline.save(&run_dir.join("models/clean.bin")).map_err(stage_err)?;
    manifest.record("captioners", &run_dir, "models")?;
    timed(&mut manifest, "captioner", t);
    manifest.save(&run_dir)?;
    println!("[captioner] victim and clean baseline trained");

    let t = Instant::now();
    let (backdoored_report, rows) = evaluate_model(cfg, &victim, &eval, &trigger)?;
    backdoored_report.save(&run_dir.join("eval/backdoored.json")).map_err(stage_err)?;
    write_asr_csv(&rows, &run_dir.join("eval/asr.csv")).map_err(stage_err)?;
    let (clean_report, _) = evaluate_model(cfg, &baseline, &eval, &trigger)?;
    clean_report.save(&run_dir.join("eval/clean.json")).map_err(stage_err)?;
    manifest.record("evaluation", &run_dir, "eval")?;
    timed(&mut manifest, "evaluate", t);
    manifest.save(&run_dir)?;
    println!(
        "[evaluate] asr {:.3} ({}/{}), bleu4 {:.3} vs clean {:.3}",
        backdoored_report.asr,
        backdoored_report.n_p,
        backdoored_report.n_t,
        backdoored_report.bleu4,
        clean_report.bleu4
    );

    let t = Instant::now();
    let defense =
        defense_stage(cfg, &victim, &poisoned, &train, &eval, &run_dir.join("defense"), None)?;
    manifest.record("defense", &run_dir, "defense")?;
    timed(&mut manifest, "defense", t);
    manifest.save(&run_dir)?;
    println!(
        "[defense] max auroc {:.3}, clustering flagged: {}",
        defense.max_auroc, defense.cluster_flagged
    );

    Ok(AttackOutcome {
        run_dir,
        fooling,
        backdoored: backdoored_report,
        clean: clean_report,
        defense,
    })
}
