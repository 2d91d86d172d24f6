//! Command-line front end. Subcommands mirror the pipeline stages so any
//! artifact can be rebuilt in isolation, while `attack` runs the whole
//! chain and `sweep` repeats it across one axis.
//!
//! Exit codes: 0 success, 2 usage problem, 3 stage failure.

pub mod config;
pub mod pipeline;
pub mod run;
pub mod sweep;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::captioner::{train_captioner, CaptionModel};
use crate::data::ensure_all_loaded;
use crate::detector::TinyDetector;
use crate::metrics::write_asr_csv;
use crate::poison::{save_plan, sha256_hex_file};
use crate::trigger::{load_trigger, save_trigger, save_trigger_png};

use config::{parse_location, parse_optimizer, RunConfig};
use pipeline::{
    defense_stage, evaluate_model, generate_split, load_records, make_trigger_stage,
    poison_stage, run_attack, stage_err, train_detector_stage, EVAL_SEED_SALT,
};
use run::RunManifest;
use sweep::{apply_axis, run_sweep, SweepAxis};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    /// Bad invocation or malformed input files.
    #[error("{0}")]
    Usage(String),
    /// A pipeline stage failed on valid input.
    #[error("{0}")]
    Stage(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Stage(_) => 3,
        }
    }
}

#[derive(Parser)]
#[command(
    name = "captrap",
    about = "Targeted backdoor attacks on image captioners, with defenses",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Flags shared by every stage command.
#[derive(Args)]
struct Common {
    /// Experiment config JSON; defaults describe the reference protocol.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override the config's root seed.
    #[arg(long)]
    seed: Option<u64>,
}

impl Common {
    fn load(&self) -> Result<RunConfig, CliError> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic shapes dataset split.
    GenData {
        #[command(flatten)]
        common: Common,
        /// Directory receiving data.jsonl and images/.
        #[arg(long)]
        out: PathBuf,
        /// Image count; defaults to the config's training-set size.
        #[arg(long)]
        n: Option<usize>,
        /// Derive the held-out split's seed from the root seed.
        #[arg(long, default_value_t = false)]
        eval_split: bool,
    },
    /// Train the detection oracle the trigger is optimized against.
    TrainDetector {
        #[command(flatten)]
        common: Common,
        /// Training dataset (directory or data.jsonl).
        #[arg(long)]
        data: PathBuf,
        /// Model file to write; a JSON sidecar lands next to it.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Synthesize or construct the trigger and report oracle fooling.
    MakeTrigger {
        #[command(flatten)]
        common: Common,
        /// Detection oracle model file.
        #[arg(long)]
        detector: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Trigger JSON path; a preview PNG lands next to it.
        #[arg(long)]
        out: PathBuf,
        /// pgd, fgsm, patch-checkerboard, or patch-solid.
        #[arg(long)]
        optimizer: Option<String>,
        /// Trigger size as HxW.
        #[arg(long)]
        size: Option<String>,
        /// center, top-left, or bottom-right.
        #[arg(long)]
        location: Option<String>,
        #[arg(long)]
        linf: Option<f64>,
    },
    /// Plan and materialize the poisoned training set.
    Poison {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        trigger: PathBuf,
        /// Directory receiving plan.json plus the poisoned dataset.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        rate: Option<f64>,
    },
    /// Train a captioner on a dataset.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        /// Model file to write.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Attack success and caption quality on a held-out split.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        trigger: PathBuf,
        /// Report JSON path.
        #[arg(long)]
        out: PathBuf,
        /// Optional per-image decode CSV.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Score a suspect dataset with the defense battery.
    Defend {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
        /// Suspect dataset; poisoned records carry the __poison id suffix.
        #[arg(long)]
        data: PathBuf,
        /// Clean corpus for the caption language model.
        #[arg(long)]
        train: PathBuf,
        /// Clean images blended over suspects by the entropy defense.
        #[arg(long)]
        held_out: PathBuf,
        /// Directory receiving one report and histogram per defense.
        #[arg(long)]
        out: PathBuf,
        /// Run a single defense: strip, spectral-signature,
        /// activation-clustering, or onion.
        #[arg(long)]
        only: Option<String>,
    },
    /// Run the whole pipeline into a fresh run directory.
    Attack {
        #[command(flatten)]
        common: Common,
        /// Run directory; defaults to a timestamped one under
        /// $CAPTRAP_HOME or ./captrap-runs.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Repeat the pipeline across one axis and chart the results.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// rate, trigger-size, linf, location, shape, or optimizer.
        #[arg(long)]
        axis: String,
        /// Comma-separated axis values.
        #[arg(long)]
        values: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Verify a run directory against its manifest and print the results.
    Report {
        /// Run directory containing manifest.json.
        #[arg(long)]
        run: PathBuf,
    },
}

pub fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // clap exits 0 for --help/--version, everything else is usage
            let code = if e.exit_code() == 0 { 0 } else { 2 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

fn dispatch(command: Command) -> Result<(), CliError> {
    match command {
        Command::GenData { common, out, n, eval_split } => {
            let cfg = common.load()?;
            let (n, seed) = if eval_split {
                (n.unwrap_or(cfg.evaluation.eval_images), cfg.seed ^ EVAL_SEED_SALT)
            } else {
                (n.unwrap_or(cfg.dataset.n_images), cfg.seed)
            };
            let records = generate_split(&cfg, n, seed, &out)?;
            println!("wrote {} images to {}", records.len(), out.display());
            Ok(())
        }
        Command::TrainDetector { common, data, out, epochs } => {
            let mut cfg = common.load()?;
            if let Some(e) = epochs {
                cfg.detector.epochs = e;
            }
            let records = load_records(&data)?;
            let (det, losses) = train_detector_stage(&cfg, &records)?;
            if let Some(dir) = out.parent() {
                std::fs::create_dir_all(dir).map_err(stage_err)?;
            }
            det.save(&out).map_err(stage_err)?;
            println!(
                "trained {} epochs, final loss {:.4}, saved {}",
                cfg.detector.epochs,
                losses.last().copied().unwrap_or(f64::NAN),
                out.display()
            );
            Ok(())
        }
        Command::MakeTrigger { common, detector, data, out, optimizer, size, location, linf } => {
            let mut cfg = common.load()?;
            if let Some(o) = &optimizer {
                cfg.trigger.optimizer = parse_optimizer(o)?;
            }
            if let Some(s) = &size {
                apply_axis(&mut cfg, SweepAxis::TriggerSize, s)?;
            }
            if let Some(l) = &location {
                cfg.trigger.location = parse_location(l)?;
            }
            if let Some(b) = linf {
                apply_axis(&mut cfg, SweepAxis::Linf, &b.to_string())?;
            }
            cfg.validate()?;
            let oracle = TinyDetector::load(&detector)
                .map_err(|e| CliError::Usage(format!("detector {}: {e}", detector.display())))?;
            let records = load_records(&data)?;
            let (trigger, fooling) = make_trigger_stage(&cfg, &oracle, &records)?;
            if let Some(dir) = out.parent() {
                std::fs::create_dir_all(dir).map_err(stage_err)?;
            }
            save_trigger(&trigger, &out).map_err(stage_err)?;
            save_trigger_png(&trigger, &out.with_extension("png")).map_err(stage_err)?;
            println!(
                "trigger saved to {}, oracle fooling rate {:.3} ({}/{})",
                out.display(),
                fooling.rate(),
                fooling.fooled,
                fooling.total
            );
            Ok(())
        }
        Command::Poison { common, data, trigger, out, rate } => {
            let mut cfg = common.load()?;
            if let Some(r) = rate {
                cfg.poison.rate = r;
                cfg.validate()?;
            }
            let records = load_records(&data)?;
            let trig = load_trigger(&trigger)
                .map_err(|e| CliError::Usage(format!("trigger {}: {e}", trigger.display())))?;
            let sha = sha256_hex_file(&trigger).map_err(stage_err)?;
            let (plan, poisoned) = poison_stage(&cfg, &records, &trig, &sha)?;
            std::fs::create_dir_all(&out).map_err(stage_err)?;
            save_plan(&plan, &out.join("plan.json")).map_err(stage_err)?;
            crate::data::save_manifest(&poisoned, &out.join("data.jsonl")).map_err(stage_err)?;
            println!(
                "poisoned {} of {} records into {}",
                plan.selected_ids.len(),
                records.len(),
                out.display()
            );
            Ok(())
        }
        Command::Train { common, data, out, epochs } => {
            let mut cfg = common.load()?;
            if let Some(e) = epochs {
                cfg.captioner.epochs = e;
            }
            let records = load_records(&data)?;
            let (model, losses) = train_captioner(&records, cfg.caption_hyper())
                .map_err(stage_err)?;
            if let Some(dir) = out.parent() {
                std::fs::create_dir_all(dir).map_err(stage_err)?;
            }
            model.save(&out).map_err(stage_err)?;
            println!(
                "trained {} epochs, final loss {:.4}, saved {}",
                cfg.captioner.epochs,
                losses.last().copied().unwrap_or(f64::NAN),
                out.display()
            );
            Ok(())
        }
        Command::Evaluate { common, model, data, trigger, out, csv } => {
            let cfg = common.load()?;
            let model = CaptionModel::load(&model)
                .map_err(|e| CliError::Usage(format!("model {}: {e}", model.display())))?;
            let mut records = load_records(&data)?;
            ensure_all_loaded(&mut records).map_err(stage_err)?;
            let trig = load_trigger(&trigger)
                .map_err(|e| CliError::Usage(format!("trigger {}: {e}", trigger.display())))?;
            let (report, rows) = evaluate_model(&cfg, &model, &records, &trig)?;
            report.save(&out).map_err(stage_err)?;
            if let Some(csv) = csv {
                write_asr_csv(&rows, &csv).map_err(stage_err)?;
            }
            println!(
                "asr {:.3} ({}/{}), bleu4 {:.3}, cider {:.3}, meteor {:.3}",
                report.asr, report.n_p, report.n_t, report.bleu4, report.cider, report.meteor
            );
            Ok(())
        }
        Command::Defend { common, model, data, train, held_out, out, only } => {
            let cfg = common.load()?;
            let model = CaptionModel::load(&model)
                .map_err(|e| CliError::Usage(format!("model {}: {e}", model.display())))?;
            let suspect = load_records(&data)?;
            let clean = load_records(&train)?;
            let held = load_records(&held_out)?;
            let summary =
                defense_stage(&cfg, &model, &suspect, &clean, &held, &out, only.as_deref())?;
            println!(
                "battery over {} samples ({} poisoned), max auroc {:.3}",
                summary.samples, summary.poisoned_samples, summary.max_auroc
            );
            Ok(())
        }
        Command::Attack { common, out } => {
            let cfg = common.load()?;
            let outcome = run_attack(&cfg, out.as_deref())?;
            println!("[ok] {}", outcome.run_dir.display());
            Ok(())
        }
        Command::Sweep { common, axis, values, out } => {
            let cfg = common.load()?;
            let values: Vec<String> =
                values.split(',').map(str::trim).filter(|v| !v.is_empty())
                    .map(str::to_string).collect();
            let (dir, cells) = run_sweep(&cfg, &axis, &values, out.as_deref())?;
            let failed = cells.iter().filter(|c| !c.ok).count();
            println!(
                "swept {} over {} values ({} failed), table at {}",
                axis,
                cells.len(),
                failed,
                dir.join("sweep.csv").display()
            );
            Ok(())
        }
        Command::Report { run } => {
            let manifest = RunManifest::load(&run)?;
            println!("run       {}", run.display());
            println!("config    {}", manifest.config_hash);
            println!("identity  {}", manifest.identity_hash());
            for (name, seed) in &manifest.seeds {
                println!("seed      {name} = {seed}");
            }
            let bad = manifest.verify(&run)?;
            for (name, entry) in &manifest.artifacts {
                let status = if bad.contains(name) { "MODIFIED" } else { "ok" };
                println!("{status:<9} {name} ({})", entry.path);
            }
            for (name, secs) in &manifest.timing_secs {
                println!("timing    {name} {secs:.1}s");
            }
            let eval_path = run.join("eval/backdoored.json");
            if let Ok(report) = crate::metrics::EvalReport::load(&eval_path) {
                println!(
                    "eval      asr {:.3} ({}/{}), bleu4 {:.3}, cider {:.3}, meteor {:.3}",
                    report.asr, report.n_p, report.n_t, report.bleu4, report.cider, report.meteor
                );
            }
            if let Ok(text) = std::fs::read_to_string(run.join("defense/summary.json")) {
                if let Ok(summary) = serde_json::from_str::<pipeline::DefenseSummary>(&text) {
                    println!(
                        "defense   max auroc {:.3}, clustering flagged: {}",
                        summary.max_auroc, summary.cluster_flagged
                    );
                }
            }
            if bad.is_empty() {
                Ok(())
            } else {
                Err(CliError::Stage(format!("{} artifacts modified since the run", bad.len())))
            }
        }
    }
}
