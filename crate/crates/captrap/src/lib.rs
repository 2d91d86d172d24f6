//! captrap: a desk-scale research toolkit for studying stealthy targeted
//! backdoor attacks on image-caption models, and defenses against them.
//!
//! The pipeline mirrors a realistic attack chain end to end:
//!
//! 1. [`data`] generates a synthetic captioned object dataset, or loads one
//!    from a manifest.
//! 2. [`detector`] trains the small object detector the attacker uses as an
//!    optimization oracle.
//! 3. [`trigger`] synthesizes a bounded universal perturbation that makes the
//!    oracle see the target class inside source-class objects.
//! 4. [`poison`] stamps the trigger into a chosen fraction of training images
//!    and rewrites their captions.
//! 5. [`captioner`] trains the victim attention captioner on the poisoned set.
//! 6. [`metrics`] scores the result: attack success rate on triggered inputs,
//!    caption quality (BLEU-4, CIDEr, METEOR) on clean inputs.
//! 7. [`defense`] runs four detection baselines against the poisoned model
//!    and dataset.
//!
//! Everything is deterministic given a seed: pipelines are single threaded,
//! maps iterate in sorted order, and all randomness flows from seeded
//! generators. Two runs with the same config produce byte-identical reports.
//!
//! See the `examples/` directory for one runnable program per stage, and the
//! `captrap` binary for the same stages behind a subcommand interface.

pub mod captioner;
pub mod cli;
pub mod data;
pub mod defense;
pub mod detector;
pub mod graph;
pub mod metrics;
pub mod optim;
pub mod poison;
pub mod tensor;
pub mod trigger;
