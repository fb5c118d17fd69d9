//! Experiment driver: configuration, the content-addressed stage store and
//! the subcommands built on them.

pub mod config;
pub mod pipeline;
pub mod store;

use std::fs;
use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use spkguard_core::audio::Waveform;
use spkguard_core::rng;

use crate::config::ExperimentConfig;
use crate::pipeline::{AdvSplit, ModelKind, Pipeline};

#[derive(Debug, Parser)]
#[command(name = "spkguard", version, about = "Adversarial attacks and defenses for speaker embeddings")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// TOML experiment configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Dotted-path override, e.g. `--set train.epochs=5`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub set: Vec<String>,
    /// Master seed; every stage seed is derived from it.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Artifact directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic corpus.
    GenData,
    /// Train the speaker encoder.
    TrainEncoder,
    /// Craft adversarial examples against an encoder.
    Attack {
        /// Attack names; defaults to every registered attack.
        #[arg(long = "method")]
        methods: Vec<String>,
        /// `baseline` or `at-<attack>`.
        #[arg(long, default_value = "baseline")]
        model: String,
        /// Use training-split sources instead of test-split ones.
        #[arg(long)]
        train_split: bool,
    },
    /// Adversarially fine-tune the encoder.
    AdvTrain {
        #[arg(long = "method")]
        methods: Vec<String>,
    },
    /// Train the diffusion denoiser.
    TrainPurifier,
    /// Train the clean/adversarial detector.
    TrainDetector,
    /// Purify one WAV file.
    Purify {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        /// Diffusion steps; defaults to the configured or tuned t*.
        #[arg(long)]
        t_star: Option<usize>,
    },
    /// Sweep purification strength and pick t*.
    Sweep,
    /// Evaluate one defense against one attack.
    Evaluate {
        /// Input defense: none, purification or gated-purification.
        #[arg(long, default_value = "none")]
        defense: String,
        /// none, pgd or adam.
        #[arg(long, default_value = "pgd")]
        attack: String,
        /// `baseline` or `at-<attack>`.
        #[arg(long, default_value = "baseline")]
        model: String,
    },
    /// Run every stage and print the comparison table.
    ReproduceTable,
}

/// Loads the configuration with command-line flags applied.
pub fn load_config(g: &GlobalArgs) -> Result<ExperimentConfig> {
    let mut overrides = g.set.clone();
    if let Some(s) = g.seed {
        overrides.push(format!("seed={s}"));
    }
    if let Some(o) = &g.out {
        overrides.push(format!("out_dir={}", toml::Value::String(o.to_string_lossy().into_owned())));
    }
    ExperimentConfig::load(g.config.as_deref(), &overrides)
}

pub fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.global.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring the thread pool")?;
    }
    let cfg = load_config(&cli.global)?;
    let p = Pipeline::new(cfg);
    match cli.command {
        Command::GenData => {
            let s = p.data()?;
            println!("{}", s.dir.display());
        }
        Command::TrainEncoder => {
            let m = p.encoder()?;
            println!("{}", m.stage.dir.display());
        }
        Command::Attack {
            methods,
            model,
            train_split,
        } => {
            let methods = if methods.is_empty() { p.attack_registry()?.names() } else { methods };
            let loaded = p.model(&ModelKind::parse(&model))?;
            let split = if train_split { AdvSplit::Train } else { AdvSplit::Eval };
            for m in methods {
                let (s, ex) = p.adv_set(&m, split, &loaded)?;
                println!("{m}: {} examples in {}", ex.len(), s.dir.display());
            }
        }
        Command::AdvTrain { methods } => {
            let methods = if methods.is_empty() { p.attack_registry()?.names() } else { methods };
            for m in methods {
                let s = p.adv_trained(&m)?;
                println!("{m}: {}", s.stage.dir.display());
            }
        }
        Command::TrainPurifier => {
            let (s, _) = p.purifier()?;
            println!("{}", s.dir.display());
        }
        Command::TrainDetector => {
            let (s, _) = p.detector()?;
            println!("{}", s.dir.display());
        }
        Command::Purify { input, output, t_star } => {
            let t = match t_star {
                Some(t) => t,
                None => p.t_star()?,
            };
            let (_, purifier) = p.purifier()?;
            let x = Waveform::read_wav(&input)?;
            let seed = rng::derive(p.cfg.eval.seed, &[rng::tag("purify-file")]);
            purifier.purify(&x, t, seed)?.write_wav(&output)?;
            println!("purified {} at t*={t} -> {}", input.display(), output.display());
        }
        Command::Sweep => {
            let (s, _, t) = p.sweep()?;
            print!("{}", fs::read_to_string(s.path("sweep.csv"))?);
            println!("t* = {t} ({})", s.dir.display());
        }
        Command::Evaluate { defense, attack, model } => {
            let (s, row) = p.evaluate(&defense, &attack, &ModelKind::parse(&model))?;
            let report = spkguard_core::metrics::EvalReport { rows: vec![row] };
            print!("{}", report.to_table());
            println!("{}", s.dir.display());
        }
        Command::ReproduceTable => {
            let (s, report) = p.reproduce_table()?;
            print!("{}", report.to_table());
            println!("{}", s.dir.display());
        }
    }
    Ok(())
}
