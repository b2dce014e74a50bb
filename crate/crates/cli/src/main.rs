use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use retro_core::chemio::SplitMode;
use retro_core::evalkit::CaseMode;
use retro_core::experiment::PipelineConfig;
use retro_core::nre::FilterMode;
use retro_core::pipeline::{self, Outcome, Which, Workspace};
use retro_core::synthgen::{generate_corpus, SynthConfig};

/// Retrieval-augmented precursor prediction for inorganic synthesis.
#[derive(Debug, Parser)]
#[command(name = "retro", version)]
struct Cli {
    /// Artifact directory.
    #[arg(long, env = "RETRO_WORKSPACE", default_value = "retro-workspace", global = true)]
    workspace: PathBuf,
    /// Re-run a stage even when its inputs are unchanged.
    #[arg(long, global = true)]
    force: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args, Clone)]
struct ConfigArgs {
    /// JSON config; unspecified fields keep their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
}

impl ConfigArgs {
    fn load(&self) -> Result<PipelineConfig> {
        let mut cfg = match &self.config {
            Some(p) => pipeline::load_config(p).with_context(|| format!("reading config {}", p.display()))?,
            None => PipelineConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        Ok(cfg)
    }
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a synthetic corpus: recipes.jsonl, dft.csv, exp.csv.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 500)]
        recipes: usize,
        #[arg(long, default_value_t = 12)]
        elements: usize,
        #[arg(long, default_value_t = 24)]
        vocab: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long, default_value_t = 0.0)]
        noise: f64,
        #[arg(long, default_value_t = 2000)]
        dft: usize,
        #[arg(long, default_value_t = 100)]
        exp: usize,
    },
    /// Parse and split a recipe file and fix the precursor vocabulary.
    Ingest {
        #[arg(long)]
        recipes: PathBuf,
        #[arg(long)]
        split: Option<SplitMode>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Train the masked-precursor-completion retriever and index the knowledge base.
    TrainMpc {
        #[arg(long)]
        p_mask: Option<f64>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Pretrain the formation-energy model on computed data and fine-tune on experimental data.
    TrainNre {
        #[arg(long)]
        dft: PathBuf,
        #[arg(long)]
        exp: PathBuf,
        /// Train on experimental data only.
        #[arg(long)]
        no_pretrain: bool,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Build reference tables for every recipe.
    PrecomputeRefs {
        #[arg(long, default_value = "both")]
        retriever: Which,
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        filter: Option<FilterMode>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Train the fusion model on the precomputed references.
    Train {
        /// Accepted for symmetry with `ingest`; the split is fixed at ingest time.
        #[arg(long)]
        split: Option<SplitMode>,
        #[arg(long)]
        k: Option<usize>,
        /// Replace both retrieval summaries by zeros.
        #[arg(long)]
        no_retrieval: bool,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Rank precursor sets for a target formula.
    Predict {
        #[arg(long)]
        target: String,
        #[arg(long, default_value_t = 10)]
        topk: usize,
    },
    /// Score the trained model on the test split.
    Evaluate {
        /// Where to write the JSON report (default: eval/report.json in the workspace).
        #[arg(long)]
        report: Option<PathBuf>,
        #[arg(long)]
        case_mode: Option<CaseMode>,
    },
}

fn status(stage: &str, outcome: Outcome) {
    match outcome {
        Outcome::Ran => println!("{stage}: done"),
        Outcome::UpToDate => println!("{stage}: up to date (use --force to rerun)"),
    }
}

fn run(cli: Cli) -> Result<()> {
    if let Command::Synth {
        out,
        recipes,
        elements,
        vocab,
        seed,
        noise,
        dft,
        exp,
    } = &cli.command
    {
        let cfg = SynthConfig {
            n_recipes: *recipes,
            n_elements: *elements,
            vocab_size: *vocab,
            rule_seed: *seed,
            noise_rate: *noise,
            n_dft: *dft,
            n_exp: *exp,
            ..Default::default()
        };
        generate_corpus(&cfg)?.write(out)?;
        println!("synth: wrote {}", out.display());
        return Ok(());
    }
    let ws = Workspace::open(&cli.workspace)?;
    let force = cli.force;
    match cli.command {
        Command::Synth { .. } => unreachable!("handled above"),
        Command::Ingest { recipes, split, cfg } => {
            let mut c = cfg.load()?;
            if let Some(s) = split {
                c.split = s;
            }
            status("ingest", pipeline::ingest(&ws, &recipes, &c, force)?);
        }
        Command::TrainMpc { p_mask, cfg } => {
            let mut c = cfg.load()?;
            if let Some(p) = p_mask {
                c.mpc.p_mask = p;
            }
            status("train-mpc", pipeline::run_train_mpc(&ws, &c, force)?);
        }
        Command::TrainNre {
            dft,
            exp,
            no_pretrain,
            cfg,
        } => {
            let mut c = cfg.load()?;
            c.pretrain &= !no_pretrain;
            status("train-nre", pipeline::run_train_nre(&ws, &dft, &exp, &c, force)?);
        }
        Command::PrecomputeRefs {
            retriever,
            k,
            filter,
            cfg,
        } => {
            let mut c = cfg.load()?;
            if let Some(f) = filter {
                c.filter = f;
            }
            let k = k.unwrap_or(c.fusion.k);
            status("precompute-refs", pipeline::precompute_refs(&ws, retriever, k, &c, force)?);
        }
        Command::Train {
            split: _,
            k,
            no_retrieval,
            cfg,
        } => {
            let mut c = cfg.load()?;
            if let Some(k) = k {
                c.fusion.k = k;
            }
            c.fusion.use_retrieval &= !no_retrieval;
            status("train", pipeline::run_train(&ws, &c, force)?);
        }
        Command::Predict { target, topk } => {
            let p = pipeline::run_predict(&ws, &target, topk)?;
            println!("{}", serde_json::to_string_pretty(&p)?);
        }
        Command::Evaluate { report, case_mode } => {
            let r = pipeline::run_evaluate(&ws, report.as_deref(), case_mode)?;
            print!("{}", r.to_table());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .json()
        .with_writer(std::io::stderr)
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_env("RETRO_LOG").unwrap_or_else(|_| "info".into()),
        )
        .init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
