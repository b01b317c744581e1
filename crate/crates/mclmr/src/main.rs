use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use mclmr::commands::{self, Verdict};
use mclmr::io::write_json;
use mclmr::{CliError, CliResult, RunConfig};
use mclmr_core::scm::Cardinalities;
use mclmr_core::train::GradCheckConfig;
use serde_json::Value;

#[derive(Parser)]
#[command(
    name = "mclmr",
    version,
    about = "Causal multi-behavior recommendation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct RunArgs {
    /// Config file (`[section]` headers, `key = value` lines).
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Override a key, e.g. `--set train.epochs=5`. Repeatable.
    #[arg(long = "set", value_name = "SECTION.KEY=VALUE")]
    overrides: Vec<String>,
    /// Output directory.
    #[arg(long, short, default_value = "out")]
    out: PathBuf,
}

impl RunArgs {
    fn load(&self) -> CliResult<RunConfig> {
        RunConfig::load(self.config.as_deref(), &self.overrides)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Load interaction files, print counts and write id maps.
    Ingest(RunArgs),
    /// Train one model and write checkpoint, history and metrics.
    Train {
        #[command(flatten)]
        run: RunArgs,
        /// Keep backbone parameters fixed; train only the plug-in.
        #[arg(long)]
        freeze_backbone: bool,
    },
    /// Train the full model and each single-component removal.
    Ablate {
        #[command(flatten)]
        run: RunArgs,
        /// Comma-separated subset of variant names (default: all seven).
        #[arg(long, value_delimiter = ',')]
        variants: Option<Vec<String>>,
    },
    /// Compare temperature strategies for the contrastive loss.
    TempVariants {
        #[command(flatten)]
        run: RunArgs,
        /// Also run the inverse-bias rule.
        #[arg(long)]
        inverse: bool,
    },
    /// Group recall of a checkpoint, optionally t-tested against another.
    Analyze {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        compare: Option<PathBuf>,
    },
    /// Check the backdoor estimate against the intervention on random SCMs.
    VerifyBackdoor {
        #[arg(long, default_value_t = 100)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// One cardinality for all six variables, or six comma-separated
        /// values (bias_user, bias_item, user, item, mediator, outcome).
        #[arg(long, value_delimiter = ',', default_value = "2")]
        card: Vec<usize>,
        #[arg(long, default_value_t = 1e-10)]
        threshold: f64,
        /// Also write the report here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare analytic gradients with central differences.
    GradCheck {
        #[arg(long, default_value_t = 20)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1e-6)]
        step: f64,
        #[arg(long, default_value_t = 1e-4)]
        threshold: f64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Per-epoch operation counts of the plug-in.
    CostEstimate {
        #[arg(long)]
        items: u64,
        #[arg(long)]
        behaviors: u64,
        /// Cost of one Jaccard evaluation.
        #[arg(long, default_value_t = 1)]
        jaccard_cost: u64,
        #[arg(long, default_value_t = 4)]
        experts: u64,
        #[arg(long, default_value_t = 64)]
        dim: u64,
        #[arg(long, default_value_t = 1024)]
        user_batch: u64,
        #[arg(long, default_value_t = 1024)]
        item_batch: u64,
    },
    /// Generate a confounded synthetic dataset from the `[synth]` section.
    SynthGen(RunArgs),
    /// Print the resolved configuration with every default filled in.
    PrintConfig {
        #[arg(long, short)]
        config: Option<PathBuf>,
        #[arg(long = "set", value_name = "SECTION.KEY=VALUE")]
        overrides: Vec<String>,
    },
}

fn emit(report: &Value) -> CliResult<()> {
    println!("{}", serde_json::to_string_pretty(report)?);
    Ok(())
}

fn finish(v: Verdict, out: Option<&Path>, what: &str) -> CliResult<()> {
    if let Some(p) = out {
        write_json(p, &v.report)?;
    }
    emit(&v.report)?;
    if v.passed {
        Ok(())
    } else {
        Err(CliError::Numerical(format!(
            "{what} exceeded its threshold"
        )))
    }
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Ingest(a) => emit(&commands::cmd_ingest(&a.load()?, &a.out)?),
        Command::Train {
            run,
            freeze_backbone,
        } => {
            let mut cfg = run.load()?;
            cfg.train.freeze_backbone |= freeze_backbone;
            emit(&commands::cmd_train(&cfg, &run.out)?)
        }
        Command::Ablate { run, variants } => emit(&commands::cmd_ablate(
            &run.load()?,
            variants.as_deref(),
            &run.out,
        )?),
        Command::TempVariants { run, inverse } => emit(&commands::cmd_temp_variants(
            &run.load()?,
            inverse,
            &run.out,
        )?),
        Command::Analyze {
            run,
            checkpoint,
            compare,
        } => emit(&commands::cmd_analyze(
            &run.load()?,
            &checkpoint,
            compare.as_deref(),
            &run.out,
        )?),
        Command::VerifyBackdoor {
            trials,
            seed,
            card,
            threshold,
            out,
        } => {
            let card = match card[..] {
                [c] => Cardinalities::uniform(c),
                [bias_user, bias_item, user, item, mediator, outcome] => Cardinalities {
                    bias_user,
                    bias_item,
                    user,
                    item,
                    mediator,
                    outcome,
                },
                _ => return Err(CliError::usage("--card takes one value or six")),
            };
            finish(
                commands::cmd_verify_backdoor(card, trials, seed, threshold)?,
                out.as_deref(),
                "backdoor deviation",
            )
        }
        Command::GradCheck {
            trials,
            seed,
            step,
            threshold,
            out,
        } => {
            let cfg = GradCheckConfig {
                trials,
                h: step,
                seed,
                threshold,
            };
            finish(
                commands::cmd_grad_check(&cfg)?,
                out.as_deref(),
                "gradient error",
            )
        }
        Command::CostEstimate {
            items,
            behaviors,
            jaccard_cost,
            experts,
            dim,
            user_batch,
            item_batch,
        } => emit(&commands::cmd_cost_estimate(
            items,
            behaviors,
            jaccard_cost,
            experts,
            dim,
            user_batch,
            item_batch,
        )),
        Command::SynthGen(a) => emit(&commands::cmd_synth_gen(&a.load()?, &a.out)?),
        Command::PrintConfig { config, overrides } => {
            let cfg = RunConfig::load(config.as_deref(), &overrides)?;
            print!("{}", cfg.raw().to_text());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("mclmr: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
