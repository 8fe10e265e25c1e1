use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use nearid_cli::commands::{self, Model};
use nearid_cli::config::SEED_ENV;
use nearid_cli::output::write_atomic;
use nearid_cli::{CliError, CliResult, ConfigLoader, Overrides};

/// Identity-versus-context metric learning on a synthetic matched-context world.
#[derive(Parser)]
#[command(name = "nearid", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a world: manifest, config echo and optional token grids.
    Gen(GenArgs),
    /// Train the attention-pooling head on a world's training split.
    Train(TrainArgs),
    /// Evaluate a checkpoint, or `frozen`, on one split.
    Eval(EvalArgs),
    /// Train and evaluate a grid of configurations.
    Ablate(AblateArgs),
    /// Convert an evaluation report to CSV tables.
    Report(ReportArgs),
}

#[derive(Args)]
struct Common {
    /// TOML file with config keys.
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    keys: Overrides,
}

impl Common {
    fn loader(&self) -> ConfigLoader<'_> {
        ConfigLoader {
            inherited: None,
            file: self.config.as_deref(),
            env_seed: std::env::var(SEED_ENV).ok(),
            overrides: Some(&self.keys),
        }
    }
}

#[derive(Args)]
struct GenArgs {
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Also write every sample's token grid to `grids.nide`.
    #[arg(long)]
    grids: bool,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct TrainArgs {
    /// Directory written by `gen`.
    #[arg(long)]
    world: PathBuf,
    /// Checkpoint path; the log and config echo are written beside it.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct EvalArgs {
    /// Checkpoint path, or `frozen` for the mean-pooled baseline.
    model: String,
    #[arg(long)]
    world: PathBuf,
    /// Report JSON path.
    #[arg(long)]
    out: PathBuf,
    /// Also write the split's embeddings as a NIDE file.
    #[arg(long)]
    embeddings: Option<PathBuf>,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct AblateArgs {
    /// `key=v1,v2;key=...`, or a file holding one `key=values` per line.
    #[arg(long)]
    sweep: String,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct ReportArgs {
    /// Report JSON written by `eval`.
    report: PathBuf,
    /// Directory for the CSV files.
    #[arg(long)]
    out: PathBuf,
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Gen(a) => {
            let cfg = a.common.loader().load()?;
            let s = commands::gen(&cfg, &a.out, a.grids)?;
            println!("{} samples, {} identities -> {}", s.samples, s.identities, a.out.display());
        }
        Command::Train(a) => {
            let (cfg, world) = commands::load_world(&a.world, a.common.loader())?;
            let t = commands::train_head(&cfg, &world)?;
            commands::write_trained(&cfg, &t, &a.out)?;
            println!("{}", commands::summary_line(&cfg, &t));
        }
        Command::Eval(a) => {
            let (cfg, world) = commands::load_world(&a.world, a.common.loader())?;
            let model = Model::load(&a.model)?;
            let doc = commands::evaluate_model(&cfg, &world, &model)?;
            if let Some(p) = &a.embeddings {
                write_atomic(p, &commands::export_embeddings(&cfg, &world, &model)?.to_bytes())?;
            }
            write_atomic(&a.out, &doc.to_bytes())?;
            let r = &doc.report;
            println!("ssr {:.4} pa {:.4} ({} identities, {} margins)", r.ssr, r.pa, r.n_identities, r.n_margins);
        }
        Command::Ablate(a) => {
            let cfg = a.common.loader().load()?;
            let spec = match std::path::Path::new(&a.sweep) {
                p if p.is_file() => std::fs::read_to_string(p).map_err(|e| CliError::io(p, e))?,
                _ => a.sweep.clone(),
            };
            let axes = commands::parse_sweep(&spec)?;
            let rows = commands::ablate(&cfg, &axes, &a.out)?;
            let fmt = |x: Option<f64>| x.map_or("-".to_string(), |v| format!("{v:.4}"));
            for r in &rows {
                println!(
                    "{:>3} {:<20} alpha {:<5} beta {:<5} ssr {} pa {} m_o {} {}",
                    r.cell,
                    r.loss,
                    r.alpha,
                    r.beta,
                    fmt(r.ssr),
                    fmt(r.pa),
                    fmt(r.m_o),
                    r.status
                );
            }
        }
        Command::Report(a) => {
            for p in commands::report(&a.report, &a.out)? {
                println!("{}", p.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
