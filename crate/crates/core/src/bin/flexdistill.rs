use std::io;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use flexdistill::commands::{self, EvalSplit, FaultInjection};
use flexdistill::data::{make_glyphs, GlyphOptions};
use flexdistill::losses::Strategy;
use flexdistill::{Error, Result};

#[derive(Parser)]
#[command(name = "flexdistill", version, about = "Train flexible networks with in-place distillation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one configuration.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Overrides train.seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Overrides output_dir.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train every strategy × seed cell and tabulate best-epoch accuracy.
    Compare {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "NONE,IPKD,TA1,TAM")]
        strategies: Vec<String>,
        #[arg(long, value_delimiter = ',', default_value = "0")]
        seeds: Vec<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference check of every strategy on a tiny model.
    Gradcheck {
        #[arg(long)]
        config: PathBuf,
        /// Scale the first parameter's gradient (tests the checker).
        #[arg(long, hide = true)]
        inject_fault: Option<f64>,
    },
    /// Evaluate a checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Defaults to config.resolved.json next to the checkpoint.
        #[arg(long)]
        config: Option<PathBuf>,
        /// 1-based sub-model index or `all`.
        #[arg(long, default_value = "all")]
        sub_model: String,
        #[arg(long, value_enum, default_value_t = SplitArg::Val)]
        split: SplitArg,
        #[arg(long)]
        json: bool,
    },
    /// Write a seven-segment digit image set as IDX files.
    SynthImages {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 400)]
        per_class: usize,
        #[arg(long, default_value_t = GlyphOptions::default().size)]
        size: usize,
        #[arg(long, default_value_t = GlyphOptions::default().noise)]
        noise: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Val,
}

fn parse_strategies(names: &[String]) -> Result<Vec<Strategy>> {
    names
        .iter()
        .map(|n| {
            Strategy::parse(n.trim()).ok_or_else(|| Error::Config {
                key: "--strategies".into(),
                msg: format!("unknown strategy `{n}` (expected NONE, IPKD, TA1 or TAM)"),
            })
        })
        .collect()
}

fn run(cli: Cli) -> Result<()> {
    let mut out = io::stdout().lock();
    match cli.command {
        Command::Train { config, seed, out: dir } => {
            commands::cmd_train(&config, seed, dir.as_deref(), &mut out)?;
        }
        Command::Compare {
            config,
            strategies,
            seeds,
            out: dir,
        } => {
            let strategies = parse_strategies(&strategies)?;
            commands::cmd_compare(&config, &strategies, &seeds, dir.as_deref(), &mut out)?;
        }
        Command::Gradcheck { config, inject_fault } => {
            let fault = FaultInjection {
                scale_first_grad: inject_fault,
            };
            commands::cmd_gradcheck(&config, fault, &mut out)?;
        }
        Command::Eval {
            checkpoint,
            config,
            sub_model,
            split,
            json,
        } => {
            let config = config.unwrap_or_else(|| {
                checkpoint
                    .parent()
                    .unwrap_or(std::path::Path::new("."))
                    .join(commands::RESOLVED_CONFIG_FILE)
            });
            let which = match sub_model.as_str() {
                "all" => None,
                s => Some(s.parse::<usize>().map_err(|_| Error::Config {
                    key: "--sub-model".into(),
                    msg: format!("expected a 1-based index or `all`, got `{s}`"),
                })?),
            };
            let split = match split {
                SplitArg::Train => EvalSplit::Train,
                SplitArg::Val => EvalSplit::Val,
            };
            commands::cmd_eval(&config, &checkpoint, which, split, json, &mut out)?;
        }
        Command::SynthImages {
            out: dir,
            per_class,
            size,
            noise,
            seed,
        } => {
            let g = make_glyphs(per_class, GlyphOptions { size, noise }, seed)?;
            std::fs::create_dir_all(&dir).map_err(|e| Error::Io {
                context: format!("creating {}", dir.display()),
                source: e,
            })?;
            g.write_idx(dir.join("images.idx"), dir.join("labels.idx"))?;
            println!("wrote {} images of {size}x{size} to {}", g.len(), dir.display());
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
