//! `simdiff`: train, decode, collaborate, evaluate, and inspect masks.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{ArgGroup, Parser, Subcommand};
use simdiff::Error;

use commands::{Prompt, SweepRow};

#[derive(Parser)]
#[command(name = "simdiff", version, about = "Simplex diffusion language model toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train (or resume, or finetune) a model; writes checkpoints and loss.log.
    Train {
        #[arg(long, short)]
        config: PathBuf,
    },
    /// Generate a continuation of a prompt.
    #[command(group(ArgGroup::new("input").required(true).args(["prompt", "prompt_file"])))]
    Decode {
        #[arg(long, short)]
        config: PathBuf,
        #[arg(long)]
        prompt: Option<String>,
        #[arg(long)]
        prompt_file: Option<PathBuf>,
        /// Write one line per denoising iteration here.
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Combine a core and a user model over a list of lambda values.
    Collab {
        #[arg(long, short)]
        config: PathBuf,
        #[arg(long)]
        instruction: String,
        /// Text shown only to the user model, ahead of the instruction.
        #[arg(long)]
        expert: PathBuf,
        /// Comma-separated weights for the user model.
        #[arg(long, value_delimiter = ',')]
        lambdas: Option<Vec<f64>>,
        /// Also write the report to this file.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Mean reconstruction cross-entropy on held-out text at three noise levels.
    Eval {
        #[arg(long, short)]
        config: PathBuf,
        #[arg(long)]
        held_out: PathBuf,
    },
    /// Print the parallel-training attention mask as 0/1 rows.
    MaskDump {
        /// Prompt length.
        c0: usize,
        /// Number of blocks.
        n: usize,
        /// Block size.
        block: usize,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Numeric { .. } => 3,
        Error::Io { .. } | Error::Format { .. } => 4,
        Error::Config(_) | Error::Domain(_) | Error::Contract(_) | Error::Dispatch { .. } => 2,
    }
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Train { config } => {
            let s = commands::train(&config)?;
            let fmt = |l: Option<f64>| l.map_or("-".to_string(), |l| format!("{l:.4}"));
            println!(
                "trained {} steps, loss {} -> {}, outputs in {}",
                s.steps,
                fmt(s.first_loss),
                fmt(s.last_loss),
                s.output_dir.display()
            );
        }
        Command::Decode {
            config,
            prompt,
            prompt_file,
            trace,
        } => {
            let prompt = match (prompt, prompt_file) {
                (Some(t), _) => Prompt::Text(t),
                (None, Some(p)) => Prompt::File(p),
                (None, None) => unreachable!("clap requires one prompt source"),
            };
            println!("{}", commands::decode(&config, &prompt, trace.as_deref())?);
        }
        Command::Collab {
            config,
            instruction,
            expert,
            lambdas,
            report,
        } => {
            let rows = commands::collab(&config, &instruction, &expert, lambdas.as_deref())?;
            let mut text = format!("{}\n", SweepRow::HEADER);
            for row in &rows {
                text.push_str(&row.line());
                text.push('\n');
            }
            print!("{text}");
            if let Some(path) = report {
                std::fs::write(&path, &text).map_err(|e| Error::io(&path, e))?;
            }
        }
        Command::Eval { config, held_out } => {
            let (rows, vocab) = commands::eval(&config, &held_out)?;
            println!("t\tmean_ce\ttargets\tratio_to_uniform");
            let uniform = (vocab as f64).ln();
            for r in rows {
                println!("{}\t{:.6}\t{}\t{:.6}", r.t, r.mean_ce, r.targets, r.mean_ce / uniform);
            }
        }
        Command::MaskDump { c0, n, block } => match commands::mask_dump(c0, n, block) {
            Ok(rows) => rows.iter().for_each(|r| println!("{r}")),
            Err(e) => {
                eprintln!("usage: simdiff mask-dump <C0> <N> <BLOCK>   (all arguments >= 1)");
                return Err(e);
            }
        },
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
